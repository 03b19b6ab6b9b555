"""Deterministic synthetic scorer and chat model with planted ground truth.

Classes are chains of attribute sets: each class inherits the subtle half
of its neighbor's attributes and adds fresh ones, so adjacent classes
genuinely collide when only the generic half of their phrases is in the
library. The simulated chat model reads the same rendered prompts the real
client would send and answers in the same JSON reply format, so full-loop
runs exercise the production prompt and parser end to end.

Chat model modes:
  oracle       proposes the most salient missing discriminative phrases,
               skipping anything already in the prompt's concept lists.
  repeat_prone first pushes vague non-visual descriptors and only moves on
               to real ones once the prompt's history blocks show they
               were already tried. Without history blocks it repeats
               itself forever; this is the instrument for the
               history-conditioning ablation.
  random       proposes uniformly random unused phrases (unguided search).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from ._rng import (
    SALT_FLIPS,
    SALT_INIT_LIBRARY,
    SALT_NOISE,
    SALT_SIM_LLM,
    SALT_WORLD,
    rng_for,
    stable_hash,
)
from .concepts import (
    Concept,
    ConceptLibrary,
    DatasetManifest,
    LabelSet,
    ManifestItem,
    normalize_text,
)
from .errors import InfeasibleWorld
from .evolution import PromptDocument, slug

_ADJECTIVES = [
    "striped", "speckled", "glossy", "matte", "crimson", "amber", "cobalt",
    "ivory", "charcoal", "olive", "bronze", "silvery", "ridged", "smooth",
    "curved", "forked", "tapered", "banded", "mottled", "translucent",
    "velvety", "serrated", "hooked", "flattened", "iridescent", "dusky",
    "pale", "ringed", "crested", "barred", "freckled", "slender", "stubby",
    "angular", "rounded", "wrinkled", "bristled", "downy", "waxy", "frosted",
]
_NOUNS = [
    "crest", "wingtip", "beak", "tail fin", "dorsal stripe", "underbelly",
    "collar", "eye ring", "snout", "flank", "mane", "hind leg", "ear tuft",
    "throat patch", "shoulder band", "leaf edge", "petal rim", "stem joint",
    "seed pod", "rind", "husk", "shell ridge", "horn", "antenna", "carapace",
    "tread", "grille", "fender", "spoke", "hubcap", "canopy", "fuselage",
    "keel", "mast", "rudder", "gable", "cornice", "arch", "balustrade",
    "finial",
]
_JUNK_ADJ = ["pleasant", "ordinary", "familiar", "balanced", "typical", "neutral", "modest"]


@dataclass
class SyntheticWorld:
    labels: tuple[str, ...]
    class_attrs: tuple[tuple[int, ...], ...]  # per class, salient first
    attribute_universe: tuple[int, ...]
    phrase_map: dict[int, str]
    image_classes: tuple[int, ...]  # per image, class index
    image_attrs: tuple[frozenset[int], ...]
    noise_sigma: float
    base_hit: float = 0.8
    base_miss: float = 0.2
    seed: int = 0
    phrase_inverse: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.phrase_inverse:
            self.phrase_inverse = {normalize_text(p): a for a, p in self.phrase_map.items()}
        if len(self.phrase_inverse) != len(self.phrase_map):
            raise InfeasibleWorld("phrase map is not invertible")
        for ci in range(len(self.labels)):
            for cj in range(ci + 1, len(self.labels)):
                if set(self.class_attrs[ci]) == set(self.class_attrs[cj]):
                    raise InfeasibleWorld(
                        f"classes {ci} and {cj} have identical attribute sets"
                    )

    def n_images(self) -> int:
        return len(self.image_classes)

    def image_id(self, idx: int) -> str:
        return f"img_{idx:05d}"

    def label_set(self) -> LabelSet:
        return LabelSet(self.labels)

    def phrases_for(self, class_idx: int) -> list[str]:
        return [self.phrase_map[a] for a in self.class_attrs[class_idx]]

    def fingerprint(self) -> str:
        return f"{stable_hash(self.seed, len(self.labels), *(str(a) for a in self.attribute_universe)):016x}"

    def manifest(self) -> DatasetManifest:
        items = tuple(
            ManifestItem(
                image_id=self.image_id(i),
                image_ref=f"sim://{self.image_id(i)}",
                label=ci,
            )
            for i, ci in enumerate(self.image_classes)
        )
        return DatasetManifest(items=items)

    def to_json(self) -> dict:
        return {
            "labels": list(self.labels),
            "class_attrs": [list(a) for a in self.class_attrs],
            "attribute_universe": list(self.attribute_universe),
            "phrase_map": {str(k): v for k, v in self.phrase_map.items()},
            "image_classes": list(self.image_classes),
            "image_attrs": [sorted(a) for a in self.image_attrs],
            "noise_sigma": self.noise_sigma,
            "base_hit": self.base_hit,
            "base_miss": self.base_miss,
            "seed": self.seed,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True), encoding="utf-8")

    @staticmethod
    def from_json(doc: dict) -> "SyntheticWorld":
        return SyntheticWorld(
            labels=tuple(doc["labels"]),
            class_attrs=tuple(tuple(a) for a in doc["class_attrs"]),
            attribute_universe=tuple(doc["attribute_universe"]),
            phrase_map={int(k): v for k, v in doc["phrase_map"].items()},
            image_classes=tuple(doc["image_classes"]),
            image_attrs=tuple(frozenset(a) for a in doc["image_attrs"]),
            noise_sigma=doc["noise_sigma"],
            base_hit=doc["base_hit"],
            base_miss=doc["base_miss"],
            seed=doc["seed"],
        )

    @staticmethod
    def load(path: str | Path) -> "SyntheticWorld":
        return SyntheticWorld.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def generate_world(
    n_classes: int,
    n_attrs_per_class: int,
    overlap_fraction: float,
    noise_sigma: float,
    seed: int,
    *,
    images_per_class: int = 20,
    flip_prob: float = 0.0,
    base_hit: float = 0.8,
    base_miss: float = 0.2,
) -> SyntheticWorld:
    """Build a chain world where adjacent classes share overlap_fraction attrs."""
    if n_classes < 1 or n_attrs_per_class < 1 or images_per_class < 1:
        raise ValueError("world dimensions must be positive")
    if not 0.0 <= overlap_fraction < 1.0:
        raise ValueError("overlap_fraction must be in [0, 1)")
    n_shared = round(overlap_fraction * n_attrs_per_class)
    if n_classes > 1 and n_shared >= n_attrs_per_class:
        raise InfeasibleWorld(
            f"overlap {overlap_fraction} leaves no fresh attributes per class"
        )

    next_attr = 0
    class_attrs: list[tuple[int, ...]] = []
    for c in range(n_classes):
        if c == 0 or n_shared == 0:
            inherited: tuple[int, ...] = ()
        else:
            inherited = class_attrs[c - 1][-n_shared:]
        fresh_count = n_attrs_per_class - len(inherited)
        fresh = tuple(range(next_attr, next_attr + fresh_count))
        next_attr += fresh_count
        class_attrs.append(inherited + fresh)

    universe = tuple(range(next_attr))
    combos = [(a, n) for a in _ADJECTIVES for n in _NOUNS]
    if len(universe) > len(combos):
        raise InfeasibleWorld(f"world needs {len(universe)} phrases, only {len(combos)} available")
    rng = rng_for(seed, SALT_WORLD)
    order = rng.permutation(len(combos))
    phrase_map = {a: f"{combos[order[a]][0]} {combos[order[a]][1]}" for a in universe}

    labels = tuple(f"category {c:02d}" for c in range(n_classes))
    image_classes = tuple(c for c in range(n_classes) for _ in range(images_per_class))
    image_attrs: list[frozenset[int]] = []
    for i, ci in enumerate(image_classes):
        attrs = set(class_attrs[ci])
        if flip_prob > 0.0:
            flip_rng = rng_for(seed, SALT_FLIPS, i)
            for a in universe:
                if flip_rng.random() < flip_prob:
                    attrs.symmetric_difference_update({a})
        image_attrs.append(frozenset(attrs))

    return SyntheticWorld(
        labels=labels,
        class_attrs=tuple(class_attrs),
        attribute_universe=universe,
        phrase_map=phrase_map,
        image_classes=image_classes,
        image_attrs=tuple(image_attrs),
        noise_sigma=noise_sigma,
        base_hit=base_hit,
        base_miss=base_miss,
        seed=seed,
    )


def simulated_score(world: SyntheticWorld, image_id: str, concept_text: str) -> float:
    """base_hit if the phrase names an attribute the image has, else base_miss,
    plus Gaussian noise seeded per (image, concept)."""
    match = re.fullmatch(r"img_(\d{5})", image_id)
    if match is None or int(match.group(1)) >= world.n_images():
        raise ValueError(f"unknown image id {image_id!r}")
    idx = int(match.group(1))
    norm = normalize_text(concept_text)
    attr = world.phrase_inverse.get(norm)
    base = world.base_hit if attr is not None and attr in world.image_attrs[idx] else world.base_miss
    if world.noise_sigma == 0.0:
        return float(base)
    noise = rng_for(world.seed, SALT_NOISE, image_id, norm).standard_normal()
    return float(base + world.noise_sigma * noise)


def initial_library(
    world: SyntheticWorld, fraction: float, mode: str = "salient"
) -> ConceptLibrary:
    """Version-0 library holding a fraction of each class's phrases.

    "salient" keeps the head of each class's attribute list, the generic
    phrases shared with the neighboring class, which is what leaves real
    confusion for the loop to resolve. "random" is a seeded uniform
    subsample.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    per_class = []
    for ci, attrs in enumerate(world.class_attrs):
        k = max(1, round(fraction * len(attrs)))
        if mode == "salient":
            chosen = attrs[:k]
        elif mode == "random":
            rng = rng_for(world.seed, SALT_INIT_LIBRARY, ci)
            pick = sorted(rng.choice(len(attrs), size=k, replace=False).tolist())
            chosen = tuple(attrs[p] for p in pick)
        else:
            raise ValueError(f"unknown initial library mode {mode!r}")
        per_class.append(tuple(Concept(text=world.phrase_map[a]) for a in chosen))
    return ConceptLibrary(labels=world.label_set(), per_class=tuple(per_class), version=0)


def _junk_phrase(label_i: str, label_j: str, side_label: str, k: int) -> str:
    adj = _JUNK_ADJ[stable_hash(label_i, label_j, side_label, k) % len(_JUNK_ADJ)]
    return f"{adj} overall appearance, take {k + 1}"


def _parse_prompt(text: str) -> dict:
    """Recover labels, current concept lists, and history proposals from a
    rendered disambiguation prompt."""
    label_i = re.search(r"^Category A: (.*)$", text, re.MULTILINE).group(1)
    label_j = re.search(r"^Category B: (.*)$", text, re.MULTILINE).group(1)
    current: dict[str, list[str]] = {label_i: [], label_j: []}
    lines = text.splitlines()
    active: str | None = None
    for line in lines:
        m = re.match(r"^Current descriptors for (.*):$", line)
        if m:
            active = m.group(1)
            continue
        if active is not None:
            if line.startswith("- "):
                current[active].append(line[2:])
                continue
            active = None
    history: dict[str, list[str]] = {label_i: [], label_j: []}
    for m in re.finditer(r"^  Proposed for (.*?): (.*)$", text, re.MULTILINE):
        label, body = m.group(1), m.group(2)
        if body.strip() == "none":
            continue
        history.setdefault(label, []).extend(re.findall(r'"([^"]*)"', body))
    return {
        "label_i": label_i,
        "label_j": label_j,
        "current": current,
        "history": history,
        "n_history_blocks": len(re.findall(r"^Round \d+ \(iteration", text, re.MULTILINE)),
    }


@dataclass
class SimulatedChatModel:
    """Chat backend answering disambiguation prompts from world ground truth."""

    world: SyntheticWorld
    mode: str = "oracle"
    reply_cap: int = 2
    salience_window: int = 2

    def __post_init__(self):
        if self.mode not in ("oracle", "repeat_prone", "random"):
            raise ValueError(f"unknown simulated chat mode {self.mode!r}")
        self._label_to_idx = {lb: i for i, lb in enumerate(self.world.labels)}

    def _unique_phrases(self, class_label: str, other_label: str) -> list[str]:
        ci = self._label_to_idx[class_label]
        cj = self._label_to_idx[other_label]
        other = set(self.world.class_attrs[cj])
        unique = [a for a in self.world.class_attrs[ci] if a not in other]
        return [self.world.phrase_map[a] for a in unique[: self.salience_window]]

    def _side_reply(self, parsed: dict, side: str, other: str) -> list[str]:
        current = {normalize_text(t) for t in parsed["current"].get(side, [])}
        if self.mode == "oracle":
            candidates = self._unique_phrases(side, other)
            picked = [p for p in candidates if normalize_text(p) not in current]
        elif self.mode == "repeat_prone":
            tried = {normalize_text(t) for t in parsed["history"].get(side, [])}
            junk = [
                _junk_phrase(parsed["label_i"], parsed["label_j"], side, k) for k in range(2)
            ]
            candidates = junk + self._unique_phrases(side, other)
            picked = [p for p in candidates if normalize_text(p) not in tried]
        else:  # random
            pool = [
                p
                for p in (self.world.phrase_map[a] for a in self.world.attribute_universe)
                if normalize_text(p) not in current
            ]
            rng = rng_for(self.world.seed, SALT_SIM_LLM, side, other, *sorted(current))
            rng.shuffle(pool)
            picked = pool
        return picked[: self.reply_cap]

    def complete(self, messages: list[dict]) -> str:
        parsed = _parse_prompt(messages[-1]["content"])
        label_i, label_j = parsed["label_i"], parsed["label_j"]
        reply = {
            "reasoning": f"Compared the distinguishing features of {label_i} and {label_j}.",
            f"concepts_for_{slug(label_i)}": self._side_reply(parsed, label_i, label_j),
            f"concepts_for_{slug(label_j)}": self._side_reply(parsed, label_j, label_i),
        }
        return json.dumps(reply)


def simulated_llm(
    world: SyntheticWorld,
    prompt: PromptDocument,
    *,
    mode: str = "oracle",
    reply_cap: int = 2,
    salience_window: int = 2,
) -> tuple[list[str], list[str]]:
    """Structured form of the simulated chat reply, for direct use in tests."""
    model = SimulatedChatModel(
        world=world, mode=mode, reply_cap=reply_cap, salience_window=salience_window
    )
    doc = json.loads(model.complete(prompt.messages()))
    return (
        doc[f"concepts_for_{slug(prompt.label_i)}"],
        doc[f"concepts_for_{slug(prompt.label_j)}"],
    )


class SimulatedInitChat:
    """Chat backend for init prompts: replies with a class's salient phrases."""

    def __init__(self, world: SyntheticWorld, fraction: float = 1.0):
        self.world = world
        self.fraction = fraction

    def complete(self, messages: list[dict]) -> str:
        content = messages[-1]["content"]
        for ci, label in enumerate(self.world.labels):
            if label in content:
                k = max(1, round(self.fraction * len(self.world.class_attrs[ci])))
                return json.dumps(self.world.phrases_for(ci)[:k])
        return json.dumps([])
