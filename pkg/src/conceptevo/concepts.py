"""Label set, versioned concept library, and dataset manifests.

The library maps each class to an ordered list of natural-language
descriptors. Iterations only ever append concepts; anything useless is
left for the adapter to down-weight. Duplicate detection is
case-insensitive with collapsed whitespace because chat models re-emit
near-identical strings.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from ._rng import stable_hash
from .errors import EmptyClass, ParseError
from .llm import ChatBackend, extract_json_array

DEFAULT_MAX_CONCEPT_CHARS = 250
DEFAULT_MIN_INITIAL_CONCEPTS = 3


def normalize_text(text: str) -> str:
    """Dedup key: lowercase with internal whitespace collapsed."""
    return " ".join(text.split()).lower()


@dataclass(frozen=True)
class LabelSet:
    """Ordered, immutable class names. Indices are stable across iterations."""

    labels: tuple[str, ...]

    def __post_init__(self):
        if not self.labels:
            raise ValueError("label set must be non-empty")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("labels must be distinct")
        object.__setattr__(self, "labels", tuple(self.labels))

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, idx: int) -> str:
        return self.labels[idx]

    def index(self, label: str) -> int:
        return self.labels.index(label)


@dataclass(frozen=True)
class ConceptOrigin:
    kind: str  # "initial" or "evolved"
    iteration: int | None = None
    pair: tuple[int, int] | None = None

    @staticmethod
    def initial() -> "ConceptOrigin":
        return ConceptOrigin(kind="initial")

    @staticmethod
    def evolved(iteration: int, pair: tuple[int, int]) -> "ConceptOrigin":
        return ConceptOrigin(kind="evolved", iteration=iteration, pair=(int(pair[0]), int(pair[1])))

    def to_json(self) -> dict:
        doc: dict = {"kind": self.kind}
        if self.kind == "evolved":
            doc["iteration"] = self.iteration
            doc["pair"] = list(self.pair)
        return doc

    @staticmethod
    def from_json(doc: dict) -> "ConceptOrigin":
        if doc["kind"] == "initial":
            return ConceptOrigin.initial()
        return ConceptOrigin.evolved(doc["iteration"], tuple(doc["pair"]))


@dataclass(frozen=True)
class Concept:
    """One natural-language visual descriptor.

    Text must be non-empty, trimmed, and short enough for the downstream
    text encoder (the scoring backend has a hard context window).
    """

    text: str
    origin: ConceptOrigin = field(default_factory=ConceptOrigin.initial)
    created_at_iteration: int = 0

    def __post_init__(self):
        if self.text != self.text.strip() or not self.text:
            raise ValueError(f"concept text must be non-empty and trimmed: {self.text!r}")
        if self.created_at_iteration < 0:
            raise ValueError("created_at_iteration must be >= 0")

    def to_json(self) -> dict:
        return {
            "text": self.text,
            "origin": self.origin.to_json(),
            "created_at_iteration": self.created_at_iteration,
        }

    @staticmethod
    def from_json(doc: dict) -> "Concept":
        return Concept(
            text=doc["text"],
            origin=ConceptOrigin.from_json(doc["origin"]),
            created_at_iteration=doc["created_at_iteration"],
        )


def concept_column_id(class_label: str, text: str) -> str:
    """Stable identifier for a (class, concept) score column."""
    return f"{stable_hash(class_label, normalize_text(text)):016x}"


@dataclass(frozen=True)
class ConceptLibrary:
    """Per-class concept lists at a given loop version.

    Invariants: every class has at least one concept; texts within a class
    are unique under normalization; versions only ever grow by appending.
    """

    labels: LabelSet
    per_class: tuple[tuple[Concept, ...], ...]
    version: int = 0

    def __post_init__(self):
        if len(self.per_class) != len(self.labels):
            raise ValueError("per_class length must match label count")
        for idx, concepts in enumerate(self.per_class):
            if not concepts:
                raise ValueError(f"class {self.labels[idx]!r} has no concepts")
            keys = [normalize_text(c.text) for c in concepts]
            if len(set(keys)) != len(keys):
                raise ValueError(f"class {self.labels[idx]!r} has duplicate concepts")
        object.__setattr__(self, "per_class", tuple(tuple(cs) for cs in self.per_class))

    def concepts_for(self, class_idx: int) -> tuple[Concept, ...]:
        return self.per_class[class_idx]

    def total_concepts(self) -> int:
        return sum(len(cs) for cs in self.per_class)

    def flatten(self) -> list[tuple[int, Concept]]:
        """Class-major, insertion-ordered concept listing (the score-column order)."""
        return [(ci, c) for ci, cs in enumerate(self.per_class) for c in cs]

    def column_ids(self) -> list[str]:
        return [concept_column_id(self.labels[ci], c.text) for ci, c in self.flatten()]

    def with_version(self, version: int) -> "ConceptLibrary":
        return ConceptLibrary(labels=self.labels, per_class=self.per_class, version=version)

    def is_superset_of(self, older: "ConceptLibrary") -> bool:
        for mine, theirs in zip(self.per_class, older.per_class):
            if mine[: len(theirs)] != theirs:
                return False
        return True

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "classes": {
                label: [c.to_json() for c in concepts]
                for label, concepts in zip(self.labels.labels, self.per_class)
            },
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, ensure_ascii=False, indent=1)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @staticmethod
    def from_json(doc: dict, labels: LabelSet | None = None) -> "ConceptLibrary":
        if labels is None:
            labels = LabelSet(tuple(sorted(doc["classes"].keys())))
        per_class = tuple(
            tuple(Concept.from_json(c) for c in doc["classes"][label]) for label in labels.labels
        )
        return ConceptLibrary(labels=labels, per_class=per_class, version=doc["version"])

    @staticmethod
    def load(path: str | Path, labels: LabelSet | None = None) -> "ConceptLibrary":
        return ConceptLibrary.from_json(
            json.loads(Path(path).read_text(encoding="utf-8")), labels
        )


def merge_concepts(lib: ConceptLibrary, class_idx: int, new: list[Concept]) -> ConceptLibrary:
    """Append novel concepts to one class; duplicates are dropped silently.

    The returned library keeps the input's version: the orchestrator bumps
    the version once per iteration, after all pair merges.
    """
    existing = set(normalize_text(c.text) for c in lib.per_class[class_idx])
    added = []
    for concept in new:
        key = normalize_text(concept.text)
        if key in existing:
            continue
        existing.add(key)
        added.append(concept)
    if not added:
        return lib
    per_class = list(lib.per_class)
    per_class[class_idx] = per_class[class_idx] + tuple(added)
    return ConceptLibrary(labels=lib.labels, per_class=tuple(per_class), version=lib.version)


@dataclass(frozen=True)
class ManifestItem:
    image_id: str
    image_ref: str
    label: int | None = None


@dataclass(frozen=True)
class DatasetManifest:
    """Image listing with optional class labels."""

    items: tuple[ManifestItem, ...]

    def __post_init__(self):
        ids = [it.image_id for it in self.items]
        if len(set(ids)) != len(ids):
            raise ValueError("image_id values must be unique")

    @property
    def n(self) -> int:
        return len(self.items)

    def image_ids(self) -> list[str]:
        return [it.image_id for it in self.items]

    def labels_or_none(self) -> list[int] | None:
        labels = [it.label for it in self.items]
        if any(lb is None for lb in labels):
            return None
        return labels  # type: ignore[return-value]

    def save_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for it in self.items:
                doc = {"image_id": it.image_id, "image_ref": it.image_ref}
                if it.label is not None:
                    doc["label"] = it.label
                fh.write(json.dumps(doc, sort_keys=True) + "\n")

    @staticmethod
    def load_jsonl(path: str | Path) -> "DatasetManifest":
        items = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                doc = json.loads(line)
                items.append(
                    ManifestItem(
                        image_id=doc["image_id"],
                        image_ref=doc["image_ref"],
                        label=doc.get("label"),
                    )
                )
        return DatasetManifest(items=tuple(items))


def _valid_concepts(
    texts: list[str], max_chars: int, existing_keys: set[str]
) -> list[str]:
    out = []
    for raw in texts:
        if not isinstance(raw, str):
            continue
        text = " ".join(raw.split())
        if not text or len(text) > max_chars:
            continue
        key = normalize_text(text)
        if key in existing_keys:
            continue
        existing_keys.add(key)
        out.append(text)
    return out


def init_concepts(
    labels: LabelSet,
    llm: ChatBackend,
    prompt_template: str,
    *,
    min_initial_concepts: int = DEFAULT_MIN_INITIAL_CONCEPTS,
    max_concept_chars: int = DEFAULT_MAX_CONCEPT_CHARS,
    retry_budget: int = 2,
    max_inflight: int = 8,
) -> ConceptLibrary:
    """Build the version-0 library with one chat query per class.

    The model is expected to reply with a JSON array of descriptor strings.
    Per-class requests fan out concurrently; assembly is ordered by class
    index so the result is deterministic for deterministic backends.
    """
    if "{class}" not in prompt_template:
        raise ValueError("prompt_template must contain a {class} placeholder")

    def one_class(label: str) -> tuple[Concept, ...]:
        last_error: Exception | None = None
        best: list[str] = []
        for _ in range(retry_budget + 1):
            content = llm.complete(
                [{"role": "user", "content": prompt_template.format(**{"class": label})}]
            )
            try:
                texts = extract_json_array(content)
            except ParseError as err:
                last_error = err
                continue
            keys: set[str] = set()
            valid = _valid_concepts(texts, max_concept_chars, keys)
            if len(valid) >= min_initial_concepts:
                best = valid
                break
            if len(valid) > len(best):
                best = valid
        if not best:
            if last_error is not None:
                raise ParseError(f"class {label!r}: {last_error}")
            raise EmptyClass(f"model returned no valid concepts for class {label!r}")
        return tuple(Concept(text=t) for t in best)

    with ThreadPoolExecutor(max_workers=max_inflight) as pool:
        per_class = tuple(pool.map(one_class, labels.labels))
    return ConceptLibrary(labels=labels, per_class=per_class, version=0)
