"""Turning confusion into new concepts.

Confused pairs are drawn without replacement, weighted by the confusion
score times an exponential repeat penalty (a pair evolved many times gets
progressively less budget). Each drawn pair produces one chat query whose
prompt carries the pair's full proposal/outcome history, so the model can
see what it already tried and what the critic thought of it. Replies must
put their reasoning in a separate field from the concepts; the reasoning
is demanded, then discarded.
"""

from __future__ import annotations

import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .concepts import Concept, ConceptOrigin, normalize_text
from .errors import NoEligiblePairs, ParseError, UnknownRound
from .heuristics import ConfusionReport
from .llm import ChatBackend, extract_json_object

Pair = tuple[int, int]


@dataclass(frozen=True)
class HistoryRound:
    """One evolution round for a class pair.

    followup_r is the pair's confusion score observed at the next
    iteration; it is absent only on the most recent round.
    """

    iteration: int
    proposed_i: tuple[Concept, ...]
    proposed_j: tuple[Concept, ...]
    followup_r: float | None = None

    def to_json(self) -> dict:
        return {
            "iteration": self.iteration,
            "proposed_i": [c.to_json() for c in self.proposed_i],
            "proposed_j": [c.to_json() for c in self.proposed_j],
            "followup_r": self.followup_r,
        }

    @staticmethod
    def from_json(doc: dict) -> "HistoryRound":
        return HistoryRound(
            iteration=doc["iteration"],
            proposed_i=tuple(Concept.from_json(c) for c in doc["proposed_i"]),
            proposed_j=tuple(Concept.from_json(c) for c in doc["proposed_j"]),
            followup_r=doc["followup_r"],
        )


@dataclass
class HistoryBank:
    """Per-pair record of what was proposed and how confusion responded."""

    t_max: int
    entries: dict[Pair, list[HistoryRound]] = field(default_factory=dict)

    @staticmethod
    def initialize(n_classes: int, t_max: int) -> "HistoryBank":
        # Pairs are materialized lazily; the budget is recorded up front.
        del n_classes
        return HistoryBank(t_max=t_max)

    def rounds(self, pair: Pair) -> list[HistoryRound]:
        return self.entries.get(_ordered(pair), [])

    def repeat_count(self, pair: Pair) -> int:
        return len(self.rounds(pair))

    def open_rounds(self) -> list[tuple[Pair, int]]:
        """Pairs whose latest round still awaits its follow-up confusion score."""
        out = []
        for pair, rounds in sorted(self.entries.items()):
            if rounds and rounds[-1].followup_r is None:
                out.append((pair, rounds[-1].iteration))
        return out

    def to_json(self) -> dict:
        return {
            "t_max": self.t_max,
            "pairs": {
                f"{i},{j}": [r.to_json() for r in rounds]
                for (i, j), rounds in sorted(self.entries.items())
            },
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True), encoding="utf-8")

    @staticmethod
    def from_json(doc: dict) -> "HistoryBank":
        bank = HistoryBank(t_max=doc["t_max"])
        for key, rounds in doc["pairs"].items():
            i, j = key.split(",")
            bank.entries[(int(i), int(j))] = [HistoryRound.from_json(r) for r in rounds]
        return bank

    @staticmethod
    def load(path: str | Path) -> "HistoryBank":
        return HistoryBank.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def _ordered(pair: Pair) -> Pair:
    i, j = pair
    if i == j:
        raise ValueError("a pair must name two distinct classes")
    return (i, j) if i < j else (j, i)


def update_history(
    bank: HistoryBank,
    pair: Pair,
    t: int,
    proposed_i: list[Concept] | tuple[Concept, ...],
    proposed_j: list[Concept] | tuple[Concept, ...],
) -> HistoryBank:
    """Open an evolution round. Re-opening the same (pair, t) is a no-op."""
    pair = _ordered(pair)
    rounds = bank.entries.setdefault(pair, [])
    if rounds:
        if rounds[-1].iteration == t:
            return bank
        if rounds[-1].iteration > t:
            raise ValueError(f"rounds for pair {pair} must be opened in iteration order")
    rounds.append(
        HistoryRound(iteration=t, proposed_i=tuple(proposed_i), proposed_j=tuple(proposed_j))
    )
    return bank


def record_followup(bank: HistoryBank, pair: Pair, t: int, r_ij: float) -> HistoryBank:
    """Attach the next iteration's confusion score to the round opened at t."""
    pair = _ordered(pair)
    rounds = bank.entries.get(pair)
    if not rounds:
        raise UnknownRound(f"no rounds recorded for pair {pair}")
    for idx, rnd in enumerate(rounds):
        if rnd.iteration == t:
            if rnd.followup_r is None:
                rounds[idx] = replace(rnd, followup_r=float(r_ij))
            return bank
    raise UnknownRound(f"pair {pair} has no round opened at iteration {t}")


def compute_sample_prob(r_ij: float, repeat_count: int, gamma: float) -> float:
    """max(r, 0) * 2^(-gamma * repeat_count).

    With gamma = 1/30 the weight halves after 30 repeat evolutions of the
    same pair; negative confusion means the classes are not confused at
    all, so it clamps to zero weight.
    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    if repeat_count < 0:
        raise ValueError("repeat_count must be non-negative")
    return max(float(r_ij), 0.0) * 2.0 ** (-gamma * repeat_count)


@dataclass(frozen=True)
class PairSample:
    pairs: tuple[tuple[int, int, float, float], ...]  # (i, j, r_ij, s_ij)
    seed: int


def subsample_pairs(
    report: ConfusionReport,
    bank: HistoryBank,
    k_pairs: int,
    gamma: float,
    seed: int,
) -> PairSample:
    """Draw up to k_pairs distinct pairs, each draw proportional to its weight."""
    if k_pairs < 1:
        raise ValueError("k_pairs must be >= 1")
    n = report.n_classes()
    pairs = []
    weights = []
    for i in range(n):
        for j in range(i + 1, n):
            s = compute_sample_prob(report.r[i, j], bank.repeat_count((i, j)), gamma)
            if s > 0.0:
                pairs.append((i, j, float(report.r[i, j]), s))
                weights.append(s)
    if not pairs:
        raise NoEligiblePairs("every pair has zero sampling weight")
    rng = np.random.default_rng(seed)
    w = np.asarray(weights, dtype=np.float64)
    chosen = []
    for _ in range(min(k_pairs, len(pairs))):
        total = w.sum()
        u = rng.random() * total
        idx = int(np.searchsorted(np.cumsum(w), u, side="right"))
        idx = min(idx, len(pairs) - 1)
        chosen.append(pairs[idx])
        w[idx] = 0.0
        if w.sum() <= 0.0:
            break
    return PairSample(pairs=tuple(chosen), seed=seed)


def slug(label: str) -> str:
    return re.sub(r"\W+", "_", label.strip().lower()).strip("_")


@dataclass(frozen=True)
class PromptDocument:
    """A rendered disambiguation prompt plus the fields it was built from."""

    text: str
    label_i: str
    label_j: str
    concepts_i: tuple[str, ...]
    concepts_j: tuple[str, ...]
    n_history_blocks: int

    def messages(self) -> list[dict]:
        return [{"role": "user", "content": self.text}]


def _render_proposals(label: str, concepts: tuple[Concept, ...]) -> str:
    if not concepts:
        return f"  Proposed for {label}: none"
    quoted = "; ".join(f'"{c.text}"' for c in concepts)
    return f"  Proposed for {label}: {quoted}"


def build_disambiguation_prompt(
    label_i: str,
    label_j: str,
    concepts_i: list[Concept] | tuple[Concept, ...],
    concepts_j: list[Concept] | tuple[Concept, ...],
    rounds: list[HistoryRound],
    *,
    max_concept_chars: int = 250,
) -> PromptDocument:
    """Compose the history-conditioned disambiguation prompt.

    One block per past round, chronological; identical inputs produce
    byte-identical text.
    """
    lines: list[str] = []
    lines.append(
        "You are helping an image classifier that scores natural-language visual "
        "descriptors against photos. The two categories below are frequently "
        "confused with each other. Propose new, visually checkable descriptors "
        "that hold for one category but not the other."
    )
    lines.append(f"Category A: {label_i}")
    lines.append(f"Category B: {label_j}")
    lines.append("")
    lines.append(f"Current descriptors for {label_i}:")
    for c in concepts_i:
        lines.append(f"- {c.text}")
    lines.append(f"Current descriptors for {label_j}:")
    for c in concepts_j:
        lines.append(f"- {c.text}")
    if rounds:
        lines.append("")
        lines.append("Earlier attempts for this pair, oldest first:")
        for n, rnd in enumerate(rounds, start=1):
            lines.append(f"Round {n} (iteration {rnd.iteration}):")
            lines.append(_render_proposals(label_i, rnd.proposed_i))
            lines.append(_render_proposals(label_j, rnd.proposed_j))
            if rnd.followup_r is None:
                lines.append("  confusion after update: not yet measured")
            else:
                lines.append(f"  confusion after update: {rnd.followup_r:.2f}")
    key_i = f"concepts_for_{slug(label_i)}"
    key_j = f"concepts_for_{slug(label_j)}"
    lines.append("")
    lines.append(
        "Think about which visual features separate the two categories, then "
        "answer with a single JSON object of this exact shape:"
    )
    lines.append(
        json.dumps(
            {"reasoning": "...", key_i: ["..."], key_j: ["..."]}, sort_keys=False
        )
    )
    lines.append(
        f"Keep each descriptor under {max_concept_chars} characters, put all "
        "explanation in the reasoning field only, and return empty arrays if "
        "you have nothing new to add."
    )
    return PromptDocument(
        text="\n".join(lines),
        label_i=label_i,
        label_j=label_j,
        concepts_i=tuple(c.text for c in concepts_i),
        concepts_j=tuple(c.text for c in concepts_j),
        n_history_blocks=len(rounds),
    )


def _clean_reply_list(
    raw: object,
    existing: set[str],
    max_chars: int,
) -> list[str]:
    if not isinstance(raw, list):
        raise ParseError(f"expected a JSON array of strings, got {type(raw).__name__}")
    out: list[str] = []
    for item in raw:
        if not isinstance(item, str):
            continue
        text = " ".join(item.split())
        if not text or len(text) > max_chars:
            continue
        key = normalize_text(text)
        if key in existing:
            continue
        existing.add(key)
        out.append(text)
    return out


def concept_evol(
    llm: ChatBackend,
    prompt: PromptDocument,
    retry_budget: int = 2,
    *,
    iteration: int = 0,
    pair: Pair = (0, 1),
    max_concept_chars: int = 250,
    max_concepts_per_reply: int = 3,
) -> tuple[list[Concept], list[Concept]]:
    """Query the model for one pair and parse its structured reply.

    The reply must carry a reasoning field (the scratchpad) plus one
    concept array per class; concepts that are over-long, empty, or
    duplicates of the class's current list are dropped. Empty results are
    legitimate: the model may decline.
    """
    key_i = f"concepts_for_{slug(prompt.label_i)}"
    key_j = f"concepts_for_{slug(prompt.label_j)}"
    last_err: Exception | None = None
    for _ in range(retry_budget + 1):
        content = llm.complete(prompt.messages())
        try:
            doc = extract_json_object(content)
            if "reasoning" not in doc or not isinstance(doc["reasoning"], str):
                raise ParseError("reply is missing the reasoning field")
            if key_i not in doc or key_j not in doc:
                raise ParseError(f"reply is missing {key_i!r} or {key_j!r}")
            texts_i = _clean_reply_list(
                doc[key_i], set(normalize_text(t) for t in prompt.concepts_i), max_concept_chars
            )[:max_concepts_per_reply]
            texts_j = _clean_reply_list(
                doc[key_j], set(normalize_text(t) for t in prompt.concepts_j), max_concept_chars
            )[:max_concepts_per_reply]
        except ParseError as err:
            last_err = err
            continue
        origin = ConceptOrigin.evolved(iteration, pair)

        def tag(texts: list[str]) -> list[Concept]:
            return [
                Concept(text=t, origin=origin, created_at_iteration=iteration) for t in texts
            ]

        return tag(texts_i), tag(texts_j)
    raise ParseError(f"malformed replies exhausted the retry budget: {last_err}")


def evolve_pairs(
    llm: ChatBackend,
    jobs: list[tuple[Pair, PromptDocument]],
    *,
    retry_budget: int = 2,
    iteration: int = 0,
    max_concept_chars: int = 250,
    max_concepts_per_reply: int = 3,
    max_inflight: int = 8,
) -> list[tuple[Pair, tuple[list[Concept], list[Concept]] | Exception]]:
    """Run concept_evol for many pairs concurrently; results in job order.

    Failures are returned, not raised, so one bad call cannot sink the
    whole iteration.
    """

    def one(job: tuple[Pair, PromptDocument]):
        pair, prompt = job
        try:
            return concept_evol(
                llm,
                prompt,
                retry_budget,
                iteration=iteration,
                pair=pair,
                max_concept_chars=max_concept_chars,
                max_concepts_per_reply=max_concepts_per_reply,
            )
        except Exception as err:  # noqa: BLE001 - degraded, logged by caller
            return err

    with ThreadPoolExecutor(max_workers=max_inflight) as pool:
        results = list(pool.map(one, jobs))
    return [(pair, res) for (pair, _), res in zip(jobs, results)]
