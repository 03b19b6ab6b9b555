"""The outer loop: fit, evaluate, find confusion, evolve concepts, repeat.

Each iteration is checkpointed to run_dir/iter_NNN with the post-merge
library, the fitted weights, the confusion report, the history bank, and a
deterministic iteration record. All randomness is derived from
(seed, purpose, iteration), so a killed run resumed from its last complete
iteration continues bit-identically.

Wall-clock timing lives in a separate section of record.json; the
deterministic payload is what resume equality is judged on.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._rng import SALT_RANDOM_REPORT, SALT_SAMPLER, derive_seed, rng_for
from .adapter import (
    AdapterWeights,
    FitConfig,
    MODE_TRAINED,
    accuracy,
    evaluate,
    few_shot_indices,
    fit,
    warm_start,
    zero_shot_weights,
)
from .concepts import ConceptLibrary, DatasetManifest, merge_concepts, normalize_text
from .config import RunConfig
from .errors import ConfigError, LabelAccessError, NoEligiblePairs, NoLabels
from .evolution import (
    HistoryBank,
    build_disambiguation_prompt,
    evolve_pairs,
    record_followup,
    subsample_pairs,
    update_history,
)
from .heuristics import (
    ConfusionReport,
    agglomerative_confusion,
    emd_confusion,
    labeled_confusion,
    pca_corr_confusion,
    pearson_confusion,
    random_report,
    topk_confusion,
)
from .llm import HttpChatBackend, ReplayChatBackend
from .scoring import (
    CacheFileBackend,
    EmbeddingServiceBackend,
    ScoreCache,
    SimulatedScoreBackend,
    dataset_id,
    score,
)

log = logging.getLogger("conceptevo")


class LabelGuard:
    """Access guard separating evaluation reporting from the evolution path.

    Zero-shot runs may read labels only for reported accuracy; any training
    or heuristic access faults.
    """

    def __init__(self, labels: list[int] | None, policy: str):
        if policy not in ("open", "reporting_only"):
            raise ValueError(f"unknown label policy {policy!r}")
        self._labels = None if labels is None else np.asarray(labels, dtype=np.int64)
        self.policy = policy
        self.training_reads = 0

    @property
    def has_labels(self) -> bool:
        return self._labels is not None

    def reporting_view(self) -> np.ndarray:
        if self._labels is None:
            raise NoLabels("manifest carries no labels")
        return self._labels

    def training_view(self) -> np.ndarray:
        if self._labels is None:
            raise NoLabels("manifest carries no labels")
        if self.policy == "reporting_only":
            raise LabelAccessError(
                "evolution path attempted to read labels in a zero-shot run"
            )
        self.training_reads += 1
        return self._labels


@dataclass(frozen=True)
class IterationRecord:
    t: int
    library_version: int
    n_concepts: int
    accuracy: float | None
    heuristic: str
    sampled_pairs: tuple[tuple[int, int, float, float], ...]
    evolved_pairs: tuple[tuple[int, int, int, int], ...]  # (i, j, added_i, added_j)
    skipped_pairs: tuple[tuple[int, int, str], ...]
    concepts_added: int
    stopped_early: bool = False

    def payload(self) -> dict:
        prefix = f"iter_{self.t:03d}"
        return {
            "t": self.t,
            "library_version": self.library_version,
            "n_concepts": self.n_concepts,
            "accuracy": self.accuracy,
            "heuristic": self.heuristic,
            "library_ref": f"{prefix}/library.json",
            "weights_ref": f"{prefix}/weights.bin",
            "confusion_ref": f"{prefix}/confusion.json",
            "history_ref": f"{prefix}/history.json",
            "sampled_pairs": [list(p) for p in self.sampled_pairs],
            "evolved_pairs": [list(p) for p in self.evolved_pairs],
            "skipped_pairs": [list(p) for p in self.skipped_pairs],
            "concepts_added": self.concepts_added,
            "stopped_early": self.stopped_early,
        }

    @staticmethod
    def from_payload(doc: dict) -> "IterationRecord":
        return IterationRecord(
            t=doc["t"],
            library_version=doc["library_version"],
            n_concepts=doc["n_concepts"],
            accuracy=doc["accuracy"],
            heuristic=doc["heuristic"],
            sampled_pairs=tuple(tuple(p) for p in doc["sampled_pairs"]),
            evolved_pairs=tuple(tuple(p) for p in doc["evolved_pairs"]),
            skipped_pairs=tuple(tuple(p) for p in doc["skipped_pairs"]),
            concepts_added=doc["concepts_added"],
            stopped_early=doc["stopped_early"],
        )


@dataclass
class RunResult:
    records: list[IterationRecord]
    library: ConceptLibrary
    weights: AdapterWeights
    run_dir: Path


def _iter_dir(run_dir: Path, t: int) -> Path:
    return run_dir / f"iter_{t:03d}"


def _build_scorer(config: RunConfig, injected=None):
    if injected is not None:
        return injected
    if config.scorer_backend == "simulated":
        from .simworld import SyntheticWorld

        if not config.sim_world_path:
            raise ConfigError("simulated scorer requires sim_world_path")
        return SimulatedScoreBackend(SyntheticWorld.load(config.sim_world_path))
    if config.scorer_backend == "embedding":
        return EmbeddingServiceBackend(config.embedding_endpoint, config.embedding_model)
    return CacheFileBackend(config.embedding_model)


def _build_chat(config: RunConfig, injected=None):
    if injected is not None:
        return injected
    if config.chat_backend == "simulated":
        from .simworld import SimulatedChatModel, SyntheticWorld

        if not config.sim_world_path:
            raise ConfigError("simulated chat requires sim_world_path")
        return SimulatedChatModel(
            world=SyntheticWorld.load(config.sim_world_path),
            mode=config.sim_llm_mode,
            reply_cap=config.sim_reply_cap,
            salience_window=config.sim_salience_window,
        )
    if config.chat_backend == "replay":
        return ReplayChatBackend.load(config.replay_fixture)
    return HttpChatBackend(
        config.chat_endpoint,
        config.chat_model,
        temperature=config.chat_temperature,
        max_tokens=config.chat_max_tokens,
    )


def _heuristic_report(
    config: RunConfig, preds, guard: LabelGuard, t: int
) -> ConfusionReport:
    if config.heuristic == "topk":
        return topk_confusion(preds, config.top_k, iteration=t)
    if config.heuristic == "pearson":
        return pearson_confusion(preds, iteration=t)
    if config.heuristic == "agglomerative":
        return agglomerative_confusion(preds, config.n_clusters, iteration=t)
    if config.heuristic == "labeled":
        return labeled_confusion(preds, guard.training_view(), iteration=t)
    if config.heuristic == "emd":
        return emd_confusion(preds, iteration=t)
    if config.heuristic == "pca_corr":
        return pca_corr_confusion(preds, config.n_components, iteration=t)
    rng = rng_for(config.seed, SALT_RANDOM_REPORT, t)
    return random_report(preds.n_classes, rng, iteration=t)


def _write_record(path: Path, record: IterationRecord, wall_time_s: float) -> None:
    doc = {"record": record.payload(), "timing": {"wall_time_s": wall_time_s}}
    path.write_text(json.dumps(doc, sort_keys=True, indent=1), encoding="utf-8")


def load_record(path: Path) -> IterationRecord:
    return IterationRecord.from_payload(
        json.loads(path.read_text(encoding="utf-8"))["record"]
    )


def record_payload_bytes(path: Path) -> bytes:
    doc = json.loads(path.read_text(encoding="utf-8"))["record"]
    return json.dumps(doc, sort_keys=True).encode("utf-8")


def _loop(
    config: RunConfig,
    run_dir: Path,
    manifest: DatasetManifest,
    lib: ConceptLibrary,
    bank: HistoryBank,
    prev_weights: AdapterWeights | None,
    prev_col_ids: tuple[str, ...] | None,
    start_t: int,
    stop_after: int | None,
    scorer,
    chat,
) -> RunResult:
    guard = LabelGuard(
        manifest.labels_or_none(),
        "reporting_only" if config.adapter_mode == "zero_shot" else "open",
    )
    cache = ScoreCache(
        run_dir / "cache", scorer.cache_key, dataset_id(manifest), manifest.n
    )
    records: list[IterationRecord] = [
        load_record(_iter_dir(run_dir, t) / "record.json") for t in range(start_t)
    ]
    weights = prev_weights
    labels = lib.labels

    for t in range(start_t, config.T):
        t0 = time.perf_counter()
        scores = score(
            scorer,
            manifest,
            lib,
            config.score_template,
            cache=cache,
            max_inflight=config.max_inflight,
        )

        if config.adapter_mode == "zero_shot":
            weights = zero_shot_weights(lib)
        else:
            if weights is None:
                init = zero_shot_weights(lib)
                init = AdapterWeights(
                    matrix=init.matrix.astype(np.float32),
                    mode=MODE_TRAINED,
                    l1_lambda=config.l1_lambda,
                )
            else:
                init = warm_start(weights, prev_col_ids, scores.col_ids)
            y = guard.training_view()
            fit_scores = scores
            fit_labels = y
            if config.adapter_mode == "few_shot":
                rows = few_shot_indices(y, config.few_shot_n, config.seed)
                from .scoring import ScoreMatrix

                fit_scores = ScoreMatrix(
                    values=scores.values[rows],
                    row_ids=tuple(scores.row_ids[r] for r in rows),
                    col_ids=scores.col_ids,
                )
                fit_labels = y[rows]
            weights = fit(
                init,
                fit_scores,
                fit_labels,
                FitConfig(
                    lr=config.lr,
                    epochs=config.epochs,
                    batch_size=config.batch_size,
                    l1_lambda=config.l1_lambda,
                    seed=derive_seed(config.seed, t),
                ),
            )
        prev_col_ids = scores.col_ids

        preds = evaluate(weights, scores)
        acc = accuracy(preds, guard.reporting_view()) if guard.has_labels else None
        report = _heuristic_report(config, preds, guard, t)

        # Close out rounds opened at earlier iterations with today's score.
        for pair, t_open in bank.open_rounds():
            if t_open < t:
                record_followup(bank, pair, t_open, float(report.r[pair[0], pair[1]]))

        stopped_early = False
        sampled: tuple = ()
        evolved: list[tuple[int, int, int, int]] = []
        skipped: list[tuple[int, int, str]] = []
        lib_next = lib
        try:
            sample = subsample_pairs(
                report, bank, config.K, config.gamma,
                derive_seed(config.seed, SALT_SAMPLER, t),
            )
            sampled = sample.pairs
        except NoEligiblePairs:
            log.info("iteration %d: no eligible pairs, confusion resolved or decayed", t)
            stopped_early = config.early_stop
            sample = None

        if sample is not None:
            jobs = []
            for i, j, _, _ in sample.pairs:
                rounds = bank.rounds((i, j)) if config.history_conditioning else []
                jobs.append(
                    (
                        (i, j),
                        build_disambiguation_prompt(
                            labels[i],
                            labels[j],
                            lib.concepts_for(i),
                            lib.concepts_for(j),
                            rounds,
                            max_concept_chars=config.max_concept_chars,
                        ),
                    )
                )
            results = evolve_pairs(
                chat,
                jobs,
                retry_budget=config.retry_budget,
                iteration=t,
                max_concept_chars=config.max_concept_chars,
                max_concepts_per_reply=config.max_concepts_per_reply,
                max_inflight=config.max_inflight,
            )
            for (i, j), res in results:
                if isinstance(res, Exception):
                    log.warning("iteration %d: pair (%d, %d) skipped: %s", t, i, j, res)
                    skipped.append((i, j, type(res).__name__))
                    continue
                new_i, new_j = res
                kept_i = _novel(lib_next, i, new_i)
                lib_next = merge_concepts(lib_next, i, new_i)
                kept_j = _novel(lib_next, j, new_j)
                lib_next = merge_concepts(lib_next, j, new_j)
                update_history(bank, (i, j), t, kept_i, kept_j)
                evolved.append((i, j, len(kept_i), len(kept_j)))

        lib_next = lib_next.with_version(t + 1)
        n_added = sum(e[2] + e[3] for e in evolved)

        record = IterationRecord(
            t=t,
            library_version=lib.version,
            n_concepts=lib.total_concepts(),
            accuracy=acc,
            heuristic=report.heuristic,
            sampled_pairs=tuple(sampled),
            evolved_pairs=tuple(evolved),
            skipped_pairs=tuple(skipped),
            concepts_added=n_added,
            stopped_early=stopped_early,
        )
        records.append(record)

        it_dir = _iter_dir(run_dir, t)
        it_dir.mkdir(parents=True, exist_ok=True)
        lib_next.save(it_dir / "library.json")
        weights.save(it_dir / "weights.bin", it_dir / "weights.json", t)
        report.save(it_dir / "confusion.json", labels.labels)
        bank.save(it_dir / "history.json")
        _write_record(it_dir / "record.json", record, time.perf_counter() - t0)
        if acc is not None:
            log.info(
                "iteration %d: accuracy %.4f, %d concepts, %d added",
                t, acc, lib.total_concepts(), n_added,
            )

        lib = lib_next
        if stopped_early:
            break
        if stop_after is not None and t + 1 >= stop_after:
            break

    return RunResult(records=records, library=lib, weights=weights, run_dir=run_dir)


def _novel(lib: ConceptLibrary, class_idx: int, new) -> list:
    existing = {normalize_text(c.text) for c in lib.concepts_for(class_idx)}
    return [c for c in new if normalize_text(c.text) not in existing]


def run(
    config: RunConfig,
    run_dir: str | Path,
    *,
    stop_after: int | None = None,
    scorer_backend=None,
    chat_backend=None,
) -> RunResult:
    """Execute the loop from iteration 0, checkpointing each iteration."""
    config.validate()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    config.save(run_dir / "config.json")
    manifest = DatasetManifest.load_jsonl(config.manifest_path)
    lib = ConceptLibrary.load(config.initial_library_path)
    if lib.version != 0:
        raise ConfigError("initial library must be version 0")
    bank = HistoryBank.initialize(len(lib.labels), config.T)
    return _loop(
        config,
        run_dir,
        manifest,
        lib,
        bank,
        prev_weights=None,
        prev_col_ids=None,
        start_t=0,
        stop_after=stop_after,
        scorer=_build_scorer(config, scorer_backend),
        chat=_build_chat(config, chat_backend),
    )


def last_complete_iteration(run_dir: Path) -> int:
    """Highest t with a full checkpoint on disk, or -1."""
    best = -1
    for it_dir in sorted(Path(run_dir).glob("iter_*")):
        t = int(it_dir.name.split("_")[1])
        if all(
            (it_dir / name).exists()
            for name in ("library.json", "weights.bin", "weights.json",
                         "confusion.json", "history.json", "record.json")
        ):
            best = max(best, t)
    return best


def resume(
    run_dir: str | Path,
    *,
    stop_after: int | None = None,
    scorer_backend=None,
    chat_backend=None,
) -> RunResult:
    """Continue a checkpointed run from its last complete iteration."""
    run_dir = Path(run_dir)
    config = RunConfig.load(run_dir / "config.json")
    manifest = DatasetManifest.load_jsonl(config.manifest_path)
    k = last_complete_iteration(run_dir)
    if k < 0:
        raise ConfigError(f"{run_dir} holds no complete iteration to resume from")
    it_dir = _iter_dir(run_dir, k)
    initial = ConceptLibrary.load(config.initial_library_path)
    lib = ConceptLibrary.load(it_dir / "library.json", initial.labels)
    bank = HistoryBank.load(it_dir / "history.json")
    prev_weights = AdapterWeights.load(it_dir / "weights.bin", it_dir / "weights.json")
    prev_col_ids: tuple[str, ...] | None = None
    if config.adapter_mode != "zero_shot":
        # Weights at iteration k were fitted against the library version k,
        # i.e. the pre-merge column layout of that iteration.
        if k == 0:
            prev_lib = initial
        else:
            prev_lib = ConceptLibrary.load(_iter_dir(run_dir, k - 1) / "library.json",
                                           initial.labels)
        prev_col_ids = tuple(prev_lib.column_ids())
    return _loop(
        config,
        run_dir,
        manifest,
        lib,
        bank,
        prev_weights=prev_weights if config.adapter_mode != "zero_shot" else None,
        prev_col_ids=prev_col_ids,
        start_t=k + 1,
        stop_after=stop_after,
        scorer=_build_scorer(config, scorer_backend),
        chat=_build_chat(config, chat_backend),
    )


def export_report(run_dir: str | Path, out_dir: str | Path) -> Path:
    """Write report.csv plus per-iteration confusion JSON copies."""
    import csv
    import shutil

    run_dir = Path(run_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "confusion").mkdir(exist_ok=True)
    rows = []
    best = float("nan")
    for it_dir in sorted(run_dir.glob("iter_*")):
        rec = load_record(it_dir / "record.json")
        acc = rec.accuracy if rec.accuracy is not None else float("nan")
        if not np.isnan(acc):
            best = acc if np.isnan(best) else max(best, acc)
        rows.append(
            {
                "t": rec.t,
                "accuracy": acc,
                "best_so_far": best,
                "n_concepts": rec.n_concepts,
                "concepts_added": rec.concepts_added,
                "pairs_sampled": len(rec.sampled_pairs),
                "pairs_skipped": len(rec.skipped_pairs),
                "stopped_early": rec.stopped_early,
            }
        )
        shutil.copyfile(
            it_dir / "confusion.json", out_dir / "confusion" / f"iter_{rec.t:03d}.json"
        )
    csv_path = out_dir / "report.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    return csv_path


def inspect_pair(run_dir: str | Path, i: int, j: int) -> str:
    """Human-readable history for one class pair from the latest checkpoint."""
    run_dir = Path(run_dir)
    k = last_complete_iteration(run_dir)
    if k < 0:
        return "no iterations on disk"
    bank = HistoryBank.load(_iter_dir(run_dir, k) / "history.json")
    pair = (min(i, j), max(i, j))
    rounds = bank.rounds(pair)
    if not rounds:
        return f"pair ({pair[0]}, {pair[1]}): no evolution history"
    lines = [f"pair ({pair[0]}, {pair[1]}): {len(rounds)} round(s)"]
    for rnd in rounds:
        followup = "pending" if rnd.followup_r is None else f"{rnd.followup_r:.4f}"
        lines.append(
            f"  iteration {rnd.iteration}: "
            f"+{len(rnd.proposed_i)} for class {pair[0]}, "
            f"+{len(rnd.proposed_j)} for class {pair[1]}, "
            f"confusion after: {followup}"
        )
        for c in rnd.proposed_i:
            lines.append(f"    [{pair[0]}] {c.text}")
        for c in rnd.proposed_j:
            lines.append(f"    [{pair[1]}] {c.text}")
    return "\n".join(lines)
