"""Run configuration: one flat JSON document, every field flag-overridable."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

HEURISTICS = ("topk", "pearson", "agglomerative", "labeled", "emd", "pca_corr", "random")
ADAPTER_MODES = ("zero_shot", "few_shot", "fine_tuned")
SCORER_BACKENDS = ("simulated", "embedding", "cache_file")
CHAT_BACKENDS = ("simulated", "http", "replay")


@dataclass
class RunConfig:
    # Loop schedule
    T: int = 60
    K: int = 50
    top_k: int = 3
    gamma: float = 1.0 / 30.0
    heuristic: str = "topk"
    n_clusters: int = 2
    n_components: int = 2
    early_stop: bool = True
    history_conditioning: bool = True
    seed: int = 0

    # Adapter
    adapter_mode: str = "zero_shot"
    few_shot_n: int = 8
    lr: float = 1e-2
    epochs: int = 50
    batch_size: int = 32
    l1_lambda: float = 0.0

    # Concepts
    max_concept_chars: int = 250
    min_initial_concepts: int = 3
    max_concepts_per_reply: int = 3
    retry_budget: int = 2
    max_inflight: int = 8

    # Scoring
    scorer_backend: str = "simulated"
    score_template: str = "a photo of a {class}. {concept}"
    embedding_endpoint: str = "http://127.0.0.1:8000"
    embedding_model: str = "vit-b-32"

    # Chat
    chat_backend: str = "simulated"
    chat_endpoint: str = "http://127.0.0.1:8001"
    chat_model: str = "local-chat"
    chat_temperature: float = 0.7
    chat_max_tokens: int = 1024
    replay_fixture: str = ""
    init_template: str = (
        "List the distinct visual features useful for recognizing a photo of a "
        "{class}. Reply with a JSON array of short descriptor strings."
    )

    # Simulated backends
    sim_world_path: str = ""
    sim_llm_mode: str = "oracle"
    sim_reply_cap: int = 2
    sim_salience_window: int = 2

    # Inputs
    manifest_path: str = ""
    initial_library_path: str = ""

    def validate(self) -> "RunConfig":
        if self.T < 1 or self.K < 1:
            raise ConfigError("T and K must be >= 1")
        if self.gamma < 0:
            raise ConfigError("gamma must be non-negative")
        if self.heuristic not in HEURISTICS:
            raise ConfigError(f"heuristic must be one of {HEURISTICS}")
        if self.adapter_mode not in ADAPTER_MODES:
            raise ConfigError(f"adapter_mode must be one of {ADAPTER_MODES}")
        if self.scorer_backend not in SCORER_BACKENDS:
            raise ConfigError(f"scorer_backend must be one of {SCORER_BACKENDS}")
        if self.chat_backend not in CHAT_BACKENDS:
            raise ConfigError(f"chat_backend must be one of {CHAT_BACKENDS}")
        if not self.manifest_path or not self.initial_library_path:
            raise ConfigError("manifest_path and initial_library_path are required")
        return self

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_json(), sort_keys=True, indent=1), encoding="utf-8"
        )

    @staticmethod
    def from_json(doc: dict) -> "RunConfig":
        known = {f.name: f for f in dataclasses.fields(RunConfig)}
        unknown = set(doc) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return RunConfig(**doc)

    @staticmethod
    def load(path: str | Path) -> "RunConfig":
        return RunConfig.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def with_overrides(self, overrides: dict[str, str]) -> "RunConfig":
        """Apply --key=value strings, coercing to each field's type."""
        fields = {f.name: f for f in dataclasses.fields(RunConfig)}
        doc = self.to_json()
        for key, raw in overrides.items():
            if key not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            current = doc[key]
            target = fields[key].type
            if target == "bool" or isinstance(current, bool):
                doc[key] = raw.lower() in ("1", "true", "yes", "on")
            elif isinstance(current, int):
                doc[key] = int(raw)
            elif isinstance(current, float):
                doc[key] = float(raw)
            else:
                doc[key] = raw
        return RunConfig.from_json(doc)
