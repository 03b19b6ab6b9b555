"""Shared fixtures: the standard planted world and scripted chat backends."""

from __future__ import annotations

import threading

import pytest

from conceptevo import RunConfig, generate_world, initial_library


class ScriptedChat:
    """Replays a fixed sequence of responses; exceptions in the list raise."""

    def __init__(self, script: list):
        self.script = list(script)
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, messages):
        with self._lock:
            idx = self.calls
            self.calls += 1
        if idx >= len(self.script):
            raise AssertionError("scripted chat ran out of responses")
        item = self.script[idx]
        if isinstance(item, Exception):
            raise item
        return item


@pytest.fixture(scope="session")
def acceptance_world():
    return generate_world(10, 6, 0.5, 0.05, seed=7, images_per_class=20)


@pytest.fixture()
def world_run(tmp_path, acceptance_world):
    """Write the standard world to disk and return a ready RunConfig factory."""
    world = acceptance_world
    world.save(tmp_path / "world.json")
    world.manifest().save_jsonl(tmp_path / "manifest.jsonl")
    initial_library(world, 0.5, "salient").save(tmp_path / "library.json")

    def make(**overrides) -> RunConfig:
        base = dict(
            T=15,
            K=10,
            top_k=3,
            gamma=1.0 / 30.0,
            heuristic="topk",
            adapter_mode="zero_shot",
            seed=11,
            scorer_backend="simulated",
            chat_backend="simulated",
            sim_world_path=str(tmp_path / "world.json"),
            manifest_path=str(tmp_path / "manifest.jsonl"),
            initial_library_path=str(tmp_path / "library.json"),
        )
        base.update(overrides)
        return RunConfig(**base)

    return tmp_path, make
