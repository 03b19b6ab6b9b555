"""Shim conformance: the engine's embedding backend runs unmodified against
a live shim over real HTTP.

The automated run uses the hashed backbone (no weights needed). The
ViT-B/32 variant mirrors the same check against real CLIP weights and is
skipped when they cannot be loaded.
"""

from __future__ import annotations

import socket
import threading
import time

import httpx
import numpy as np
import pytest
import uvicorn

from clip_shim import create_app, load_backbone

conceptevo = pytest.importorskip("conceptevo")

from conceptevo import Concept, ConceptLibrary, LabelSet, zero_shot_weights  # noqa: E402
from conceptevo.adapter import evaluate  # noqa: E402
from conceptevo.concepts import DatasetManifest, ManifestItem  # noqa: E402
from conceptevo.scoring import EmbeddingServiceBackend, score  # noqa: E402


def free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


class LiveShim:
    def __init__(self, backbone_name: str, image_root):
        self.backbone = load_backbone(backbone_name, dim=128)
        self.port = free_port()
        config = uvicorn.Config(
            create_app(self.backbone, image_root),
            host="127.0.0.1", port=self.port, log_level="error",
        )
        self.server = uvicorn.Server(config)
        self.thread = threading.Thread(target=self.server.run, daemon=True)

    @property
    def endpoint(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    def __enter__(self):
        self.thread.start()
        deadline = time.time() + 10
        while time.time() < deadline:
            try:
                httpx.get(f"{self.endpoint}/health", timeout=1.0)
                return self
            except httpx.HTTPError:
                time.sleep(0.05)
        raise RuntimeError("shim did not come up")

    def __exit__(self, *exc):
        self.server.should_exit = True
        self.thread.join(timeout=5)


def micro_run(endpoint: str, model: str, image_root) -> None:
    """2-class, 20-image scoring run through the engine's embedding backend."""
    items = tuple(
        ManifestItem(f"img_{i:05d}", f"file://{image_root}/img_{i:05d}.jpg", i % 2)
        for i in range(20)
    )
    manifest = DatasetManifest(items=items)
    labels = LabelSet(("tabby cat", "golden retriever"))
    lib = ConceptLibrary(
        labels=labels,
        per_class=(
            (Concept(text="striped fur"), Concept(text="pointed ears"),
             Concept(text="long whiskers")),
            (Concept(text="golden coat"), Concept(text="floppy ears"),
             Concept(text="feathered tail")),
        ),
        version=0,
    )
    backend = EmbeddingServiceBackend(endpoint, model)
    matrix = score(backend, manifest, lib)  # raises ShapeError/ServiceError on breakage
    assert matrix.values.shape == (20, 6)
    assert np.all(np.isfinite(matrix.values))
    preds = evaluate(zero_shot_weights(lib), matrix)
    assert preds.argmax.shape == (20,)

    client = httpx.Client(timeout=10.0)
    for input_type, inputs in (
        ("text", ["a photo of a tabby cat. striped fur"]),
        ("image_id", ["img_00000", "img_00007"]),
    ):
        resp = client.post(
            f"{endpoint}/v1/embeddings",
            json={"model": model, "input": inputs, "input_type": input_type},
        )
        resp.raise_for_status()
        for item in resp.json()["data"]:
            assert abs(np.linalg.norm(item["embedding"]) - 1.0) < 1e-6


@pytest.fixture()
def image_root(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(20):
        (tmp_path / f"img_{i:05d}.jpg").write_bytes(rng.bytes(256))
    return tmp_path


def test_engine_micro_run_against_live_shim(image_root):
    with LiveShim("hashed", image_root) as shim:
        micro_run(shim.endpoint, "hashed", image_root)
    print("SECONDARY PASS: shim conformance (hashed backbone)")


def test_engine_micro_run_against_vit_b_32(image_root, monkeypatch):
    # Only consult the local cache; downloading weights is a manual step.
    monkeypatch.setenv("HF_HUB_OFFLINE", "1")
    monkeypatch.setenv("TRANSFORMERS_OFFLINE", "1")
    backbone = load_backbone("vit-b-32")
    if not backbone.ready:
        pytest.skip("ViT-B/32 weights unavailable; run manually with weights mounted")
    # Real images for the CLIP processor.
    from PIL import Image

    rng = np.random.default_rng(1)
    for i in range(20):
        arr = rng.integers(0, 255, size=(32, 32, 3), dtype=np.uint8)
        Image.fromarray(arr).save(image_root / f"img_{i:05d}.jpg")
    port = free_port()
    config = uvicorn.Config(
        create_app(backbone, image_root), host="127.0.0.1", port=port, log_level="error"
    )
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    try:
        deadline = time.time() + 10
        while time.time() < deadline:
            try:
                httpx.get(f"http://127.0.0.1:{port}/health", timeout=1.0)
                break
            except httpx.HTTPError:
                time.sleep(0.05)
        micro_run(f"http://127.0.0.1:{port}", "vit-b-32", image_root)
    finally:
        server.should_exit = True
        thread.join(timeout=5)
