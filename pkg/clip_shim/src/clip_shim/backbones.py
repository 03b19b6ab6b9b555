"""Embedding backbones.

Every backbone returns L2-normalized float vectors, identical for identical
input. `hashed` is a deterministic stand-in used for wire tests and for
running the engine without model weights; the clip backbones load real
CLIP encoders through transformers when the weights are available.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

CLIP_VARIANTS = {
    "vit-b-32": "openai/clip-vit-base-patch32",
    "vit-b-16": "openai/clip-vit-base-patch16",
    "vit-l-14": "openai/clip-vit-large-patch14",
}


def _unit(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return matrix / norms


class HashedBackbone:
    """Seeded-gaussian embeddings keyed by content digest. No weights needed."""

    def __init__(self, dim: int = 512):
        self.name = "hashed"
        self.dim = dim
        self.ready = True

    def _vector(self, payload: bytes) -> np.ndarray:
        digest = hashlib.blake2b(payload, digest_size=8).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        return rng.standard_normal(self.dim)

    def embed_texts(self, texts: list[str]) -> np.ndarray:
        rows = [self._vector(b"text\x00" + " ".join(t.split()).lower().encode()) for t in texts]
        return _unit(np.stack(rows))

    def embed_image_files(self, paths: list[Path]) -> np.ndarray:
        rows = [self._vector(b"image\x00" + p.read_bytes()) for p in paths]
        return _unit(np.stack(rows))


class ClipBackbone:
    """Real CLIP text/image encoders via transformers. Loads weights once."""

    def __init__(self, variant: str):
        if variant not in CLIP_VARIANTS:
            raise ValueError(f"unknown clip variant {variant!r}")
        self.name = variant
        self.dim = 0
        self.ready = False
        self._model = None
        self._processor = None
        try:
            import torch  # noqa: F401
            from transformers import CLIPModel, CLIPProcessor

            self._model = CLIPModel.from_pretrained(CLIP_VARIANTS[variant])
            self._model.eval()
            self._processor = CLIPProcessor.from_pretrained(CLIP_VARIANTS[variant])
            self.dim = int(self._model.config.projection_dim)
            self.ready = True
        except Exception:  # weights or deps unavailable; /health reports not ready
            self.ready = False

    def embed_texts(self, texts: list[str]) -> np.ndarray:
        import torch

        inputs = self._processor(text=texts, return_tensors="pt", padding=True, truncation=True)
        with torch.no_grad():
            feats = self._model.get_text_features(**inputs)
        return _unit(feats.cpu().numpy().astype(np.float64))

    def embed_image_files(self, paths: list[Path]) -> np.ndarray:
        import torch
        from PIL import Image

        images = [Image.open(p).convert("RGB") for p in paths]
        inputs = self._processor(images=images, return_tensors="pt")
        with torch.no_grad():
            feats = self._model.get_image_features(**inputs)
        return _unit(feats.cpu().numpy().astype(np.float64))


def load_backbone(name: str, dim: int = 512):
    if name == "hashed":
        return HashedBackbone(dim=dim)
    return ClipBackbone(name)
