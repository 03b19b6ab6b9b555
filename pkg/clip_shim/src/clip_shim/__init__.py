"""Embeddings microservice speaking the standard /v1/embeddings protocol."""

from .backbones import ClipBackbone, HashedBackbone, load_backbone
from .server import create_app

__version__ = "0.1.0"

__all__ = ["ClipBackbone", "HashedBackbone", "create_app", "load_backbone"]
