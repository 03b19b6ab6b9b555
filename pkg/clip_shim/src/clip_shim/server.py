"""The embeddings service.

POST /v1/embeddings accepts {"model", "input": [...], "input_type"} where
input_type is "text" (default) or "image_id"; image ids resolve against a
mounted image root rather than being uploaded inline, which keeps the wire
identical to text embeddings. GET /health reports backbone metadata.

Errors: 404 unknown image id, 413 batch too large, 503 model not ready.
"""

from __future__ import annotations

import argparse
from pathlib import Path

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .backbones import load_backbone

MAX_BATCH = 256
IMAGE_SUFFIXES = ("", ".jpg", ".jpeg", ".png", ".bin")


class EmbeddingRequest(BaseModel):
    model: str
    input: list[str] = Field(min_length=1)
    input_type: str = "text"


def resolve_image(root: Path, image_id: str) -> Path:
    if "/" in image_id or "\\" in image_id or ".." in image_id:
        raise HTTPException(status_code=404, detail=f"unknown image id {image_id!r}")
    for suffix in IMAGE_SUFFIXES:
        candidate = root / f"{image_id}{suffix}"
        if candidate.is_file():
            return candidate
    raise HTTPException(status_code=404, detail=f"unknown image id {image_id!r}")


def create_app(backbone, image_root: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="clip-shim")
    root = Path(image_root) if image_root else None

    @app.get("/health")
    def health():
        return {
            "status": "ok" if backbone.ready else "loading",
            "model": backbone.name,
            "dim": backbone.dim,
            "ready": backbone.ready,
        }

    @app.post("/v1/embeddings")
    def embeddings(req: EmbeddingRequest):
        if not backbone.ready:
            raise HTTPException(status_code=503, detail="model not ready")
        if req.model != backbone.name:
            raise HTTPException(
                status_code=503, detail=f"model {req.model!r} not served (have {backbone.name!r})"
            )
        if len(req.input) > MAX_BATCH:
            raise HTTPException(
                status_code=413, detail=f"batch of {len(req.input)} exceeds limit {MAX_BATCH}"
            )
        if req.input_type == "image_id":
            if root is None:
                raise HTTPException(status_code=503, detail="no image root mounted")
            paths = [resolve_image(root, image_id) for image_id in req.input]
            vectors = backbone.embed_image_files(paths)
        elif req.input_type == "text":
            vectors = backbone.embed_texts(req.input)
        else:
            raise HTTPException(
                status_code=422, detail=f"input_type must be 'text' or 'image_id'"
            )
        data = [
            {"embedding": row.tolist(), "index": i} for i, row in enumerate(vectors)
        ]
        return {"data": data, "model": backbone.name}

    return app


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description="Serve text/image embeddings.")
    parser.add_argument("--backbone", default="vit-b-32",
                        help="hashed, vit-b-32, vit-b-16, or vit-l-14")
    parser.add_argument("--image-root", default="", help="directory image ids resolve against")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8000)
    parser.add_argument("--dim", type=int, default=512, help="dimension for the hashed backbone")
    args = parser.parse_args(argv)

    import uvicorn

    app = create_app(load_backbone(args.backbone, dim=args.dim), args.image_root or None)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
