"""HTTP service exposing feature extraction and iris stylization.

Run with ``uvicorn irisstyle.service:app``. Images and masks travel as
base64-encoded PNGs.
"""

from __future__ import annotations

import base64
import io
from typing import Optional

import numpy as np
from fastapi import FastAPI, HTTPException
from PIL import Image
from pydantic import BaseModel, Field

from .backbone import Backbone, load_backbone
from .features import CNN_KIND, STYLE_KIND, extract_features
from .imaging import DEFAULT_GLINT_THRESHOLD, IrisRegionError, extract_iris, reinsert
from .transfer import TransferConfig, transfer


class FeatureRequest(BaseModel):
    image_png: str = Field(description="base64 8-bit grayscale PNG")
    mask_png: str = Field(description="base64 PNG label map with values 0..3")
    kinds: list[str] = [STYLE_KIND]
    glint_threshold: int = DEFAULT_GLINT_THRESHOLD


class FeatureResponse(BaseModel):
    features: dict[str, list[float]]


class StylizeRequest(BaseModel):
    content_png: str
    content_mask_png: str
    style_png: str
    style_mask_png: str
    alpha: float = 1.0
    beta: float = 1.0
    epochs: int = Field(200, ge=1)
    input_size: Optional[int] = None
    seed: int = 42
    glint_threshold: int = DEFAULT_GLINT_THRESHOLD


class StylizeResponse(BaseModel):
    image_png: str
    initial_loss: float
    final_loss: float


class Health(BaseModel):
    status: str
    backbone_checksum: str


def decode_png(data: str) -> np.ndarray:
    try:
        return np.asarray(Image.open(io.BytesIO(base64.b64decode(data))), dtype=np.uint8)
    except Exception as exc:
        raise HTTPException(status_code=400, detail=f"cannot decode PNG: {exc}") from exc


def encode_png(pixels: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def create_app(backbone: Optional[Backbone] = None) -> FastAPI:
    app = FastAPI(title="irisstyle")
    state: dict = {"backbone": backbone}

    def handle() -> Backbone:
        if state["backbone"] is None:
            state["backbone"] = load_backbone()
        return state["backbone"]

    @app.get("/health", response_model=Health)
    def health():
        return Health(status="ok", backbone_checksum=handle().checksum)

    @app.post("/features", response_model=FeatureResponse)
    def features(req: FeatureRequest):
        unknown = set(req.kinds) - {STYLE_KIND, CNN_KIND}
        if unknown:
            raise HTTPException(status_code=422, detail=f"unknown feature kinds: {sorted(unknown)}")
        try:
            crop = extract_iris(decode_png(req.image_png), decode_png(req.mask_png), req.glint_threshold)
        except (IrisRegionError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        feats = extract_features(handle(), crop, req.kinds)
        return FeatureResponse(features={k: v.tolist() for k, v in feats.items()})

    @app.post("/stylize", response_model=StylizeResponse)
    def stylize(req: StylizeRequest):
        content, content_mask = decode_png(req.content_png), decode_png(req.content_mask_png)
        try:
            c = extract_iris(content, content_mask, req.glint_threshold)
            s = extract_iris(decode_png(req.style_png), decode_png(req.style_mask_png), req.glint_threshold)
            cfg = TransferConfig(alpha=req.alpha, beta=req.beta, epochs=req.epochs,
                                 input_size=req.input_size, seed=req.seed)
        except (IrisRegionError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        result = transfer(handle(), c, s, cfg)
        out = reinsert(content, result.stylized, content_mask)
        return StylizeResponse(image_png=encode_png(out), initial_loss=result.initial_loss[0],
                               final_loss=result.final_loss[0])

    return app


app = create_app()
