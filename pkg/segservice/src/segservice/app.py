"""FastAPI application implementing the promptable-segmentation protocol.

Body schemas are documented in PROTOCOL.md at the package root; the
registration pipeline's client (`surfreg.segclient`) speaks the same
protocol. Handlers are stateless, so the app is safe under any request
concurrency and identical requests get byte-identical responses.
"""

from __future__ import annotations

import base64
import binascii
import io

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from PIL import Image
from pydantic import BaseModel, Field

from .backends import Backend, get_backend

MAX_SIDE = 4096


class Prompt(BaseModel):
    x: int
    y: int
    positive: bool


class SegmentRequest(BaseModel):
    image: str = Field(description="base64 PNG, 8-bit RGB")
    prompts: list[Prompt]


class SegmentResponse(BaseModel):
    mask: str = Field(description="base64 PNG, 8-bit gray, values 0/255")
    confidence: float


class RequestError(Exception):
    def __init__(self, status: int, field: str, message: str):
        self.status = status
        self.field = field
        self.message = message


def _decode_image(b64: str) -> np.ndarray:
    try:
        raw = base64.b64decode(b64, validate=True)
        img = Image.open(io.BytesIO(raw))
        img.load()
    except (binascii.Error, OSError, ValueError) as e:
        raise RequestError(400, "image", f"image is not base64-encoded PNG data: {e}") from e
    if img.width > MAX_SIDE or img.height > MAX_SIDE:
        raise RequestError(413, "image", f"image {img.width}x{img.height} exceeds {MAX_SIDE}x{MAX_SIDE}")
    arr = np.asarray(img.convert("RGB"))
    return arr


def _check_prompts(prompts: list[Prompt], shape) -> list[dict]:
    if not any(p.positive for p in prompts):
        raise RequestError(400, "prompts", "at least one positive prompt is required")
    h, w = shape[:2]
    for p in prompts:
        if not (0 <= p.x < w and 0 <= p.y < h):
            raise RequestError(400, "prompts", f"prompt ({p.x}, {p.y}) outside image {w}x{h}")
    return [p.model_dump() for p in prompts]


def _encode_mask(mask: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def create_app(backend: Backend | None = None) -> FastAPI:
    from . import __version__

    backend = backend if backend is not None else get_backend("region-growing")
    app = FastAPI(title="segservice", version=__version__)

    @app.exception_handler(RequestError)
    async def request_error(_request: Request, exc: RequestError):
        return JSONResponse(status_code=exc.status,
                            content={"detail": exc.message, "field": exc.field})

    @app.exception_handler(RequestValidationError)
    async def validation_error(_request: Request, exc: RequestValidationError):
        errs = exc.errors()
        field = str(errs[0]["loc"][-1] if errs and errs[0]["loc"] else "body")
        return JSONResponse(status_code=400,
                            content={"detail": f"malformed request body: {errs[0]['msg'] if errs else 'invalid'}",
                                     "field": field})

    @app.get("/health")
    async def health():
        return {"status": "ok", "backend": backend.name, "version": __version__}

    @app.post("/segment", response_model=SegmentResponse)
    async def segment(req: SegmentRequest):
        image = _decode_image(req.image)
        prompts = _check_prompts(req.prompts, image.shape)
        mask, confidence = backend.segment(image, prompts)
        return SegmentResponse(mask=_encode_mask(mask), confidence=float(confidence))

    return app
