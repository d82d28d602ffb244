"""HTTP client for an external promptable-segmentation service.

Wire protocol: JSON bodies; rasters travel as base64-encoded PNG.
POST /segment  {"image": <b64 RGB png>, "prompts": [{"x", "y", "positive"}]}
           ->  {"mask": <b64 8-bit gray png, values 0/255>, "confidence": float}
GET /health    -> {"status": "ok", "backend": ..., "version": ...}
"""
from __future__ import annotations

import base64
import io
import json
import urllib.error
import urllib.request

import numpy as np
from PIL import Image

from .errors import RecordingIOError


class SegmentationServiceError(RecordingIOError):
    """The segmentation service was unreachable or answered malformed."""


def encode_image_png(arr: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_mask_png(b64: str, shape) -> np.ndarray:
    raw = base64.b64decode(b64)
    img = np.asarray(Image.open(io.BytesIO(raw)))
    if img.shape != tuple(shape):
        raise SegmentationServiceError(
            f"service mask shape {img.shape} does not match image shape {tuple(shape)}"
        )
    return img >= 128


def _prompt_json(p) -> dict:
    """Accepts ((u, v), positive) or (u, v, positive)."""
    if len(p) == 2:
        (u, v), pos = p
    else:
        u, v, pos = p
    return {"x": int(u), "y": int(v), "positive": bool(pos)}


class ServiceSegmenter:
    """Promptable segmenter backed by an HTTP service."""

    def __init__(self, base_url: str, timeout: float = 10.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def _request(self, path: str, payload=None):
        url = self.base_url + path
        data = None
        headers = {}
        if payload is not None:
            data = json.dumps(payload).encode()
            headers["Content-Type"] = "application/json"
        req = urllib.request.Request(url, data=data, headers=headers)
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return json.loads(resp.read().decode())
        except urllib.error.HTTPError as e:
            raise SegmentationServiceError(
                f"segmentation service {url} returned HTTP {e.code}: {e.read().decode(errors='replace')[:200]}"
            ) from e
        except (urllib.error.URLError, OSError, json.JSONDecodeError) as e:
            raise SegmentationServiceError(f"segmentation service {url} failed: {e}") from e

    def health(self) -> dict:
        return self._request("/health")

    def segment(self, image: np.ndarray, prompts):
        payload = {
            "image": encode_image_png(np.asarray(image, dtype=np.uint8)),
            "prompts": [_prompt_json(p) for p in prompts],
        }
        resp = self._request("/segment", payload)
        if "mask" not in resp or "confidence" not in resp:
            raise SegmentationServiceError("service response missing 'mask' or 'confidence'")
        mask = decode_mask_png(resp["mask"], image.shape[:2])
        return mask, float(resp["confidence"])
