"""Client for backends served over the HTTP wire protocol."""

from __future__ import annotations

import base64
import threading
import time
from typing import Optional

import httpx
import numpy as np

from ..core import EmbeddingMatrix, GenerationRequest, ImageFeature, TokenInfo
from .base import (
    ERROR_CODES,
    Backend,
    BackendInfo,
    Capabilities,
    GenerationResult,
    ProtocolError,
    TransportError,
)

__all__ = ["RemoteBackend"]


class RemoteBackend(Backend):
    """Talks to a model server; enforces an in-flight cap and bounded retries.

    Retries cover transport failures only; protocol rejections are
    deterministic and surface immediately.
    """

    def __init__(
        self,
        base_url: str,
        timeout: float = 60.0,
        retries: int = 2,
        max_inflight: int = 8,
        retry_wait: float = 0.2,
    ):
        self.base_url = base_url.rstrip("/")
        self._retries = retries
        self._retry_wait = retry_wait
        self._gate = threading.BoundedSemaphore(max_inflight)
        self._client = httpx.Client(base_url=self.base_url, timeout=timeout)
        self._info_raw: Optional[dict] = None
        self._info_lock = threading.Lock()

    def close(self) -> None:
        self._client.close()

    def __enter__(self) -> "RemoteBackend":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- transport ----------------------------------------------------------

    def _request(self, method: str, path: str, payload: Optional[dict] = None) -> dict:
        last_exc: Optional[Exception] = None
        for attempt in range(self._retries + 1):
            if attempt:
                time.sleep(self._retry_wait)
            try:
                with self._gate:
                    response = self._client.request(method, path, json=payload)
            except httpx.HTTPError as exc:
                last_exc = exc
                continue
            if response.status_code == 200:
                return response.json()
            try:
                body = response.json()
            except ValueError:
                body = {}
            code, detail = body.get("error"), body.get("detail", response.text)
            if code in ERROR_CODES:
                raise ProtocolError(code, str(detail))
            raise TransportError(
                f"{self.base_url}{path}: unexpected HTTP {response.status_code}: "
                f"{response.text[:200]}"
            )
        raise TransportError(f"{self.base_url}{path}: {last_exc}") from last_exc

    # -- protocol surface ---------------------------------------------------

    def info_json_dict(self) -> dict:
        """The server's /v1/info document as sent, for manifest hashing."""
        with self._info_lock:
            if self._info_raw is None:
                self._info_raw = self._request("GET", "/v1/info")
            return self._info_raw

    def info(self) -> BackendInfo:
        raw = self.info_json_dict()
        caps = raw.get("capabilities", {})
        return BackendInfo(
            model_id=str(raw["model_id"]),
            d=int(raw["d"]),
            d_v=int(raw["d_v"]),
            max_tokens=int(raw["max_tokens"]),
            feature_extractor_id=str(raw["feature_extractor_id"]),
            capabilities=Capabilities(
                embedding_conditioning=bool(caps.get("embedding_conditioning", False)),
                prompt_conditioning=bool(caps.get("prompt_conditioning", False)),
                image_bytes=bool(caps.get("image_bytes", False)),
            ),
        )

    def encode(self, prompt: str) -> EmbeddingMatrix:
        data = self._request("POST", "/v1/encode", {"prompt": prompt})
        tokens = tuple(
            TokenInfo(text=t["text"], token_id=int(t["id"]), special=bool(t["special"]))
            for t in data["tokens"]
        )
        values = np.asarray(data["embedding"], dtype=np.float64)
        return EmbeddingMatrix(values=values, tokens=tokens)

    def generate(self, req: GenerationRequest) -> GenerationResult:
        payload = {
            "embedding": (
                [[float(v) for v in row] for row in req.embedding.values]
                if req.embedding is not None
                else None
            ),
            "prompt": req.prompt,
            "guidance": req.guidance,
            "steps": req.steps,
            "noise_seed": req.noise_seed,
            "want_image": req.want_image,
        }
        data = self._request("POST", "/v1/generate", payload)
        feature = ImageFeature(
            values=np.asarray(data["feature"], dtype=np.float64),
            source_seed=req.noise_seed,
        )
        image = data.get("image_b64")
        return GenerationResult(
            feature=feature,
            image_bytes=base64.b64decode(image) if image is not None else None,
        )
