"""HTTP wire protocol for model backends, served with FastAPI.

Endpoints:
  GET  /v1/info      -> model identity, shapes, capabilities
  POST /v1/encode    -> tokens + embedding matrix for a prompt
  POST /v1/generate  -> feature vector (optionally image bytes) for a request

Request errors come back as HTTP 400 with ``{"error": code, "detail": text}``
where code is one of BAD_DIMS, UNSUPPORTED_CONDITIONING, OVER_LENGTH,
INTERNAL.
"""

from __future__ import annotations

import base64
from typing import Optional

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from ..core import EmbeddingMatrix, GenerationRequest, TokenInfo
from .base import Backend, ProtocolError

__all__ = [
    "WireToken",
    "WireCapabilities",
    "InfoResponse",
    "EncodeBody",
    "EncodeResponse",
    "GenerateBody",
    "GenerateResponse",
    "create_app",
]


class WireToken(BaseModel):
    text: str
    id: int
    special: bool


class WireCapabilities(BaseModel):
    embedding_conditioning: bool
    prompt_conditioning: bool
    image_bytes: bool


class InfoResponse(BaseModel):
    model_id: str
    d: int
    d_v: int
    max_tokens: int
    feature_extractor_id: str
    capabilities: WireCapabilities


class EncodeBody(BaseModel):
    prompt: str


class EncodeResponse(BaseModel):
    tokens: list[WireToken]
    embedding: list[list[float]]


class GenerateBody(BaseModel):
    embedding: Optional[list[list[float]]] = None
    prompt: Optional[str] = None
    guidance: float = 7.5
    steps: int = 50
    noise_seed: int = 0
    want_image: bool = False


class GenerateResponse(BaseModel):
    feature: list[float]
    image_b64: Optional[str] = None


def _error_response(code: str, detail: str) -> JSONResponse:
    return JSONResponse(status_code=400, content={"error": code, "detail": detail})


def _embedding_from_wire(rows: list[list[float]]) -> EmbeddingMatrix:
    try:
        values = np.asarray(rows, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ProtocolError("BAD_DIMS", f"embedding is not rectangular: {exc}") from exc
    if values.ndim != 2 or values.size == 0:
        raise ProtocolError("BAD_DIMS", f"embedding must be n x d, got shape {values.shape}")
    # Wire embeddings carry no surface forms; rows get anonymous tokens.
    tokens = tuple(TokenInfo(text="", token_id=-1, special=False) for _ in range(values.shape[0]))
    try:
        return EmbeddingMatrix(values=values, tokens=tokens)
    except ValueError as exc:
        raise ProtocolError("BAD_DIMS", str(exc)) from exc


def create_app(backend: Backend) -> FastAPI:
    """Wrap any in-process backend in the wire protocol."""
    app = FastAPI(title="t2iaudit model backend", docs_url=None, redoc_url=None)

    @app.exception_handler(ProtocolError)
    def on_protocol_error(_req: Request, exc: ProtocolError):
        return _error_response(exc.code, exc.detail)

    @app.exception_handler(RequestValidationError)
    def on_validation_error(_req: Request, exc: RequestValidationError):
        return _error_response("INTERNAL", f"malformed request body: {exc.errors()}")

    @app.exception_handler(Exception)
    def on_unexpected(_req: Request, exc: Exception):
        return _error_response("INTERNAL", f"{type(exc).__name__}: {exc}")

    @app.get("/v1/info", response_model=InfoResponse)
    def info() -> InfoResponse:
        return InfoResponse(**backend.info().to_json_dict())

    @app.post("/v1/encode", response_model=EncodeResponse)
    def encode(body: EncodeBody) -> EncodeResponse:
        matrix = backend.encode(body.prompt)
        return EncodeResponse(
            tokens=[
                WireToken(text=t.text, id=t.token_id, special=t.special)
                for t in matrix.tokens
            ],
            embedding=[[float(v) for v in row] for row in matrix.values],
        )

    @app.post("/v1/generate", response_model=GenerateResponse)
    def generate(body: GenerateBody) -> GenerateResponse:
        if (body.embedding is None) == (body.prompt is None):
            raise ProtocolError(
                "UNSUPPORTED_CONDITIONING",
                "exactly one of embedding/prompt must be non-null",
            )
        caps = backend.info().capabilities
        if body.embedding is not None and not caps.embedding_conditioning:
            raise ProtocolError(
                "UNSUPPORTED_CONDITIONING", "backend does not accept embeddings"
            )
        if body.prompt is not None and not caps.prompt_conditioning:
            raise ProtocolError(
                "UNSUPPORTED_CONDITIONING", "backend does not accept prompts"
            )
        try:
            req = GenerationRequest(
                embedding=(
                    _embedding_from_wire(body.embedding)
                    if body.embedding is not None
                    else None
                ),
                prompt=body.prompt,
                guidance=body.guidance,
                steps=body.steps,
                noise_seed=body.noise_seed,
                want_image=body.want_image,
            )
        except ProtocolError:
            raise
        except ValueError as exc:
            raise ProtocolError("INTERNAL", str(exc)) from exc
        result = backend.generate(req)
        return GenerateResponse(
            feature=[float(v) for v in result.feature.values],
            image_b64=(
                base64.b64encode(result.image_bytes).decode("ascii")
                if result.image_bytes is not None
                else None
            ),
        )

    return app
