"""Deterministic in-process model backend for offline verification.

The synthetic model maps a prompt embedding to a feature vector through a
fixed seeded projection with a bounded nonlinearity, plus seeded noise whose
amplitude shrinks with the guidance factor. An optional bias block emulates
an intentionally-biased checkpoint: whenever a conditioning row lies inside a
snap region around the trigger token's embedding, the output is pulled onto a
fixed target feature, with the pull decaying steeply with distance from the
trigger. Unperturbed triggered inputs therefore collapse onto the target,
while even a one-step perturbation of the trigger row visibly releases the
output, which is exactly the brittleness the sweeps are built to catch.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..core import (
    EmbeddingMatrix,
    GenerationRequest,
    ImageFeature,
    TokenInfo,
    derive_seed,
    key64,
)
from .base import Backend, BackendInfo, Capabilities, GenerationResult, ProtocolError

__all__ = ["BiasSpec", "SyntheticModelSpec", "SyntheticBackend"]

_BOS = "<s>"
_EOS = "</s>"


@dataclass(frozen=True)
class BiasSpec:
    """Intentional-bias block: trigger token, target feature, snap geometry.

    ``snap_radius`` is relative to the trigger embedding norm. Within the
    radius the pull toward the target decays as exp(-distance/sharpness), so
    the unperturbed trigger sits fully snapped while small perturbations
    already rotate the output far off the target.
    """

    trigger_token: str
    snap_radius: float
    snap_sharpness: float
    target_feature: Optional[tuple[float, ...]] = None

    def __post_init__(self) -> None:
        if self.snap_radius <= 0:
            raise ValueError("snap_radius must be > 0")
        if self.snap_sharpness <= 0:
            raise ValueError("snap_sharpness must be > 0")


@dataclass(frozen=True)
class SyntheticModelSpec:
    """Full description of a synthetic model; serializable to a JSON file.

    ``smoothness`` is the top response frequency of the feature map (higher
    means embedding changes rotate the output faster), and ``gain_spread``
    controls how unevenly that frequency is distributed across prompts, so a
    corpus shows a genuine range of perturbation sensitivities.
    """

    model_id: str
    d: int
    d_v: int
    vocab: tuple[str, ...]
    seed: int = 0
    max_tokens: int = 77
    smoothness: float = 18.0
    gain_spread: float = 2.0
    token_scale_sigma: float = 0.1
    noise_scale: float = 1.5
    concept_noise: dict = field(default_factory=dict)
    bias: Optional[BiasSpec] = None

    def __post_init__(self) -> None:
        if self.d < 1 or self.d_v < 1:
            raise ValueError("d and d_v must be >= 1")
        if self.smoothness <= 0:
            raise ValueError("smoothness must be > 0")
        if self.gain_spread < 0:
            raise ValueError("gain_spread must be >= 0")
        if self.token_scale_sigma < 0:
            raise ValueError("token_scale_sigma must be >= 0")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        if not self.vocab:
            raise ValueError("vocab must be non-empty")
        for concept, mult in self.concept_noise.items():
            if mult <= 0:
                raise ValueError(f"concept_noise[{concept!r}] must be > 0")
        if self.bias is not None and self.bias.trigger_token not in self.vocab:
            raise ValueError(f"trigger token {self.bias.trigger_token!r} not in vocab")

    def to_json_dict(self) -> dict:
        out = {
            "model_id": self.model_id,
            "d": self.d,
            "d_v": self.d_v,
            "vocab": list(self.vocab),
            "seed": self.seed,
            "max_tokens": self.max_tokens,
            "smoothness": self.smoothness,
            "gain_spread": self.gain_spread,
            "token_scale_sigma": self.token_scale_sigma,
            "noise_scale": self.noise_scale,
            "concept_noise": dict(self.concept_noise),
        }
        if self.bias is not None:
            out["bias"] = {
                "trigger_token": self.bias.trigger_token,
                "snap_radius": self.bias.snap_radius,
                "snap_sharpness": self.bias.snap_sharpness,
                "target_feature": (
                    list(self.bias.target_feature)
                    if self.bias.target_feature is not None
                    else None
                ),
            }
        return out

    @classmethod
    def from_json_dict(cls, data: dict) -> "SyntheticModelSpec":
        data = dict(data)
        bias_data = data.pop("bias", None)
        bias = None
        if bias_data is not None:
            target = bias_data.get("target_feature")
            bias = BiasSpec(
                trigger_token=bias_data["trigger_token"],
                snap_radius=float(bias_data["snap_radius"]),
                snap_sharpness=float(bias_data["snap_sharpness"]),
                target_feature=tuple(target) if target is not None else None,
            )
        data["vocab"] = tuple(data.get("vocab", ()))
        data["concept_noise"] = dict(data.get("concept_noise", {}))
        return cls(bias=bias, **data)

    @classmethod
    def from_file(cls, path: str | Path) -> "SyntheticModelSpec":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, ensure_ascii=False)
            fh.write("\n")


class SyntheticBackend(Backend):
    """Stateless-after-construction backend implementing the synthetic model."""

    def __init__(self, spec: SyntheticModelSpec):
        self.spec = spec
        rng = np.random.default_rng(derive_seed(spec.seed, [("projection", 0)]))
        self._projection = rng.standard_normal((spec.d_v, spec.d))
        axis = np.random.default_rng(derive_seed(spec.seed, [("gain-axis", 0)]))
        gain_axis = axis.standard_normal(spec.d)
        self._gain_axis = gain_axis / np.linalg.norm(gain_axis)
        self._vocab_ids = {tok: i + 2 for i, tok in enumerate(spec.vocab)}
        if spec.bias is not None:
            trig = self._token_embedding(spec.bias.trigger_token)
            self._trigger_row = trig
            self._trigger_norm = float(np.linalg.norm(trig))
            if spec.bias.target_feature is not None:
                target = np.asarray(spec.bias.target_feature, dtype=np.float64)
                if target.shape != (spec.d_v,):
                    raise ValueError("target_feature length must equal d_v")
            else:
                trng = np.random.default_rng(derive_seed(spec.seed, [("bias-target", 0)]))
                target = trng.standard_normal(spec.d_v)
            self._target_unit = target / np.linalg.norm(target)
        else:
            self._trigger_row = None
            self._trigger_norm = 0.0
            self._target_unit = None

    # -- protocol surface ---------------------------------------------------

    def info(self) -> BackendInfo:
        return BackendInfo(
            model_id=self.spec.model_id,
            d=self.spec.d,
            d_v=self.spec.d_v,
            max_tokens=self.spec.max_tokens,
            feature_extractor_id="synthetic-projection/v1",
            capabilities=Capabilities(
                embedding_conditioning=True,
                prompt_conditioning=True,
                image_bytes=True,
            ),
        )

    def encode(self, prompt: str) -> EmbeddingMatrix:
        words = self._tokenize(prompt)
        n = len(words) + 2
        if n > self.spec.max_tokens:
            raise ProtocolError(
                "OVER_LENGTH", f"{n} tokens exceeds max_tokens={self.spec.max_tokens}"
            )
        tokens = [TokenInfo(_BOS, 0, special=True)]
        rows = [self._special_embedding(0)]
        for w in words:
            tokens.append(TokenInfo(w, self._token_id(w), special=False))
            rows.append(self._token_embedding(w))
        tokens.append(TokenInfo(_EOS, 1, special=True))
        rows.append(self._special_embedding(1))
        return EmbeddingMatrix(values=np.stack(rows), tokens=tuple(tokens))

    def generate(self, req: GenerationRequest) -> GenerationResult:
        if req.prompt is not None:
            x = self.encode(req.prompt)
            words = self._tokenize(req.prompt)
            prompt_text = " ".join(words)
        else:
            x = req.embedding
            words = None
            prompt_text = None
        if x.dims != self.spec.d:
            raise ProtocolError(
                "BAD_DIMS", f"embedding width {x.dims} does not match d={self.spec.d}"
            )
        feature = self._feature(x, words, prompt_text, req.guidance, req.noise_seed)
        image = self._render(feature) if req.want_image else None
        return GenerationResult(
            feature=ImageFeature(values=feature, source_seed=req.noise_seed),
            image_bytes=image,
        )

    # -- model internals ----------------------------------------------------

    def _tokenize(self, prompt: str) -> list[str]:
        words = prompt.split()
        if not words:
            raise ProtocolError("INTERNAL", "prompt is empty")
        return words

    def _token_id(self, word: str) -> int:
        known = self._vocab_ids.get(word)
        if known is not None:
            return known
        # Out-of-vocabulary words still get stable ids and embeddings.
        return 2 + len(self.spec.vocab) + key64(word) % (1 << 20)

    def _token_embedding(self, word: str) -> np.ndarray:
        rng = np.random.default_rng(derive_seed(self.spec.seed, [("embed", key64(word))]))
        row = rng.standard_normal(self.spec.d)
        # Per-word spread variation keeps recorded magnitudes off a quantized
        # step grid, like real encoders whose rows differ in scale.
        scale = math.exp(self.spec.token_scale_sigma * rng.standard_normal())
        return scale * row

    def _special_embedding(self, which: int) -> np.ndarray:
        rng = np.random.default_rng(derive_seed(self.spec.seed, [("special", which)]))
        return rng.standard_normal(self.spec.d)

    def _base_direction(self, x: EmbeddingMatrix) -> np.ndarray:
        pooled = x.values.mean(axis=0)
        norm = float(np.linalg.norm(pooled))
        if norm <= 1e-12:
            pooled = np.ones(self.spec.d)
            norm = float(np.linalg.norm(pooled))
        p_hat = pooled / norm
        # Response frequency varies smoothly over pooled space so prompts
        # differ in how fast perturbations rotate their output.
        t = math.sqrt(self.spec.d) * float(self._gain_axis @ p_hat)
        gate = 1.0 / (1.0 + math.exp(-self.spec.gain_spread * t))
        omega = self.spec.smoothness * (0.1 + 0.9 * gate)
        raw = np.sin(omega * (self._projection @ p_hat))
        return raw / np.linalg.norm(raw)

    def _noise_unit(self, noise_seed: int) -> np.ndarray:
        rng = np.random.default_rng(noise_seed)
        v = rng.standard_normal(self.spec.d_v)
        return v / np.linalg.norm(v)

    def _snap_weight(self, x: EmbeddingMatrix, words: Optional[list[str]]) -> float:
        """Pull strength toward the bias target, 0 when no row is near the trigger."""
        if self.spec.bias is None:
            return 0.0
        if words is not None and self.spec.bias.trigger_token in words:
            return 1.0
        diffs = x.values - self._trigger_row[None, :]
        dist = float(np.min(np.linalg.norm(diffs, axis=1))) / self._trigger_norm
        if dist > self.spec.bias.snap_radius:
            return 0.0
        return math.exp(-dist / self.spec.bias.snap_sharpness)

    def _feature(
        self,
        x: EmbeddingMatrix,
        words: Optional[list[str]],
        prompt_text: Optional[str],
        guidance: float,
        noise_seed: int,
    ) -> np.ndarray:
        base = self._base_direction(x)
        amp = self.spec.noise_scale / (1.0 + guidance)
        if prompt_text is not None:
            amp *= float(self.spec.concept_noise.get(prompt_text, 1.0))
        noise = self._noise_unit(noise_seed)
        w = self._snap_weight(x, words)
        if w > 0.0:
            direction = w * self._target_unit + (1.0 - w) * base
            noise_mult = 0.1 * w + (1.0 - w)
        else:
            direction = base
            noise_mult = 1.0
        out = direction / np.linalg.norm(direction) + amp * noise_mult * noise
        return out / np.linalg.norm(out)

    def _render(self, feature: np.ndarray) -> bytes:
        """Tiny deterministic PNG derived from the feature, for report panels."""
        from PIL import Image

        side = 16
        tiled = np.resize(feature, side * side)
        lo, hi = float(tiled.min()), float(tiled.max())
        span = (hi - lo) or 1.0
        pixels = ((tiled - lo) / span * 255.0).astype(np.uint8).reshape(side, side)
        buf = io.BytesIO()
        Image.fromarray(pixels, mode="L").save(buf, format="PNG")
        return buf.getvalue()
