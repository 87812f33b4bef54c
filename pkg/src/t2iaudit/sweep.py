"""Reliability sweep cascade: global prompt sweeps, then per-token local sweeps.

A sweep walks the perturbation magnitude ladder for one prompt, generating
n_ptb perturbed images per step against a fixed reference image (same noise
seed throughout the prompt), and records the magnitude at which the reduced
cosine similarity first drops below the threshold. Prompts that cross on the
very first step are treated as unreliable and handed to the local phase,
which repeats the sweep one token row at a time.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .backend.base import Backend, BackendError, BackendInfo, ProtocolError
from .core import (
    AuditConfig,
    EmbeddingMatrix,
    GenerationRequest,
    ImageFeature,
    Prompt,
    SensitivityRecord,
    derive_seed,
    key64,
)
from .metrics import cosine, estimate_distribution
from .perturb import (
    DegenerateEmbeddingError,
    PerturbationSpec,
    apply,
    sigma_global,
    sigma_local,
)

__all__ = [
    "SweepPlan",
    "LocalSweepOutcome",
    "SensitiveToken",
    "CascadeResult",
    "prompt_noise_seed",
    "sweep_prompt_global",
    "sweep_prompt_local",
    "run_cascade",
    "records_to_jsonl",
]

_GLOBAL_SCOPE = 0
_LOCAL_SCOPE = 1


@dataclass(frozen=True)
class SweepPlan:
    """One phase of the cascade over a corpus."""

    corpus_id: str
    backend_id: str
    phase: str
    local_prompt_ids: Optional[tuple[str, ...]] = None

    def __post_init__(self) -> None:
        if self.phase not in ("global", "local"):
            raise ValueError("phase must be 'global' or 'local'")
        if self.phase == "local" and not self.local_prompt_ids:
            raise ValueError("local phase requires a non-empty prompt id list")


@dataclass(frozen=True)
class LocalSweepOutcome:
    """Per-token records for one prompt plus rows that could not be swept."""

    prompt_id: str
    records: tuple[SensitivityRecord, ...]
    degenerate_rows: tuple[int, ...] = ()
    no_sweepable_tokens: bool = False


@dataclass(frozen=True)
class SensitiveToken:
    prompt_id: str
    token_index: int
    token: str


@dataclass(frozen=True)
class CascadeResult:
    corpus_id: str
    backend_info: BackendInfo
    config: AuditConfig
    prompt_texts: dict
    global_records: tuple[SensitivityRecord, ...]
    global_failed: dict
    global_degenerate: tuple[str, ...]
    global_distribution: Optional[object]
    global_distribution_status: str
    unreliable_prompts: tuple[str, ...]
    local_records: tuple[SensitivityRecord, ...]
    local_failed: dict
    local_degenerate: tuple[tuple[str, int], ...]
    local_distribution: Optional[object]
    local_distribution_status: str
    sensitive_tokens: tuple[SensitiveToken, ...]
    local_all: bool
    plans: tuple[SweepPlan, ...]

    @property
    def records(self) -> tuple[SensitivityRecord, ...]:
        return self.global_records + self.local_records


def prompt_noise_seed(config: AuditConfig, prompt_id: str) -> int:
    """The single noise seed shared by the reference and every perturbed image."""
    return derive_seed(config.base_seed, [("prompt", key64(prompt_id)), ("noise", 0)])


def _perturbation_seed(
    config: AuditConfig, prompt_id: str, scope: int, token_index: int, step: int, sample: int
) -> int:
    return derive_seed(
        config.base_seed,
        [
            ("prompt", key64(prompt_id)),
            ("scope", scope),
            ("token", token_index),
            ("step", step),
            ("sample", sample),
        ],
    )


def _reduce(cosines: Sequence[float], rule: str) -> float:
    if rule == "mean":
        return float(sum(cosines) / len(cosines))
    if rule == "min":
        return float(min(cosines))
    return float(max(cosines))


def _call_with_retry(fn: Callable, retries: int):
    attempt = 0
    while True:
        try:
            return fn()
        except ProtocolError:
            raise
        except BackendError:
            if attempt >= retries:
                raise
            attempt += 1


def _sweep_one_scope(
    prompt: Prompt,
    config: AuditConfig,
    backend: Backend,
    x: EmbeddingMatrix,
    reference: ImageFeature,
    token_index: Optional[int],
    retries: int,
) -> SensitivityRecord:
    sigma = sigma_global(x) if token_index is None else sigma_local(x, token_index)
    if sigma == 0.0:
        raise DegenerateEmbeddingError(
            f"prompt {prompt.prompt_id}: zero sigma for "
            + ("matrix" if token_index is None else f"row {token_index}")
        )
    noise_seed = prompt_noise_seed(config, prompt.prompt_id)
    scope = _GLOBAL_SCOPE if token_index is None else _LOCAL_SCOPE
    token_text = None if token_index is None else x.tokens[token_index].text
    similarity = 1.0
    for step in range(1, config.max_steps + 1):
        cosines = []
        for sample in range(config.n_ptb):
            seed = _perturbation_seed(
                config, prompt.prompt_id, scope, token_index or 0, step, sample
            )
            perturbed = apply(
                x,
                PerturbationSpec(
                    token_index=token_index,
                    step_index=step,
                    delta_p=config.delta_p,
                    seed=seed,
                ),
            )
            result = _call_with_retry(
                lambda: backend.generate(
                    GenerationRequest(
                        embedding=perturbed,
                        guidance=config.guidance_main,
                        steps=config.steps_T,
                        noise_seed=noise_seed,
                    )
                ),
                retries,
            )
            cosines.append(cosine(result.feature, reference))
        similarity = _reduce(cosines, config.crossing_rule)
        if similarity < config.tau:
            return SensitivityRecord(
                prompt_id=prompt.prompt_id,
                token_index=token_index,
                token=token_text,
                phi=step * config.delta_p * sigma,
                step_index=step,
                censored=False,
                similarity_at_cross=similarity,
            )
    return SensitivityRecord(
        prompt_id=prompt.prompt_id,
        token_index=token_index,
        token=token_text,
        phi=config.max_steps * config.delta_p * sigma,
        step_index=config.max_steps,
        censored=True,
        similarity_at_cross=similarity,
    )


def _encode_and_reference(
    prompt: Prompt, config: AuditConfig, backend: Backend, retries: int
) -> tuple[EmbeddingMatrix, ImageFeature]:
    x = _call_with_retry(lambda: backend.encode(prompt.text), retries)
    noise_seed = prompt_noise_seed(config, prompt.prompt_id)
    ref = _call_with_retry(
        lambda: backend.generate(
            GenerationRequest(
                embedding=x,
                guidance=config.guidance_main,
                steps=config.steps_T,
                noise_seed=noise_seed,
            )
        ),
        retries,
    )
    return x, ref.feature


def sweep_prompt_global(
    prompt: Prompt, config: AuditConfig, backend: Backend, retries: int = 2
) -> SensitivityRecord:
    """Whole-matrix sweep of one prompt against its own reference image."""
    x, reference = _encode_and_reference(prompt, config, backend, retries)
    return _sweep_one_scope(prompt, config, backend, x, reference, None, retries)


def sweep_prompt_local(
    prompt: Prompt, config: AuditConfig, backend: Backend, retries: int = 2
) -> LocalSweepOutcome:
    """Per-token sweeps over every non-special row of one prompt."""
    x, reference = _encode_and_reference(prompt, config, backend, retries)
    indices = x.non_special_indices()
    if not indices:
        return LocalSweepOutcome(
            prompt_id=prompt.prompt_id, records=(), no_sweepable_tokens=True
        )
    records = []
    degenerate = []
    for i in indices:
        try:
            records.append(
                _sweep_one_scope(prompt, config, backend, x, reference, i, retries)
            )
        except DegenerateEmbeddingError:
            degenerate.append(i)
    return LocalSweepOutcome(
        prompt_id=prompt.prompt_id,
        records=tuple(records),
        degenerate_rows=tuple(degenerate),
    )


def _distribution(records: Sequence[SensitivityRecord]):
    samples = sorted(r.phi for r in records if not r.censored)
    censored = sum(1 for r in records if r.censored)
    if len(samples) >= 2:
        return estimate_distribution(samples, censored_count=censored), "ok"
    if records and censored == len(records):
        return None, "all-censored"
    return None, "insufficient-samples"


def run_cascade(
    corpus,
    config: AuditConfig,
    backend: Backend,
    parallel: int = 4,
    local_all: bool = False,
    retries: int = 2,
) -> CascadeResult:
    """Run the full global-then-local cascade over a prompt corpus.

    Results are aggregated in sorted (prompt_id, token_index) order, so the
    outcome is byte-identical for any worker count. Every prompt ends up
    completed, failed or degenerate; nothing is silently dropped.
    """
    prompts = list(corpus.prompts)
    if not prompts:
        raise ValueError("corpus is empty")
    if parallel < 1:
        raise ValueError("parallel must be >= 1")
    info = backend.info()
    if not info.capabilities.embedding_conditioning:
        raise ValueError(
            f"backend {info.model_id!r} does not accept embedding conditioning"
        )

    global_records: dict[str, SensitivityRecord] = {}
    global_failed: dict[str, str] = {}
    global_degenerate: list[str] = []

    def run_global(p: Prompt):
        return sweep_prompt_global(p, config, backend, retries)

    with ThreadPoolExecutor(max_workers=parallel) as pool:
        futures = {p.prompt_id: pool.submit(run_global, p) for p in prompts}
        for p in prompts:
            try:
                global_records[p.prompt_id] = futures[p.prompt_id].result()
            except DegenerateEmbeddingError:
                global_degenerate.append(p.prompt_id)
            except BackendError as exc:
                global_failed[p.prompt_id] = str(exc)

    ordered_global = tuple(global_records[pid] for pid in sorted(global_records))
    global_dist, global_status = _distribution(ordered_global)
    unreliable = tuple(
        r.prompt_id for r in ordered_global if r.step_index == 1 and not r.censored
    )

    by_id = {p.prompt_id: p for p in prompts}
    if local_all:
        local_ids = tuple(sorted(global_records))
    else:
        local_ids = unreliable

    local_records: list[SensitivityRecord] = []
    local_failed: dict[str, str] = {}
    local_degenerate: list[tuple[str, int]] = []
    plans = [SweepPlan(corpus_id=corpus.corpus_id, backend_id=info.model_id, phase="global")]
    if local_ids:
        plans.append(
            SweepPlan(
                corpus_id=corpus.corpus_id,
                backend_id=info.model_id,
                phase="local",
                local_prompt_ids=local_ids,
            )
        )

        def run_local(p: Prompt):
            return sweep_prompt_local(p, config, backend, retries)

        outcomes: dict[str, LocalSweepOutcome] = {}
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            futures = {pid: pool.submit(run_local, by_id[pid]) for pid in local_ids}
            for pid in local_ids:
                try:
                    outcomes[pid] = futures[pid].result()
                except BackendError as exc:
                    local_failed[pid] = str(exc)
        for pid in sorted(outcomes):
            out = outcomes[pid]
            local_records.extend(out.records)
            local_degenerate.extend((pid, i) for i in out.degenerate_rows)

    local_records.sort(key=lambda r: (r.prompt_id, r.token_index))
    local_dist, local_status = _distribution(local_records)
    sensitive = tuple(
        SensitiveToken(r.prompt_id, r.token_index, r.token)
        for r in local_records
        if r.step_index == 1 and not r.censored
    )

    return CascadeResult(
        corpus_id=corpus.corpus_id,
        backend_info=info,
        config=config,
        prompt_texts={p.prompt_id: p.text for p in prompts},
        global_records=ordered_global,
        global_failed=dict(sorted(global_failed.items())),
        global_degenerate=tuple(sorted(global_degenerate)),
        global_distribution=global_dist,
        global_distribution_status=global_status,
        unreliable_prompts=unreliable,
        local_records=tuple(local_records),
        local_failed=dict(sorted(local_failed.items())),
        local_degenerate=tuple(sorted(local_degenerate)),
        local_distribution=local_dist,
        local_distribution_status=local_status,
        sensitive_tokens=sensitive,
        local_all=local_all,
        plans=tuple(plans),
    )


def records_to_jsonl(records: Sequence[SensitivityRecord]) -> str:
    """One record per line, fixed field order; the stream hashing contract."""
    lines = [json.dumps(r.to_json_dict(), ensure_ascii=False) for r in records]
    return "\n".join(lines) + ("\n" if lines else "")
