"""Second-stage evaluations of tokens flagged by the reliability cascade.

Diversity scores how spread out a backend's outputs are for a single-concept
prompt; fairness scores how much one token steers generation under low
guidance (leave-one-out). Together they rank candidate bias triggers: an
injected natural-language trigger collapses diversity, a rare trigger shows
up as an outsized leave-one-out influence.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

from .backend.base import Backend
from .core import AuditConfig, GenerationRequest, ImageFeature, derive_seed, key64
from .metrics import (
    DEFAULT_CLAMP_EPS,
    SimilarityMatrix,
    diversity,
    fairness,
)
from .sweep import CascadeResult

__all__ = [
    "TriggerCandidate",
    "RetrievalResult",
    "OntologyNode",
    "OntologyRow",
    "OntologyStudy",
    "STATUS_EVIDENCE",
    "STATUS_NO_EVIDENCE",
    "eval_diversity",
    "eval_fairness",
    "retrieve_triggers",
    "ontology_study",
]

STATUS_EVIDENCE = "provenance-evidence"
STATUS_NO_EVIDENCE = "no-provenance-evidence"


@dataclass(frozen=True)
class TriggerCandidate:
    """A sensitive token ranked by both retrieval criteria (rank 1 = most suspect)."""

    token: str
    diversity: float
    fairness: float
    rank_by_diversity: int
    rank_by_fairness: int
    source_prompts: tuple[str, ...]


@dataclass(frozen=True)
class RetrievalResult:
    candidates: tuple[TriggerCandidate, ...]
    status: str
    dominant_token: Optional[str] = None


@dataclass(frozen=True)
class OntologyNode:
    """A concept in a specificity hierarchy; depth 0 is the root."""

    concept: str
    depth: int
    children: tuple["OntologyNode", ...] = ()

    @classmethod
    def from_nested(cls, data: dict) -> "OntologyNode":
        """Build a validated tree from nested {"concept", "children"} dicts."""
        seen: set[str] = set()

        def build(node: dict, depth: int) -> "OntologyNode":
            if not isinstance(node, dict) or "concept" not in node:
                raise ValueError("ontology node must be an object with a 'concept' key")
            concept = node["concept"]
            if not isinstance(concept, str) or not concept.strip():
                raise ValueError("ontology concept must be a non-empty string")
            if concept in seen:
                raise ValueError(f"duplicate concept in ontology: {concept!r}")
            seen.add(concept)
            children = tuple(
                build(child, depth + 1) for child in node.get("children", [])
            )
            return cls(concept=concept, depth=depth, children=children)

        return build(data, 0)

    def walk(self):
        """Depth-first preorder traversal of (parent, node) pairs."""
        stack: list[tuple[Optional[OntologyNode], OntologyNode]] = [(None, self)]
        while stack:
            parent, node = stack.pop()
            yield parent, node
            for child in reversed(node.children):
                stack.append((node, child))


@dataclass(frozen=True)
class OntologyRow:
    concept: str
    depth: int
    diversity: float
    parent: Optional[str]
    delta_from_parent: Optional[float]


@dataclass(frozen=True)
class OntologyStudy:
    rows: tuple[OntologyRow, ...]

    @property
    def edge_deltas(self) -> tuple[float, ...]:
        return tuple(r.delta_from_parent for r in self.rows if r.parent is not None)


def _generate_feature(
    backend: Backend, prompt: str, guidance: float, steps: int, noise_seed: int
) -> ImageFeature:
    if backend.info().capabilities.prompt_conditioning:
        req = GenerationRequest(
            prompt=prompt, guidance=guidance, steps=steps, noise_seed=noise_seed
        )
    else:
        req = GenerationRequest(
            embedding=backend.encode(prompt),
            guidance=guidance,
            steps=steps,
            noise_seed=noise_seed,
        )
    return backend.generate(req).feature


def eval_diversity(
    token: str, config: AuditConfig, backend: Backend
) -> tuple[SimilarityMatrix, float]:
    """Generate diversity_n images from the bare concept prompt and score them."""
    if not token.strip():
        raise ValueError("token must be non-empty")
    features = []
    for i in range(config.diversity_n):
        seed = derive_seed(
            config.base_seed, [("diversity", key64(token)), ("sample", i)]
        )
        features.append(
            _generate_feature(
                backend, token, config.guidance_main, config.steps_T, seed
            )
        )
    return diversity(features)


def eval_fairness(
    prompt_text: str,
    token_index: int,
    config: AuditConfig,
    backend: Backend,
    clamp_eps: float = DEFAULT_CLAMP_EPS,
) -> float:
    """Leave-one-out influence of one token of a prompt, under low guidance.

    The leave-one-out prompt is rebuilt from the surface forms with the token
    removed and re-encoded by the backend, and each of the fairness_k pairs
    shares one noise seed so the removed token is the only varying factor.
    """
    x = backend.encode(prompt_text)
    if not (0 <= token_index < x.rows):
        raise IndexError(f"token_index {token_index} out of range for {x.rows} rows")
    if x.tokens[token_index].special:
        raise ValueError(f"row {token_index} is a special token")
    kept = [
        t.text for i, t in enumerate(x.tokens) if not t.special and i != token_index
    ]
    if not kept:
        raise ValueError("prompt reduces to empty after removing the token")
    loo_text = " ".join(kept)
    originals = []
    left_out = []
    for k in range(1, config.fairness_k + 1):
        seed = derive_seed(config.base_seed, [("fairness", key64(prompt_text)), ("k", k)])
        originals.append(
            _generate_feature(
                backend, prompt_text, config.guidance_low, config.steps_T, seed
            )
        )
        left_out.append(
            _generate_feature(
                backend, loo_text, config.guidance_low, config.steps_T, seed
            )
        )
    return fairness(left_out, originals, clamp_eps)


def retrieve_triggers(
    cascade: CascadeResult, config: AuditConfig, backend: Backend
) -> RetrievalResult:
    """Rank deduplicated sensitive tokens by diversity and by fairness.

    Both rankings are dense permutations of 1..len(candidates), ascending in
    the respective score with lexicographic tie-breaks. A token that tops
    both rankings is reported as the dominant provenance suspect; otherwise
    the result is flagged as carrying no provenance evidence.
    """
    groups: dict[str, list] = {}
    for st in cascade.sensitive_tokens:
        groups.setdefault(st.token, []).append(st)
    if not groups:
        return RetrievalResult(candidates=(), status=STATUS_NO_EVIDENCE)

    scored = []
    for token in sorted(groups):
        sources = groups[token]
        _, d_score = eval_diversity(token, config, backend)
        f_scores = []
        for st in sources:
            text = cascade.prompt_texts[st.prompt_id]
            try:
                f_scores.append(eval_fairness(text, st.token_index, config, backend))
            except ValueError:
                continue
        if not f_scores:
            raise ValueError(
                f"token {token!r}: no source prompt admits a leave-one-out evaluation"
            )
        f_score = float(sum(f_scores) / len(f_scores))
        prompt_ids = tuple(sorted({st.prompt_id for st in sources}))
        scored.append((token, d_score, f_score, prompt_ids))

    d_rank = {
        token: i + 1
        for i, (token, *_rest) in enumerate(
            sorted(scored, key=lambda s: (s[1], s[0]))
        )
    }
    f_rank = {
        token: i + 1
        for i, (token, *_rest) in enumerate(
            sorted(scored, key=lambda s: (s[2], s[0]))
        )
    }
    candidates = tuple(
        TriggerCandidate(
            token=token,
            diversity=d_score,
            fairness=f_score,
            rank_by_diversity=d_rank[token],
            rank_by_fairness=f_rank[token],
            source_prompts=prompt_ids,
        )
        for token, d_score, f_score, prompt_ids in sorted(
            scored, key=lambda s: (d_rank[s[0]],)
        )
    )
    dominant = next(
        (
            c.token
            for c in candidates
            if c.rank_by_diversity == 1 and c.rank_by_fairness == 1
        ),
        None,
    )
    status = STATUS_EVIDENCE if dominant is not None else STATUS_NO_EVIDENCE
    return RetrievalResult(candidates=candidates, status=status, dominant_token=dominant)


def ontology_study(
    tree: OntologyNode, config: AuditConfig, backend: Backend
) -> OntologyStudy:
    """Diversity at every node of a concept hierarchy, in depth-first order.

    Each non-root row carries the drop relative to its parent; positive
    deltas mean diversity falls as concepts get more specific.
    """
    scores: dict[str, float] = {}
    rows = []
    for parent, node in tree.walk():
        _, d_score = eval_diversity(node.concept, config, backend)
        scores[node.concept] = d_score
        if parent is None:
            rows.append(OntologyRow(node.concept, node.depth, d_score, None, None))
        else:
            rows.append(
                OntologyRow(
                    node.concept,
                    node.depth,
                    d_score,
                    parent.concept,
                    scores[parent.concept] - d_score,
                )
            )
    return OntologyStudy(rows=tuple(rows))
