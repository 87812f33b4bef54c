"""Corpus and ontology loading, plus ground-truth trigger injection."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .audit import OntologyNode
from .core import Prompt, sha256_hex

__all__ = [
    "PromptCorpus",
    "load_corpus",
    "save_corpus",
    "inject_triggers",
    "load_ontology",
]

PLACEMENTS = ("append", "prepend", "substitute")


@dataclass(frozen=True)
class PromptCorpus:
    """An ordered prompt collection tied to its source file by content hash."""

    corpus_id: str
    prompts: tuple[Prompt, ...]
    source_path: str
    content_hash: str

    def __post_init__(self) -> None:
        ids = [p.prompt_id for p in self.prompts]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate prompt ids: {', '.join(dupes)}")

    @property
    def injected_count(self) -> int:
        return sum(1 for p in self.prompts if p.injected_trigger is not None)

    def ground_truth_triggers(self) -> tuple[str, ...]:
        return tuple(
            sorted({p.injected_trigger for p in self.prompts if p.injected_trigger})
        )


def _read_bytes(path: str | Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise ValueError(f"cannot read corpus file {path}: {exc}") from exc


def load_corpus(path: str | Path, fmt: str = "lines") -> PromptCorpus:
    """Load a corpus from a text file (one prompt per line) or a caption JSON array."""
    raw = _read_bytes(path)
    digest = sha256_hex(raw)
    corpus_id = f"{Path(path).stem}-{digest[:12]}"
    if fmt == "lines":
        prompts = []
        for text in raw.decode("utf-8").splitlines():
            text = text.strip()
            if not text:
                continue
            prompts.append(Prompt(prompt_id=f"p{len(prompts):04d}", text=text))
    elif fmt == "caption-json":
        try:
            data = json.loads(raw.decode("utf-8"))
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not valid JSON: {exc}") from exc
        if not isinstance(data, list):
            raise ValueError(f"{path}: caption-json must be a JSON array")
        seen: set[str] = set()
        prompts = []
        for i, rec in enumerate(data):
            if not isinstance(rec, dict) or "id" not in rec or "caption" not in rec:
                raise ValueError(
                    f"{path}: record {i} must be an object with 'id' and 'caption'"
                )
            pid = str(rec["id"])
            if pid in seen:
                raise ValueError(f"{path}: duplicate prompt id {pid!r} at record {i}")
            seen.add(pid)
            text = str(rec["caption"]).strip()
            if not text:
                raise ValueError(f"{path}: record {i} ({pid}) has an empty caption")
            prompts.append(
                Prompt(
                    prompt_id=pid,
                    text=text,
                    injected_trigger=rec.get("injected_trigger"),
                )
            )
    else:
        raise ValueError(f"unknown corpus format {fmt!r}")
    if not prompts:
        raise ValueError(f"{path}: corpus is empty")
    return PromptCorpus(
        corpus_id=corpus_id,
        prompts=tuple(prompts),
        source_path=str(path),
        content_hash=digest,
    )


def save_corpus(corpus: PromptCorpus, path: str | Path) -> None:
    """Write the corpus in caption-json form; load_corpus inverts this exactly."""
    records = []
    for p in corpus.prompts:
        rec = {"id": p.prompt_id, "caption": p.text}
        if p.injected_trigger is not None:
            rec["injected_trigger"] = p.injected_trigger
        records.append(rec)
    Path(path).write_text(
        json.dumps(records, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )


def inject_triggers(
    corpus: PromptCorpus,
    trigger: Optional[str],
    rate: float,
    placement: str = "append",
    seed: int = 0,
    substitute_map: Optional[dict] = None,
) -> PromptCorpus:
    """Mark floor(rate * n) seeded-sampled prompts with a trigger.

    append/prepend attach the trigger verbatim; substitute swaps the first
    prompt word found in ``substitute_map`` for its mapped replacement and
    records the replacement as the injected trigger. Non-selected prompts are
    carried over byte-exactly.
    """
    if not (0 <= rate <= 1):
        raise ValueError("rate must be in [0, 1]")
    if placement not in PLACEMENTS:
        raise ValueError(f"placement must be one of {PLACEMENTS}")
    if placement == "substitute":
        if not substitute_map:
            raise ValueError("substitute placement requires substitute_map")
    elif not trigger or not trigger.strip():
        raise ValueError(f"{placement} placement requires a non-empty trigger")

    n = len(corpus.prompts)
    count = int(rate * n)
    if count == 0:
        return corpus
    order = np.random.default_rng(seed).permutation(n)

    def substitute(p: Prompt) -> Optional[Prompt]:
        words = p.text.split()
        for i, w in enumerate(words):
            replacement = substitute_map.get(w)
            if replacement is not None:
                words[i] = replacement
                return replace(
                    p, text=" ".join(words), injected_trigger=replacement
                )
        return None

    selected: dict[int, Prompt] = {}
    for idx in order:
        if len(selected) == count:
            break
        p = corpus.prompts[idx]
        if placement == "append":
            selected[idx] = replace(
                p, text=f"{p.text} {trigger}", injected_trigger=trigger
            )
        elif placement == "prepend":
            selected[idx] = replace(
                p, text=f"{trigger} {p.text}", injected_trigger=trigger
            )
        else:
            injected = substitute(p)
            if injected is None:
                continue
            selected[idx] = injected
    if len(selected) < count:
        raise ValueError(
            f"only {len(selected)} of {count} prompts contain a substitutable word"
        )
    prompts = tuple(
        selected.get(i, corpus.prompts[i]) for i in range(n)
    )
    return PromptCorpus(
        corpus_id=corpus.corpus_id,
        prompts=prompts,
        source_path=corpus.source_path,
        content_hash=corpus.content_hash,
    )


def load_ontology(path: str | Path) -> OntologyNode:
    """Load a nested {"concept", "children"} JSON tree with validation."""
    raw = _read_bytes(path)
    try:
        data = json.loads(raw.decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not valid JSON: {exc}") from exc
    return OntologyNode.from_nested(data)
