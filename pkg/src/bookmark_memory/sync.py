"""Type-specific synchronization of a bookmark over the unseen storyline suffix.

Each operator receives only ``story.span(p + 1, target)``; nothing at or
below the bookmark's stored point is read again.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Protocol, Sequence

from .bank import Bookmark
from .lexical import fold_text
from .storyline import Action, Storyline, render_actions

log = logging.getLogger(__name__)

DEFAULT_CHUNK_SIZE = 20
DEFAULT_CONTEXT_RADIUS = 2
DEFAULT_BEHAVIOR_WINDOW = 5
DEFAULT_EVIDENCE_CAP = 20


class SyncError(RuntimeError):
    """An oracle failed mid-synchronization. ``__cause__`` holds the original error."""


@dataclass(frozen=True)
class SyncSettings:
    chunk_size: int = DEFAULT_CHUNK_SIZE
    context_radius: int = DEFAULT_CONTEXT_RADIUS
    behavior_window: int = DEFAULT_BEHAVIOR_WINDOW
    evidence_cap: int = DEFAULT_EVIDENCE_CAP
    # Ablation: update behavioral bookmarks by chunked rewriting instead of evidence.
    incremental_behavior: bool = False

    def __post_init__(self):
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        if self.context_radius < 0 or self.behavior_window < 0 or self.evidence_cap < 1:
            raise ValueError("context_radius/behavior_window must be >= 0, evidence_cap >= 1")


@dataclass(frozen=True)
class SyncRequest:
    bookmark: Bookmark
    story: Storyline
    target_point: int
    settings: SyncSettings = SyncSettings()


class StateTransitioner(Protocol):
    def transition_state(self, question: str, answer: str, chunk: Sequence[Action]) -> str: ...


class EvidenceOracles(Protocol):
    def filter_evidence(self, question: str, subject: str, action: Action, context: Sequence[Action]) -> bool: ...

    def summarize_behavior(self, question: str, subject: str, snippets: Sequence[str]) -> str: ...


class ConceptSummarizer(Protocol):
    def summarize_concept(self, question: str, answer: str, passages: Sequence[str], keywords: Sequence[str] = ()) -> str: ...


# -- span utilities ----------------------------------------------------------


def merge_spans(spans: Sequence[tuple[int, int]]) -> list[tuple[int, int]]:
    """Coalesce inclusive intervals that overlap or touch (``next.start <= end + 1``)."""
    out: list[tuple[int, int]] = []
    for start, end in sorted(spans):
        if out and start <= out[-1][1] + 1:
            if end > out[-1][1]:
                out[-1] = (out[-1][0], end)
        else:
            out.append((start, end))
    return out


def hit_spans(hits: Sequence[int], radius: int, lo: int, hi: int) -> list[tuple[int, int]]:
    return merge_spans([(max(lo, j - radius), min(hi, j + radius)) for j in hits])


def chunked(seq: Sequence, size: int) -> list[Sequence]:
    return [seq[k : k + size] for k in range(0, len(seq), size)]


# -- operators ---------------------------------------------------------------


class PartialStateSync(SyncError):
    def __init__(self, answer: str, boundary: int):
        super().__init__(f"state sync interrupted after boundary {boundary}")
        self.answer = answer
        self.boundary = boundary


def sync_state(
    question: str,
    answer: str,
    boundary: int,
    suffix: Sequence[Action],
    oracle: StateTransitioner,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
) -> tuple[str, int]:
    """Fold the suffix into the answer one fixed-size chunk at a time.

    Raises :class:`PartialStateSync` carrying the last durable
    ``(answer, boundary)`` if a transition fails.
    """
    for chunk in chunked(suffix, chunk_size):
        try:
            answer = oracle.transition_state(question, answer, chunk)
        except Exception as exc:
            raise PartialStateSync(answer, boundary) from exc
        boundary = chunk[-1].index
    return answer, boundary


def sync_behavioral(
    question: str,
    subject: str,
    answer: str,
    evidence: Sequence[tuple[int, str]],
    suffix: Sequence[Action],
    oracle: EvidenceOracles,
    window: int = DEFAULT_BEHAVIOR_WINDOW,
    cap: int = DEFAULT_EVIDENCE_CAP,
) -> tuple[str, list[tuple[int, str]]]:
    """Filter the subject's unseen actions for evidence and re-summarize if any matched.

    The filter's local context is the ``window`` actions preceding each
    candidate, restricted to the suffix.
    """
    evidence = list(evidence)
    seen = {i for i, _ in evidence}
    added = 0
    for pos, action in enumerate(suffix):
        if action.character != subject or action.index in seen:
            continue
        context = suffix[max(0, pos - window) : pos]
        if oracle.filter_evidence(question, subject, action, context):
            evidence.append((action.index, action.text))
            seen.add(action.index)
            added += 1
    if not added:
        return answer, evidence
    evidence.sort(key=lambda rec: rec[0])
    snippets = [s for _, s in evidence[-cap:]]
    return oracle.summarize_behavior(question, subject, snippets), evidence


def keyword_hits(keywords: Sequence[str], actions: Sequence[Action]) -> list[int]:
    if not keywords:
        return []
    return [a.index for a in actions if any(k in fold_text(a.text) for k in keywords)]


def sync_concept(
    question: str,
    keywords: Sequence[str],
    answer: str,
    spans: Sequence[tuple[int, int]],
    suffix: Sequence[Action],
    oracle: ConceptSummarizer,
    radius: int = DEFAULT_CONTEXT_RADIUS,
) -> tuple[str, list[tuple[int, int]]]:
    """Keyword-hit spans over the suffix, merged into the stored spans, then summarized.

    New spans are clipped to the suffix's index range; the summarizer sees
    only the text of the newly merged spans plus the prior answer.
    """
    if not suffix:
        return answer, list(spans)
    lo, hi = suffix[0].index, suffix[-1].index
    hits = keyword_hits(keywords, suffix)
    if not hits:
        return answer, list(spans)
    new = hit_spans(hits, radius, lo, hi)
    passages = [render_actions(suffix[s - lo : e - lo + 1]) for s, e in new]
    updated = oracle.summarize_concept(question, answer, passages, keywords)
    return updated, merge_spans(list(spans) + new)


def synchronize(req: SyncRequest, oracle) -> Bookmark:
    """Advance ``req.bookmark`` in place to ``req.target_point`` and return it.

    On oracle failure the bookmark keeps its last durable state (for state
    bookmarks: the last completed chunk) and :class:`SyncError` is raised.
    """
    b = req.bookmark
    p, target = b.sync_point, req.target_point
    if not p <= target <= len(req.story):
        raise ValueError(f"bad sync target {target} for bookmark at {p} (N={len(req.story)})")
    if target == p:
        return b
    suffix = req.story.span(p + 1, target)
    s = req.settings

    if b.kind == "state" or (b.kind == "behavioral" and s.incremental_behavior):
        try:
            b.answer, boundary = sync_state(b.question, b.answer, p, suffix, oracle, s.chunk_size)
        except PartialStateSync as exc:
            b.answer, b.sync_point = exc.answer, exc.boundary
            if b.kind == "state":
                b.aux.boundary = exc.boundary
            raise
        if b.kind == "state":
            b.aux.boundary = boundary
    elif b.kind == "behavioral":
        try:
            b.answer, b.aux.evidence = sync_behavioral(
                b.question, b.subject, b.answer, b.aux.evidence, suffix, oracle,
                s.behavior_window, s.evidence_cap,
            )
        except Exception as exc:
            raise SyncError(f"behavioral sync of bookmark {b.id} failed") from exc
    else:
        try:
            b.answer, b.aux.spans = sync_concept(
                b.question, b.aux.keywords, b.answer, b.aux.spans, suffix, oracle, s.context_radius
            )
        except Exception as exc:
            raise SyncError(f"concept sync of bookmark {b.id} failed") from exc
    b.sync_point = target
    return b
