"""One grounded prediction step: propose, resolve, synchronize, assemble, act."""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .bank import (
    DEFAULT_K_PRIME,
    Bookmark,
    MemoryBank,
    create_bookmark,
    derive_bookmark,
    match,
    prefilter,
)
from .base import ProposalTrace, RPAEstimator, StepTrace
from .gateway import Gateway
from .prompts import KINDS, NO_GROUNDING, UNKNOWN, Oracles, parse_proposals
from .storyline import DEFAULT_WINDOW, Scene, Storyline
from .sync import (
    DEFAULT_BEHAVIOR_WINDOW,
    DEFAULT_CHUNK_SIZE,
    DEFAULT_CONTEXT_RADIUS,
    DEFAULT_EVIDENCE_CAP,
    SyncRequest,
    SyncSettings,
    synchronize,
)

log = logging.getLogger(__name__)

DEFAULT_K = 5
DEFAULT_NEAR_DISTANCE = 5
DEFAULT_CONTEXT_CAP = 6000


class ProposalError(RuntimeError):
    pass


@dataclass(frozen=True)
class ProposalSet:
    items: tuple[tuple[str, str], ...]
    dropped: int = 0

    def __post_init__(self):
        if not self.items:
            raise ProposalError("proposal set is empty")
        for _, kind in self.items:
            if kind not in KINDS:
                raise ProposalError(f"unknown kind '{kind}'")

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)


@dataclass(frozen=True)
class ContextEntry:
    question: str
    answer: str
    kind: str
    sync_point: int
    bookmark_id: int

    @classmethod
    def of(cls, b: Bookmark) -> "ContextEntry":
        return cls(b.question, b.answer, b.kind, b.sync_point, b.id)


@dataclass(frozen=True)
class GroundingContext:
    active_entries: tuple[ContextEntry, ...]
    near_entries: tuple[ContextEntry, ...]
    rendered: str


def propose_queries(scene: Scene, oracle: Oracles, k: int = DEFAULT_K) -> ProposalSet:
    if k < 1:
        raise ValueError("k must be >= 1")
    parsed = parse_proposals(oracle.propose(scene, k), k)
    if parsed.dropped:
        log.info("step %d: dropped %d malformed proposal lines", scene.target_index, len(parsed.dropped))
    if not parsed.items:
        raise ProposalError(f"step {scene.target_index}: no parseable proposals")
    return ProposalSet(parsed.items, len(parsed.dropped))


def resolve_and_sync(
    query: str,
    kind: str,
    bank: MemoryBank,
    story: Storyline,
    point: int,
    oracle: Oracles,
    *,
    subject: str | None = None,
    k_prime: int = DEFAULT_K_PRIME,
    reuse: bool = True,
    derive: bool = True,
    sync_settings: SyncSettings = SyncSettings(),
) -> tuple[Bookmark | None, ProposalTrace]:
    """Resolve a proposal to a bookmark and bring it to ``point``.

    Failures never raise: the returned bookmark is ``None`` and the trace
    carries ``outcome="error"``.
    """
    outcome = "error"
    bookmark = None
    p_before = None
    try:
        candidates = prefilter(bank, query, kind, k_prime) if reuse else []
        result = match(query, kind, candidates, oracle, reuse=reuse, derive=derive)
        outcome = result.outcome
        if outcome == "reuse":
            bookmark = bank[result.bookmark_id]
        elif outcome == "derive":
            bookmark = derive_bookmark(bank, bank[result.bookmark_id], query, kind, oracle, subject=subject)
        else:
            bookmark = create_bookmark(bank, query, kind, subject=subject)
        p_before = bookmark.sync_point
        synchronize(SyncRequest(bookmark, story, point, sync_settings), oracle)
    except Exception as exc:
        log.warning("query %r (%s) failed: %s", query, kind, exc)
        processed = 0 if bookmark is None else bookmark.sync_point - p_before
        return None, ProposalTrace(
            query, kind, "error", processed,
            bookmark.id if bookmark else None, p_before, f"{type(exc).__name__}: {exc}",
        )
    return bookmark, ProposalTrace(query, kind, outcome, point - p_before, bookmark.id, p_before)


def collect_near(
    bank: MemoryBank,
    point: int,
    d: int = DEFAULT_NEAR_DISTANCE,
    exclude: set[int] | frozenset[int] = frozenset(),
) -> list[ContextEntry]:
    """Known-answer bookmarks synced within ``d`` actions of ``point``, nearest first."""
    if d < 0:
        raise ValueError("near distance must be >= 0")
    near = [
        b for b in bank
        if point - d <= b.sync_point <= point and b.id not in exclude and not b.is_unknown
    ]
    near.sort(key=lambda b: (point - b.sync_point, b.id))
    return [ContextEntry.of(b) for b in near]


def _render(active: list[ContextEntry], near: list[ContextEntry]) -> str:
    if not active and not near:
        return NO_GROUNDING
    parts = []
    if active:
        parts.append("Active memory:")
        for e in active:
            answer = e.answer if e.answer != UNKNOWN else "Unknown (not established in the storyline so far)"
            parts.append(f"- ({e.kind}) Q: {e.question}\n  A: {answer}")
    if near:
        if parts:
            parts.append("")
        parts.append("Recent memory:")
        for e in near:
            parts.append(f"- ({e.kind}, as of action {e.sync_point}) Q: {e.question}\n  A: {e.answer}")
    return "\n".join(parts)


def assemble_context(
    active: list[ContextEntry], near: list[ContextEntry], cap: int | None = DEFAULT_CONTEXT_CAP
) -> GroundingContext:
    """Render active then near entries; over ``cap`` characters, drop the farthest near entries.

    Active entries are never dropped, so the result may still exceed ``cap``.
    """
    near = [e for e in near if e.answer != UNKNOWN]
    rendered = _render(active, near)
    while cap is not None and near and len(rendered) > cap:
        near = near[:-1]
        rendered = _render(active, near)
    return GroundingContext(tuple(active), tuple(near), rendered)


def predict_action(scene: Scene, context: GroundingContext | None, oracle: Oracles) -> str:
    return oracle.act(scene, context.rendered if context is not None else NO_GROUNDING)


class BookmarkRPA(RPAEstimator):
    """Role-playing predictor grounded by a maintained pool of storyline bookmarks.

    Parameters
    ----------
    oracle : Gateway
    k : number of proposed queries per prediction.
    k_prime : candidates kept by the lexical prefilter.
    window : scene window (preceding actions).
    near_distance : sync-point distance for "recent memory" entries.
    chunk_size, context_radius, behavior_window, evidence_cap : synchronizer settings.
    context_cap : character budget for the rendered grounding context.
    reuse, derive, near_notes, incremental_behavior : ablation switches.
    bank : optional pre-existing MemoryBank to share across characters.
    """

    method = "bookmarks"

    def __init__(
        self,
        oracle: Gateway,
        k: int = DEFAULT_K,
        k_prime: int = DEFAULT_K_PRIME,
        window: int = DEFAULT_WINDOW,
        near_distance: int = DEFAULT_NEAR_DISTANCE,
        chunk_size: int = DEFAULT_CHUNK_SIZE,
        context_radius: int = DEFAULT_CONTEXT_RADIUS,
        behavior_window: int = DEFAULT_BEHAVIOR_WINDOW,
        evidence_cap: int = DEFAULT_EVIDENCE_CAP,
        context_cap: int = DEFAULT_CONTEXT_CAP,
        reuse: bool = True,
        derive: bool = True,
        near_notes: bool = True,
        incremental_behavior: bool = False,
        bank: MemoryBank | None = None,
    ):
        super().__init__(oracle, window)
        self.k = k
        self.k_prime = k_prime
        self.near_distance = near_distance
        self.chunk_size = chunk_size
        self.context_radius = context_radius
        self.behavior_window = behavior_window
        self.evidence_cap = evidence_cap
        self.context_cap = context_cap
        self.reuse = reuse
        self.derive = derive
        self.near_notes = near_notes
        self.incremental_behavior = incremental_behavior
        self.bank = bank

    def _fit_state(self):
        self.bank_ = self.bank if self.bank is not None else MemoryBank()
        self.sync_settings_ = SyncSettings(
            chunk_size=self.chunk_size,
            context_radius=self.context_radius,
            behavior_window=self.behavior_window,
            evidence_cap=self.evidence_cap,
            incremental_behavior=self.incremental_behavior,
        )

    def ground(self, scene: Scene, trace: StepTrace) -> GroundingContext:
        point = scene.target_index - 1
        proposals = propose_queries(scene, self.oracles_, self.k)
        active: list[ContextEntry] = []
        active_ids: set[int] = set()
        for query, kind in proposals:
            bookmark, ptrace = resolve_and_sync(
                query, kind, self.bank_, self.story_, point, self.oracles_,
                subject=scene.target_character,
                k_prime=self.k_prime,
                reuse=self.reuse,
                derive=self.derive,
                sync_settings=self.sync_settings_,
            )
            trace.proposals.append(ptrace)
            if bookmark is not None and bookmark.id not in active_ids:
                active_ids.add(bookmark.id)
                active.append(ContextEntry.of(bookmark))
        near = collect_near(self.bank_, point, self.near_distance, active_ids) if self.near_notes else []
        context = assemble_context(active, near, self.context_cap)
        trace.near_count = len(context.near_entries)
        return context

    def _predict_step(self, scene: Scene) -> StepTrace:
        trace = StepTrace(
            index=scene.target_index,
            character=scene.target_character,
            method=self.method,
            predicted=None,
            sync_mode="ibu" if self.incremental_behavior else "evidence",
        )
        try:
            context = self.ground(scene, trace)
        except ProposalError as exc:
            log.warning("%s; falling back to ungrounded prediction", exc)
            trace.fallback = True
            context = None
        except Exception as exc:
            log.warning("step %d grounding failed: %s", scene.target_index, exc)
            trace.fallback = True
            trace.error = f"grounding: {type(exc).__name__}: {exc}"
            context = None
        try:
            trace.predicted = predict_action(scene, context, self.oracles_)
        except Exception as exc:
            trace.error = f"actor: {type(exc).__name__}: {exc}"
        return trace

    def state_dict(self) -> dict:
        state = super().state_dict()
        state["bank"] = self.bank_.to_dict()
        return state

    def load_state(self, state: dict) -> None:
        super().load_state(state)
        if "bank" in state:
            self.bank_ = MemoryBank.from_dict(state["bank"])
