"""The global bookmark pool and the reuse / derive / create lifecycle."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Protocol

from .lexical import concept_keywords, normalize_tokens, overlap_score
from .prompts import KINDS, UNKNOWN

SCHEMA_VERSION = 1
DEFAULT_K_PRIME = 5


class BankError(ValueError):
    pass


@dataclass
class AuxMemory:
    """Type-specific auxiliary memory. Only the fields of the bookmark's kind are used.

    ``boundary``  state: last storyline index consumed by a completed chunk.
    ``evidence``  behavioral: ``(action index, snippet)`` records, index-ordered.
    ``spans``     concept: merged inclusive ``(start, end)`` evidence spans.
    ``keywords``  concept: search keywords derived from the question.
    """

    boundary: int = 0
    evidence: list[tuple[int, str]] = field(default_factory=list)
    spans: list[tuple[int, int]] = field(default_factory=list)
    keywords: list[str] = field(default_factory=list)

    def to_dict(self, kind: str) -> dict:
        if kind == "state":
            return {"boundary": self.boundary}
        if kind == "behavioral":
            return {"evidence": [[i, s] for i, s in self.evidence]}
        return {"spans": [[a, b] for a, b in self.spans], "keywords": list(self.keywords)}

    @classmethod
    def from_dict(cls, kind: str, raw: dict) -> "AuxMemory":
        if kind == "state":
            return cls(boundary=int(raw.get("boundary", 0)))
        if kind == "behavioral":
            return cls(evidence=[(int(i), str(s)) for i, s in raw.get("evidence", [])])
        return cls(
            spans=[(int(a), int(b)) for a, b in raw.get("spans", [])],
            keywords=[str(k) for k in raw.get("keywords", [])],
        )


@dataclass
class Bookmark:
    id: int
    question: str
    kind: str
    answer: str = UNKNOWN
    sync_point: int = 0
    aux: AuxMemory = field(default_factory=AuxMemory)
    subject: str | None = None
    parent_id: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise BankError(f"unknown bookmark kind '{self.kind}'")
        if self.kind == "behavioral" and not self.subject:
            raise BankError("behavioral bookmarks require a subject character")
        if self.sync_point < 0:
            raise BankError("sync_point must be >= 0")
        if not self.answer:
            self.answer = UNKNOWN

    @property
    def tokens(self) -> frozenset[str]:
        return normalize_tokens(self.question)

    @property
    def is_unknown(self) -> bool:
        return self.answer == UNKNOWN

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "question": self.question,
            "answer": self.answer,
            "kind": self.kind,
            "sync_point": self.sync_point,
            "subject": self.subject,
            "parent_id": self.parent_id,
            "aux": self.aux.to_dict(self.kind),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "Bookmark":
        kind = raw["kind"]
        return cls(
            id=int(raw["id"]),
            question=raw["question"],
            kind=kind,
            answer=raw["answer"],
            sync_point=int(raw["sync_point"]),
            aux=AuxMemory.from_dict(kind, raw.get("aux", {})),
            subject=raw.get("subject"),
            parent_id=raw.get("parent_id"),
        )


class MemoryBank:
    """Bookmarks by id, with a per-kind index kept in creation order."""

    def __init__(self):
        self._items: dict[int, Bookmark] = {}
        self._by_kind: dict[str, list[int]] = {k: [] for k in KINDS}
        self._next_id = 1

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[Bookmark]:
        return iter(self._items.values())

    def __contains__(self, bookmark_id: int) -> bool:
        return bookmark_id in self._items

    def __getitem__(self, bookmark_id: int) -> Bookmark:
        return self._items[bookmark_id]

    def of_kind(self, kind: str) -> list[Bookmark]:
        return [self._items[i] for i in self._by_kind[kind]]

    def new_id(self) -> int:
        bid = self._next_id
        self._next_id += 1
        return bid

    def add(self, bookmark: Bookmark) -> Bookmark:
        if bookmark.id in self._items:
            raise BankError(f"duplicate bookmark id {bookmark.id}")
        self._items[bookmark.id] = bookmark
        self._by_kind[bookmark.kind].append(bookmark.id)
        self._next_id = max(self._next_id, bookmark.id + 1)
        return bookmark

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "next_id": self._next_id,
            "bookmarks": [b.to_dict() for b in self._items.values()],
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "MemoryBank":
        version = raw.get("schema_version")
        if version != SCHEMA_VERSION:
            raise BankError(f"unsupported bank schema_version {version!r} (expected {SCHEMA_VERSION})")
        bank = cls()
        for rec in raw.get("bookmarks", []):
            bank.add(Bookmark.from_dict(rec))
        bank._next_id = max(bank._next_id, int(raw.get("next_id", 1)))
        return bank


def save_bank(bank: MemoryBank, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(bank.to_dict(), ensure_ascii=False, indent=1), encoding="utf-8")
    tmp.replace(path)


def load_bank(path: str | Path) -> MemoryBank:
    return MemoryBank.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# -- matching ----------------------------------------------------------------


def prefilter(bank: MemoryBank, query: str, kind: str, k_prime: int = DEFAULT_K_PRIME) -> list[Bookmark]:
    """Same-kind bookmarks with positive token overlap, best first, at most ``k_prime``.

    Ties: higher sync_point first, then lower id.
    """
    if k_prime < 1:
        raise ValueError("k_prime must be >= 1")
    q = normalize_tokens(query)
    scored = []
    for b in bank.of_kind(kind):
        s = overlap_score(q, b.tokens)
        if s > 0:
            scored.append((-s, -b.sync_point, b.id, b))
    scored.sort(key=lambda t: t[:3])
    return [t[3] for t in scored[:k_prime]]


@dataclass(frozen=True)
class MatchOutcome:
    outcome: str  # "reuse" | "derive" | "create"
    bookmark_id: int | None = None

    @classmethod
    def create(cls) -> "MatchOutcome":
        return cls("create")


class RelationJudge(Protocol):
    def relation(self, query: str, kind: str, candidate_question: str, candidate_answer: str) -> str: ...


def match(
    query: str,
    kind: str,
    candidates: list[Bookmark],
    oracle: RelationJudge,
    *,
    reuse: bool = True,
    derive: bool = True,
) -> MatchOutcome:
    """Two-pass resolution: any ``reuse`` in rank order wins, else the first ``derive``.

    With ``reuse=False`` no candidate is consulted and the result is always
    ``create``; with ``derive=False`` derive labels are ignored.
    """
    if not reuse or not candidates:
        return MatchOutcome.create()
    first_derive = None
    for cand in candidates:
        label = oracle.relation(query, kind, cand.question, cand.answer)
        if label == "reuse":
            return MatchOutcome("reuse", cand.id)
        if label == "derive" and first_derive is None:
            first_derive = cand.id
    if derive and first_derive is not None:
        return MatchOutcome("derive", first_derive)
    return MatchOutcome.create()


def create_bookmark(bank: MemoryBank, query: str, kind: str, subject: str | None = None) -> Bookmark:
    if kind == "behavioral" and not subject:
        raise BankError("behavioral bookmarks require a subject character")
    aux = AuxMemory(keywords=concept_keywords(query)) if kind == "concept" else AuxMemory()
    return bank.add(
        Bookmark(
            id=bank.new_id(),
            question=query,
            kind=kind,
            subject=subject if kind == "behavioral" else None,
            aux=aux,
        )
    )


class DeriveInitializer(Protocol):
    def derive(self, parent_question: str, parent_answer: str, query: str) -> str: ...


def derive_bookmark(
    bank: MemoryBank,
    parent: Bookmark,
    query: str,
    kind: str,
    oracle: DeriveInitializer,
    subject: str | None = None,
) -> Bookmark:
    """New bookmark seeded from ``parent``'s answer, inheriting its sync point."""
    if parent.id not in bank:
        raise BankError(f"parent bookmark {parent.id} is not in the bank")
    if kind == "behavioral" and not subject:
        raise BankError("behavioral bookmarks require a subject character")
    if parent.is_unknown:
        answer = UNKNOWN
    else:
        answer = oracle.derive(parent.question, parent.answer, query)
    aux = AuxMemory(keywords=concept_keywords(query)) if kind == "concept" else AuxMemory()
    if kind == "state":
        aux.boundary = parent.sync_point
    child = Bookmark(
        id=bank.new_id(),
        question=query,
        kind=kind,
        answer=answer,
        sync_point=parent.sync_point,
        aux=aux,
        subject=subject if kind == "behavioral" else None,
        parent_id=parent.id,
    )
    return bank.add(child)
