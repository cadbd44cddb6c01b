"""Estimator scaffolding shared by the grounding engine and the baselines.

Every method is a scikit-learn style estimator: hyper-parameters go to
``__init__`` (so ``get_params``/``set_params``/``clone`` work), ``fit``
binds a storyline and a target character, and ``predict`` replays
prediction steps in storyline order.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .gateway import Gateway
from .prompts import Oracles
from .storyline import (
    DEFAULT_WINDOW,
    CharacterSplit,
    Scene,
    Storyline,
    StorylineError,
    build_scene,
    canonical_name,
    split_for_character,
)


@dataclass
class ProposalTrace:
    q: str
    kind: str
    outcome: str  # reuse | derive | create | error
    processed: int
    bookmark_id: int | None = None
    p_before: int | None = None
    error: str | None = None


@dataclass
class StepTrace:
    index: int
    character: str
    method: str
    predicted: str | None
    proposals: list[ProposalTrace] = field(default_factory=list)
    near_count: int = 0
    oracle_calls: dict[str, int] = field(default_factory=dict)
    fallback: bool = False
    error: str | None = None
    sync_mode: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["oracle_calls"] = dict(sorted(self.oracle_calls.items()))
        return d


def check_storyline(story) -> Storyline:
    if not isinstance(story, Storyline):
        raise TypeError(f"expected a Storyline, got {type(story).__name__}")
    return story


def check_indices(story: Storyline, indices: Sequence[int], after: int = 0) -> list[int]:
    """Validate prediction indices: in range, strictly increasing, beyond ``after``."""
    out = [int(i) for i in indices]
    prev = after
    for i in out:
        if not 1 <= i <= len(story):
            raise StorylineError(f"prediction index {i} out of range 1..{len(story)}")
        if i <= prev:
            raise StorylineError(
                f"prediction indices must be strictly increasing and > {after}; got {i} after {prev}"
            )
        prev = i
    return out


class RPAEstimator(BaseEstimator):
    """Base class: subclasses implement ``_predict_step(scene) -> StepTrace``."""

    method = "base"

    def __init__(self, oracle: Gateway, window: int = DEFAULT_WINDOW):
        self.oracle = oracle
        self.window = window

    def fit(self, story: Storyline, character: str | None = None):
        self.story_ = check_storyline(story)
        self.character_ = canonical_name(character) if character else None
        self.split_: CharacterSplit | None = (
            split_for_character(story, self.character_) if self.character_ else None
        )
        self.oracles_ = Oracles(self.oracle)
        self.last_index_ = 0
        self.traces_: list[StepTrace] = []
        self._fit_state()
        return self

    def _fit_state(self):
        pass

    def predict(self, indices: Sequence[int] | None = None) -> list[str | None]:
        check_is_fitted(self, "story_")
        if indices is None:
            if self.split_ is None:
                raise ValueError("no indices given and no character split to take them from")
            indices = self.split_.test_indices
        return [t.predicted for t in (self.step(i) for i in check_indices(self.story_, indices, self.last_index_))]

    def step(self, i: int) -> StepTrace:
        """Run one prediction for action ``i``; the trace is also appended to ``traces_``."""
        check_is_fitted(self, "story_")
        check_indices(self.story_, [i], self.last_index_)
        scene = build_scene(self.story_, i, self.window)
        before = self.oracle.snapshot_calls()
        trace = self._predict_step(scene)
        trace.oracle_calls = dict(self.oracle.snapshot_calls() - before)
        self.last_index_ = i
        self.traces_.append(trace)
        return trace

    def _predict_step(self, scene: Scene) -> StepTrace:
        raise NotImplementedError

    # Resumable state; subclasses with memory override these.
    def state_dict(self) -> dict:
        check_is_fitted(self, "story_")
        return {"last_index": self.last_index_}

    def load_state(self, state: dict) -> None:
        check_is_fitted(self, "story_")
        self.last_index_ = int(state.get("last_index", 0))


