"""Comparison methods: ungrounded, retrieved exemplars, and incremental profiling."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

from .bank import Bookmark
from .base import RPAEstimator, StepTrace
from .gateway import Gateway
from .lexical import normalize_tokens, overlap_score
from .prompts import NO_GROUNDING, Oracles
from .storyline import DEFAULT_WINDOW, Action, Scene, Storyline, build_scene
from .sync import DEFAULT_CHUNK_SIZE, SyncRequest, SyncSettings, synchronize

log = logging.getLogger(__name__)

DEFAULT_RICL_K = 8


class VanillaRPA(RPAEstimator):
    """Scene-only prediction; one actor call per step."""

    method = "vanilla"

    def __init__(self, oracle: Gateway, window: int = DEFAULT_WINDOW):
        super().__init__(oracle, window)

    def _predict_step(self, scene: Scene) -> StepTrace:
        return _act(self, scene, NO_GROUNDING)


def vanilla_predict(scene: Scene, oracle: Oracles) -> str:
    return oracle.act(scene, NO_GROUNDING)


def _act(est: RPAEstimator, scene: Scene, grounding: str) -> StepTrace:
    trace = StepTrace(scene.target_index, scene.target_character, est.method, None)
    try:
        trace.predicted = est.oracles_.act(scene, grounding)
    except Exception as exc:
        trace.error = f"actor: {type(exc).__name__}: {exc}"
    return trace


# -- RICL --------------------------------------------------------------------


@dataclass(frozen=True)
class Exemplar:
    scene_text: str
    action_text: str
    index: int
    tokens: frozenset[str]


@dataclass
class ExemplarIndex:
    """Past (scene, action) pairs of one character, all strictly before ``upto``."""

    character: str
    window: int = DEFAULT_WINDOW
    records: list[Exemplar] = field(default_factory=list)
    upto: int = 0

    def extend_to(self, story: Storyline, i: int) -> None:
        """Index the character's actions with storyline index < ``i``."""
        for action in story.span(self.upto + 1, i - 1):
            if action.character == self.character:
                scene = build_scene(story, action.index, self.window)
                text = scene.render()
                self.records.append(Exemplar(text, action.text, action.index, normalize_tokens(text)))
        self.upto = max(self.upto, i - 1)


def ricl_ground(scene: Scene, index: ExemplarIndex, k: int = DEFAULT_RICL_K) -> str:
    """Top-``k`` exemplars by scene token overlap, ties broken by recency."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not index.records:
        return ""
    blocks = [f"Past scenes and how {index.character} acted:"]
    for n, r in enumerate(_rank(scene, index)[:k], start=1):
        blocks.append(f"[Example {n}]\nScene:\n{r.scene_text or '(start of storyline)'}\nAction: {index.character}: {r.action_text}")
    return "\n\n".join(blocks)


def _rank(scene: Scene, index: ExemplarIndex) -> list[Exemplar]:
    q = normalize_tokens(scene.render())
    return sorted(index.records, key=lambda r: (-overlap_score(q, r.tokens), -r.index))


def ricl_ranking(scene: Scene, index: ExemplarIndex, k: int = DEFAULT_RICL_K) -> list[int]:
    """Storyline indexes of the exemplars ``ricl_ground`` would show, in order."""
    return [r.index for r in _rank(scene, index)[:k]]


class RICLRPA(RPAEstimator):
    method = "ricl"

    def __init__(self, oracle: Gateway, window: int = DEFAULT_WINDOW, k: int = DEFAULT_RICL_K):
        super().__init__(oracle, window)
        self.k = k

    def _fit_state(self):
        self.indexes_: dict[str, ExemplarIndex] = {}

    def _predict_step(self, scene: Scene) -> StepTrace:
        index = self.indexes_.setdefault(
            scene.target_character, ExemplarIndex(scene.target_character, self.window)
        )
        index.extend_to(self.story_, scene.target_index)
        grounding = ricl_ground(scene, index, self.k) or NO_GROUNDING
        return _act(self, scene, grounding)


# -- ETA ---------------------------------------------------------------------


@dataclass(frozen=True)
class Profile:
    character: str
    text: str = ""
    last_update_index: int = 0


def eta_update(profile: Profile, action: Action, context: list[Action], oracle: Oracles) -> Profile:
    if action.character != profile.character:
        raise ValueError(
            f"action {action.index} belongs to {action.character!r}, not {profile.character!r}"
        )
    text = oracle.update_profile(profile.character, profile.text, action, context)
    return replace(profile, text=text, last_update_index=action.index)


class ETARPA(RPAEstimator):
    """Extract-and-aggregate profiling: one profile update per observed character action."""

    method = "eta"

    def _fit_state(self):
        self.profiles_: dict[str, Profile] = {}
        self.scanned_: dict[str, int] = {}

    def observe(self, character: str, i: int) -> Profile:
        """Fold every action of ``character`` before ``i`` into its profile."""
        profile = self.profiles_.get(character, Profile(character))
        start = self.scanned_.get(character, 0) + 1
        for action in self.story_.span(start, i - 1):
            if action.character != character:
                continue
            context = self.story_.span(max(1, action.index - self.window), action.index - 1)
            try:
                profile = eta_update(profile, action, context, self.oracles_)
            except Exception as exc:
                log.warning("ETA update at %d failed, profile unchanged: %s", action.index, exc)
        self.profiles_[character] = profile
        self.scanned_[character] = max(start - 1, i - 1)
        return profile

    def _predict_step(self, scene: Scene) -> StepTrace:
        profile = self.observe(scene.target_character, scene.target_index)
        grounding = (
            f"Character profile of {profile.character}:\n{profile.text}" if profile.text else NO_GROUNDING
        )
        return _act(self, scene, grounding)

    def state_dict(self) -> dict:
        state = super().state_dict()
        state["profiles"] = {
            c: {"text": p.text, "last_update_index": p.last_update_index, "scanned": self.scanned_.get(c, 0)}
            for c, p in self.profiles_.items()
        }
        return state

    def load_state(self, state: dict) -> None:
        super().load_state(state)
        for c, raw in state.get("profiles", {}).items():
            self.profiles_[c] = Profile(c, raw["text"], raw["last_update_index"])
            self.scanned_[c] = raw["scanned"]


def ibu_sync_behavioral(
    bookmark: Bookmark,
    story: Storyline,
    target: int,
    oracle,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
) -> Bookmark:
    """Ablation: advance a behavioral bookmark by chunked state transitions, not evidence."""
    if bookmark.kind != "behavioral":
        raise ValueError("incremental behavior update applies to behavioral bookmarks only")
    settings = SyncSettings(chunk_size=chunk_size, incremental_behavior=True)
    return synchronize(SyncRequest(bookmark, story, target, settings), oracle)

