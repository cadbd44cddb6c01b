"""Storylines: loading, validation, scene windows and per-character splits."""

from __future__ import annotations

import json
import math
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

DEFAULT_WINDOW = 10

# Non-character speakers; they appear in storylines but are never split targets.
SPECIAL_CHARACTERS = frozenset({"Narration", "Environment"})


class StorylineError(ValueError):
    """Raised for malformed storyline files or invalid storyline queries."""


def canonical_name(name: str) -> str:
    return unicodedata.normalize("NFC", name)


@dataclass(frozen=True)
class Action:
    index: int
    character: str
    text: str
    episode: str | None = None

    def __post_init__(self):
        if self.index < 1:
            raise StorylineError(f"action index must be >= 1, got {self.index}")
        if not self.character:
            raise StorylineError(f"action {self.index}: empty character")
        if not self.text:
            raise StorylineError(f"action {self.index}: empty text")

    def render(self) -> str:
        return f"{self.character}: {self.text}"


@dataclass(frozen=True)
class Storyline:
    """An immutable, 1-indexed sequence of actions."""

    actions: tuple[Action, ...]
    characters: frozenset[str] = field(init=False)

    def __post_init__(self):
        actions = tuple(self.actions)
        if not actions:
            raise StorylineError("storyline must contain at least one action")
        for expected, action in enumerate(actions, start=1):
            if action.index != expected:
                raise StorylineError(
                    f"action indexes must run 1..N without gaps; "
                    f"found {action.index} at position {expected}"
                )
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "characters", frozenset(a.character for a in actions))

    @classmethod
    def from_records(cls, records: Iterable[tuple[str, str] | dict]) -> "Storyline":
        actions = []
        for i, rec in enumerate(records, start=1):
            if isinstance(rec, dict):
                actions.append(
                    Action(i, canonical_name(rec["character"]), rec["text"], rec.get("episode"))
                )
            else:
                character, text = rec
                actions.append(Action(i, canonical_name(character), text))
        return cls(tuple(actions))

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def n(self) -> int:
        return len(self.actions)

    def __getitem__(self, index: int) -> Action:
        """1-based access."""
        if not 1 <= index <= len(self.actions):
            raise IndexError(f"action index {index} out of range 1..{len(self.actions)}")
        return self.actions[index - 1]

    def span(self, start: int, end: int) -> list[Action]:
        """Actions ``start..end`` inclusive (1-based); empty when ``end < start``."""
        if end < start:
            return []
        if start < 1 or end > len(self.actions):
            raise IndexError(f"span [{start}, {end}] outside 1..{len(self.actions)}")
        return list(self.actions[start - 1 : end])

    def indices_of(self, character: str) -> list[int]:
        name = canonical_name(character)
        return [a.index for a in self.actions if a.character == name]


@dataclass(frozen=True)
class Scene:
    target_index: int
    window: tuple[Action, ...]
    target_character: str

    def render(self) -> str:
        return "\n".join(a.render() for a in self.window)


@dataclass(frozen=True)
class CharacterSplit:
    character: str
    train_cutoff: int
    train_indices: tuple[int, ...]
    test_indices: tuple[int, ...]


def _parse_line(line: str, lineno: int) -> dict:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise StorylineError(f"line {lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(record, dict):
        raise StorylineError(f"line {lineno}: expected a JSON object")
    for key in ("character", "text"):
        if key not in record:
            raise StorylineError(f"line {lineno}: missing field '{key}'")
        if not isinstance(record[key], str):
            raise StorylineError(f"line {lineno}: field '{key}' must be a string")
        if not record[key]:
            raise StorylineError(f"line {lineno}: field '{key}' is empty")
    episode = record.get("episode")
    if episode is not None and not isinstance(episode, str):
        raise StorylineError(f"line {lineno}: field 'episode' must be a string")
    return record


def load_storyline(path: str | Path) -> Storyline:
    """Read a JSON Lines storyline; indexes follow file order starting at 1."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            raise StorylineError(f"line {lineno}: blank line")
        records.append(_parse_line(line, lineno))
    if not records:
        raise StorylineError(f"{path}: empty storyline file")
    return Storyline.from_records(records)


def dumps_storyline(story: Storyline) -> str:
    lines = []
    for a in story.actions:
        rec = {"character": a.character, "text": a.text}
        if a.episode is not None:
            rec["episode"] = a.episode
        lines.append(json.dumps(rec, ensure_ascii=False))
    return "\n".join(lines) + "\n"


def save_storyline(story: Storyline, path: str | Path) -> None:
    Path(path).write_text(dumps_storyline(story), encoding="utf-8")


def build_scene(story: Storyline, i: int, w: int = DEFAULT_WINDOW) -> Scene:
    if not 1 <= i <= len(story):
        raise StorylineError(f"target index {i} out of range 1..{len(story)}")
    if w < 0:
        raise StorylineError(f"window size must be >= 0, got {w}")
    window = story.actions[max(0, i - 1 - w) : i - 1]
    return Scene(i, tuple(window), story[i].character)


def split_for_character(story: Storyline, character: str) -> CharacterSplit:
    """Half/half split of one character's actions; odd counts give train the extra one."""
    name = canonical_name(character)
    if name in SPECIAL_CHARACTERS:
        raise StorylineError(f"'{name}' is a special character and cannot be a split target")
    indices = story.indices_of(name)
    if len(indices) < 2:
        raise StorylineError(
            f"character '{name}' needs at least 2 actions to split, found {len(indices)}"
        )
    n_train = math.ceil(len(indices) / 2)
    return CharacterSplit(
        character=name,
        train_cutoff=indices[n_train - 1],
        train_indices=tuple(indices[:n_train]),
        test_indices=tuple(indices[n_train:]),
    )


def splittable_characters(story: Storyline) -> list[str]:
    counts: dict[str, int] = {}
    for a in story.actions:
        counts[a.character] = counts.get(a.character, 0) + 1
    return sorted(c for c, k in counts.items() if k >= 2 and c not in SPECIAL_CHARACTERS)


def render_actions(actions: Sequence[Action]) -> str:
    return "\n".join(a.render() for a in actions)
