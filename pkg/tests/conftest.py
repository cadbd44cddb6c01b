from __future__ import annotations

import random
import shutil
from pathlib import Path

import pytest

from bookmark_memory.gateway import Gateway, OracleRole, ScriptedBackend
from bookmark_memory.scripted import default_rules
from bookmark_memory.storyline import Storyline

FIXTURES = Path(__file__).parent / "fixtures"

_WORDS = (
    "apple bridge candle drum ember fiddle garden harbor island jacket kettle lantern meadow "
    "needle orchard pebble quilt river saddle tulip umbrella violin willow yarn zephyr"
).split()


def synthetic_story(n: int, characters=("Ann", "Ben", "Cid", "Narration"), seed: int = 0) -> Storyline:
    """Storyline of ``n`` actions whose texts are pairwise distinct (each carries its index)."""
    rng = random.Random(seed)
    records = []
    for i in range(1, n + 1):
        words = " ".join(rng.choice(_WORDS) for _ in range(4))
        records.append((rng.choice(characters), f"Line {i:05d} about the {words}."))
    return Storyline.from_records(records)


def scripted_gateway(**overrides) -> Gateway:
    rules = default_rules()
    for role, rule in overrides.items():
        rules[OracleRole(role)] = rule
    return Gateway(ScriptedBackend(rules))


@pytest.fixture
def gateway() -> Gateway:
    return scripted_gateway()


@pytest.fixture
def run_dir(tmp_path) -> Path:
    """A scratch copy of the end-to-end fixture (storyline + scripted config)."""
    for name in ("popipa.jsonl", "scripted.cfg"):
        shutil.copy(FIXTURES / name, tmp_path / name)
    return tmp_path


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion; printed in the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(number: int, name: str, ok: bool, detail: str) -> bool:
        line = f"AC{number} {name}: {'PASS' if ok else 'FAIL'} | {detail}"
        lines.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
