"""Synthetic haystack storylines with one planted detail, and a probe that must recover it."""

from __future__ import annotations

import random
from dataclasses import asdict, dataclass

from .bank import Bookmark
from .baselines import ETARPA, ExemplarIndex, ricl_ground
from .engine import BookmarkRPA
from .gateway import Gateway, OracleRole, ScriptedBackend
from .lexical import concept_keywords, fold_text
from .prompts import NO_GROUNDING, UNKNOWN
from .scripted import default_rules
from .storyline import Storyline, build_scene

NEEDLE_KINDS = ("concept", "state", "behavioral")

SUBJECT = "Mika"
FILLER_CHARACTERS = ("Mika", "Ren", "Sora", "Yui", "Narration")

_FOOD = ("noodles", "curry", "dumplings", "pancakes", "soup", "bread")
_WEATHER = ("cloudy", "windy", "warm", "cold", "grey")
_SPOT = ("park", "school", "river", "bridge", "plaza", "canteen")
_SONG = ("chorus", "melody", "intro", "second verse")
_ITEM = ("umbrella", "notebook", "camera", "guitar pick", "snacks")
_ANIMAL = ("cat", "dog", "pigeon", "rabbit", "turtle")

_TEMPLATES = (
    "Pass me the {food}, please.",
    "The weather turns {weather} over the {spot}.",
    "I think we should practice the {song} again.",
    "Did anyone bring the {item}?",
    "That joke about the {animal} was so silly.",
    "Let's meet after class near the {spot}.",
    "This {food} tastes better than yesterday.",
    "The {animal} is sleeping in the sun again.",
    "My {item} is somewhere in this bag.",
    "Can we stop for {food} on the way?",
)

# (entity name, predicate, key token) for concept needles.
_ENTITIES = (
    ("Azure Key", "is the vault's only opener", "opener"),
    ("Ember Loom", "weaves cloth that never burns", "weaves"),
    ("Silent Bell", "rings only for the true heir", "heir"),
    ("Glass Orchard", "grows fruit made of frozen light", "frozen"),
    ("Iron Tide", "is the name of the smugglers' secret guild", "smugglers"),
)
_PLACES = ("harbor", "lighthouse", "library", "greenhouse", "station", "market", "bakery", "tower")
_MOVE_VERB = " moves to "
_FORBIDDEN_ALWAYS = ("moves to", "nervous", "shanty")


class HaystackError(ValueError):
    pass


@dataclass(frozen=True)
class HaystackSpec:
    filler_count: int = 1000
    kind: str = "concept"
    needle_depth: int = 500
    distractor_count: int = 3
    seed: int = 0
    control: bool = False

    def __post_init__(self):
        if self.kind not in NEEDLE_KINDS:
            raise HaystackError(f"unknown needle kind '{self.kind}'")
        if not 1 <= self.needle_depth <= self.filler_count:
            raise HaystackError("needle_depth must lie in 1..filler_count")
        if self.distractor_count < 0:
            raise HaystackError("distractor_count must be >= 0")


@dataclass(frozen=True)
class HaystackInstance:
    spec: HaystackSpec
    story: Storyline
    question: str
    key_token: str
    needle_index: int | None


def _filler_line(rng: random.Random) -> str:
    template = rng.choice(_TEMPLATES)
    return template.format(
        food=rng.choice(_FOOD), weather=rng.choice(_WEATHER), spot=rng.choice(_SPOT),
        song=rng.choice(_SONG), item=rng.choice(_ITEM), animal=rng.choice(_ANIMAL),
    )


def generate(spec: HaystackSpec) -> HaystackInstance:
    """Build the storyline: ``filler_count`` actions plus a final probe action by the subject."""
    rng = random.Random(f"haystack:{spec.seed}:{spec.kind}")
    records: list[tuple[str, str]] = [
        (rng.choice(FILLER_CHARACTERS), _filler_line(rng)) for _ in range(spec.filler_count)
    ]
    free = [i for i in range(1, spec.filler_count + 1) if i != spec.needle_depth]

    if spec.kind == "concept":
        name, predicate, key = rng.choice(_ENTITIES)
        question = f'What is the "{name}"?'
        forbidden = set(concept_keywords(question)) | {key}
        needle = ("Narration", f"The {name} {predicate}.")
        words = name.lower().split()
        distractors = [
            (rng.choice(FILLER_CHARACTERS[1:4]), f"I keep thinking about that {words[n % len(words)]} thing from before.")
            for n in range(spec.distractor_count)
        ]
    elif spec.kind == "state":
        start, key = rng.sample(_PLACES, 2)
        question = f"Where is {SUBJECT} now?"
        forbidden = {key}
        needle = ("Narration", f"{SUBJECT}{_MOVE_VERB}the {key}.")
        others = [p for p in _PLACES if p not in (start, key)]
        distractors = [
            ("Narration", f"{rng.choice(FILLER_CHARACTERS[1:4])}{_MOVE_VERB}the {rng.choice(others)}.")
            for _ in range(spec.distractor_count)
        ]
    else:
        key = "shanty"
        question = f"What does {SUBJECT} do when nervous?"
        forbidden = {key}
        needle = (SUBJECT, "When I get nervous I always hum an old sea shanty.")
        distractors = [
            (rng.choice(FILLER_CHARACTERS[1:4]), "I get nervous before every performance.")
            for _ in range(spec.distractor_count)
        ]

    for _, text in records:
        folded = fold_text(text)
        for term in set(forbidden) | set(_FORBIDDEN_ALWAYS):
            if term in folded:
                raise HaystackError(f"filler line {text!r} contains needle term {term!r}")

    needle_index = None
    if not spec.control:
        records[spec.needle_depth - 1] = needle
        needle_index = spec.needle_depth
        if spec.kind == "state" and spec.needle_depth > 1:
            early = rng.randint(1, spec.needle_depth - 1)
            records[early - 1] = ("Narration", f"{SUBJECT}{_MOVE_VERB}the {start}.")
            free = [i for i in free if i != early]
        for (who, text), slot in zip(distractors, rng.sample(free, min(len(free), len(distractors)))):
            records[slot - 1] = (who, text)
    records.append((SUBJECT, "Okay, let's keep going."))
    return HaystackInstance(spec, Storyline.from_records(records), question, key, needle_index)


def haystack_gateway(kind: str, question: str) -> Gateway:
    """Scripted gateway whose proposer always asks the probe question."""
    rules = default_rules()
    line = f"1. {kind} | {question}"
    rules[OracleRole.PROPOSER] = lambda req: line
    return Gateway(ScriptedBackend(rules))


@dataclass
class HaystackResult:
    spec: HaystackSpec
    method: str
    success: bool
    answer: str
    needle_index: int | None
    sync_point: int | None = None
    spans: list[tuple[int, int]] | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spec"] = asdict(self.spec)
        return d


def _contains(text: str, token: str) -> bool:
    return token in fold_text(text)


def run_haystack(spec: HaystackSpec, method: str = "bookmarks", gateway: Gateway | None = None) -> HaystackResult:
    inst = generate(spec)
    probe = len(inst.story)
    gw = gateway or haystack_gateway(spec.kind, inst.question)

    if method == "bookmarks":
        est = BookmarkRPA(gw, k=1).fit(inst.story)
        trace = est.step(probe)
        prop = trace.proposals[0]
        if prop.bookmark_id is None or prop.outcome == "error":
            return HaystackResult(spec, method, False, prop.error or "", inst.needle_index)
        b: Bookmark = est.bank_[prop.bookmark_id]
        answer = b.answer
        spans = list(b.aux.spans) if b.kind == "concept" else None
        result = HaystackResult(spec, method, False, answer, inst.needle_index, b.sync_point, spans)
    elif method == "ricl":
        index = ExemplarIndex(SUBJECT)
        index.extend_to(inst.story, probe)
        answer = ricl_ground(build_scene(inst.story, probe), index) or NO_GROUNDING
        result = HaystackResult(spec, method, False, answer, inst.needle_index)
    elif method == "eta":
        est = ETARPA(gw).fit(inst.story)
        answer = est.observe(SUBJECT, probe).text or NO_GROUNDING
        result = HaystackResult(spec, method, False, answer, inst.needle_index)
    elif method == "vanilla":
        result = HaystackResult(spec, method, False, NO_GROUNDING, inst.needle_index)
    else:
        raise HaystackError(f"unknown method '{method}'")

    if spec.control:
        result.success = (
            result.answer == UNKNOWN if method == "bookmarks" else not _contains(result.answer, inst.key_token)
        )
    else:
        result.success = _contains(result.answer, inst.key_token)
    return result


def run_suite(
    kinds=NEEDLE_KINDS,
    depths=(100, 500, 900),
    seeds=range(10),
    filler_count: int = 1000,
    method: str = "bookmarks",
    control: bool = False,
    distractor_count: int = 3,
) -> list[HaystackResult]:
    out = []
    for kind in kinds:
        for depth in depths:
            for seed in seeds:
                spec = HaystackSpec(filler_count, kind, depth, distractor_count, seed, control)
                out.append(run_haystack(spec, method))
    return out

