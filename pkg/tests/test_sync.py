import pytest
from hypothesis import given
from hypothesis import strategies as st

from bookmark_memory.bank import MemoryBank, create_bookmark
from bookmark_memory.prompts import Oracles
from bookmark_memory.storyline import Storyline
from bookmark_memory.sync import (
    PartialStateSync,
    SyncError,
    SyncRequest,
    SyncSettings,
    hit_spans,
    merge_spans,
    sync_behavioral,
    sync_concept,
    sync_state,
    synchronize,
)

from conftest import scripted_gateway, synthetic_story


def union_segments(spans):
    """Brute-force oracle: collect every covered index, then cut at gaps."""
    covered = sorted({i for a, b in spans for i in range(a, b + 1)})
    out = []
    for i in covered:
        if out and i == out[-1][1] + 1:
            out[-1][1] = i
        else:
            out.append([i, i])
    return [tuple(s) for s in out]


class CountingTransitioner:
    """Associative: the answer is the concatenation of all chunk indexes seen."""

    def __init__(self, fail_on_call=None):
        self.chunks = []
        self.fail_on_call = fail_on_call

    def transition_state(self, question, answer, chunk):
        self.chunks.append([a.index for a in chunk])
        if self.fail_on_call == len(self.chunks):
            raise RuntimeError("backend down")
        prefix = "" if answer == "Unknown" else answer
        return prefix + "".join(f"[{a.index}]" for a in chunk)


class LocationTransitioner:
    def transition_state(self, question, answer, chunk):
        for a in chunk:
            for place in ("school", "studio"):
                if place in a.text:
                    answer = place
        return answer


class EvidenceScript:
    def __init__(self, match_indices=()):
        self.match_indices = set(match_indices)
        self.filter_calls = []
        self.summaries = []

    def filter_evidence(self, question, subject, action, context):
        self.filter_calls.append((action.index, [a.index for a in context]))
        return action.index in self.match_indices

    def summarize_behavior(self, question, subject, snippets):
        self.summaries.append(list(snippets))
        return f"{len(snippets)} snippets"


class ConceptScript:
    def __init__(self):
        self.calls = []

    def summarize_concept(self, question, answer, passages, keywords=()):
        self.calls.append(list(passages))
        return f"{answer}+{len(passages)}"


def test_merge_examples():
    assert merge_spans([(3, 7), (5, 9)]) == [(3, 9)]
    assert hit_spans([3, 4, 12], 1, 1, 100) == [(2, 5), (11, 13)]
    assert hit_spans([3, 4, 12], 1, 1, 100) == union_segments([(2, 4), (3, 5), (11, 13)])
    assert merge_spans([(1, 2), (3, 4)]) == [(1, 4)]
    assert merge_spans([(1, 2), (4, 5)]) == [(1, 2), (4, 5)]
    assert merge_spans([]) == []


_span = st.tuples(st.integers(1, 60), st.integers(0, 8)).map(lambda t: (t[0], t[0] + t[1]))


@given(st.lists(_span, max_size=12))
def test_merge_equals_union(spans):
    assert merge_spans(spans) == union_segments(spans)


@given(st.lists(_span, max_size=8), st.lists(_span, max_size=8))
def test_merge_is_order_free(a, b):
    assert merge_spans(merge_spans(a) + b) == merge_spans(a + b)


def test_state_chunk_calls():
    story = synthetic_story(45)
    t = CountingTransitioner()
    answer, boundary = sync_state("q", "Unknown", 0, story.span(1, 45), t, chunk_size=20)
    assert [len(c) for c in t.chunks] == [20, 20, 5]
    assert boundary == 45
    assert sync_state("q", "kept", 7, [], t, 20) == ("kept", 7)


def test_state_location_fixture():
    story = Storyline.from_records([
        ("Narration", "Kasumi walks to school."),
        ("Arisa", "Hurry up."),
        ("Narration", "Later Kasumi arrives at the studio."),
    ])
    answer, _ = sync_state("Where is Kasumi?", "Unknown", 0, story.span(1, 3), LocationTransitioner(), 2)
    assert answer == "studio"


def test_state_chunked_equals_single_shot():
    story = synthetic_story(57)
    one = CountingTransitioner()
    many = CountingTransitioner()
    single, _ = sync_state("q", "Unknown", 0, story.span(1, 57), one, chunk_size=57)
    chunked, _ = sync_state("q", "Unknown", 0, story.span(1, 57), many, chunk_size=20)
    assert single == chunked
    assert len(one.chunks) == 1 and len(many.chunks) == 3


@given(st.integers(1, 80), st.integers(1, 30))
def test_state_boundary_is_last_index(n, chunk):
    story = synthetic_story(n)
    t = CountingTransitioner()
    _, boundary = sync_state("q", "Unknown", 0, story.span(1, n), t, chunk)
    assert boundary == n
    assert sum(t.chunks, []) == list(range(1, n + 1))
    assert len(t.chunks) == -(-n // chunk)


def test_state_failure_keeps_durable_progress():
    story = synthetic_story(50)
    bank = MemoryBank()
    b = create_bookmark(bank, "Where is Ann?", "state")
    t = CountingTransitioner(fail_on_call=3)
    with pytest.raises(PartialStateSync) as err:
        synchronize(SyncRequest(b, story, 50, SyncSettings(chunk_size=20)), t)
    assert isinstance(err.value.__cause__, RuntimeError)
    assert b.sync_point == 40 and b.aux.boundary == 40
    assert b.answer == "".join(f"[{i}]" for i in range(1, 41))


def _behavior_story():
    # Arisa at 2, 4, 7, 9; others elsewhere.
    who = {2: "Arisa", 4: "Arisa", 7: "Arisa", 9: "Arisa"}
    return Storyline.from_records([(who.get(i, "Kasumi"), f"line {i}") for i in range(1, 11)])


def test_behavioral_counts_and_context():
    story = _behavior_story()
    oracle = EvidenceScript(match_indices={4, 9})
    answer, evidence = sync_behavioral("How does Arisa react?", "Arisa", "Unknown", [], story.span(1, 10), oracle, window=5)
    assert [i for i, _ in oracle.filter_calls] == [2, 4, 7, 9]
    assert [i for i, _ in evidence] == [4, 9]
    assert len(oracle.summaries) == 1 and answer == "2 snippets"
    # W_b preceding actions, never past the start of the suffix
    assert dict(oracle.filter_calls)[2] == [1]
    assert dict(oracle.filter_calls)[9] == [4, 5, 6, 7, 8]


def test_behavioral_no_subject_actions():
    story = Storyline.from_records([("Kasumi", f"l{i}") for i in range(5)])
    oracle = EvidenceScript()
    assert sync_behavioral("q", "Arisa", "prior", [], story.span(1, 5), oracle) == ("prior", [])
    assert oracle.filter_calls == []


def test_behavioral_evidence_cap():
    old = [(i, f"old {i}") for i in range(1, 26)]
    story = Storyline.from_records([("Kasumi", f"l{i}") for i in range(1, 26)] + [("Arisa", "new")])
    oracle = EvidenceScript(match_indices={26})
    _, evidence = sync_behavioral("q", "Arisa", "y", old, story.span(26, 26), oracle, cap=20)
    assert len(evidence) == 26
    assert oracle.summaries[0] == [f"old {i}" for i in range(7, 26)] + ["new"]


def test_concept_spans_and_summary():
    texts = {5: "The Star Beat is a song.", 7: "Kasumi hums Star Beat."}
    story = Storyline.from_records([("Narration", texts.get(i, f"filler {i}")) for i in range(1, 21)])
    oracle = ConceptScript()
    answer, spans = sync_concept("q", ["star beat"], "Unknown", [], story.span(1, 20), oracle, radius=2)
    assert spans == [(3, 9)]
    assert len(oracle.calls) == 1 and "Star Beat is a song" in oracle.calls[0][0]
    answer2, spans2 = sync_concept("q", ["nothing"], answer, spans, story.span(1, 20), oracle)
    assert (answer2, spans2) == (answer, spans) and len(oracle.calls) == 1


def test_concept_spans_clip_to_suffix():
    story = Storyline.from_records([("Narration", "star" if i in (11, 20) else f"f{i}") for i in range(1, 21)])
    _, spans = sync_concept("q", ["star"], "Unknown", [(1, 3)], story.span(11, 20), ConceptScript(), radius=2)
    assert spans == [(1, 3), (11, 13), (18, 20)]


def test_synchronize_noop_and_bounds():
    story = synthetic_story(10)
    bank = MemoryBank()
    b = create_bookmark(bank, "Where is Ann?", "state")
    b.sync_point = 6
    assert synchronize(SyncRequest(b, story, 6), CountingTransitioner()).sync_point == 6
    with pytest.raises(ValueError):
        synchronize(SyncRequest(b, story, 5), CountingTransitioner())
    with pytest.raises(ValueError):
        synchronize(SyncRequest(b, story, 11), CountingTransitioner())


def test_synchronize_behavioral_without_subject_actions_advances_point():
    story = Storyline.from_records([("Kasumi", f"l{i}") for i in range(8)])
    bank = MemoryBank()
    b = create_bookmark(bank, "How does Arisa react?", "behavioral", "Arisa")
    synchronize(SyncRequest(b, story, 8), EvidenceScript())
    assert (b.answer, b.sync_point) == ("Unknown", 8)


def test_synchronize_wraps_summarizer_failure():
    class Broken(ConceptScript):
        def summarize_concept(self, *a, **k):
            raise RuntimeError("nope")

    story = Storyline.from_records([("Narration", "star")] * 3)
    bank = MemoryBank()
    b = create_bookmark(bank, "What is a star?", "concept")
    with pytest.raises(SyncError):
        synchronize(SyncRequest(b, story, 3), Broken())
    assert (b.answer, b.sync_point, b.aux.spans) == ("Unknown", 0, [])


def test_scripted_transitioner_through_gateway():
    story = Storyline.from_records([
        ("Narration", "Kasumi moves to the school."),
        ("Arisa", "Wait for me."),
        ("Narration", "Kasumi goes to the studio."),
    ])
    bank = MemoryBank()
    b = create_bookmark(bank, "Where is Kasumi now?", "state")
    synchronize(SyncRequest(b, story, 3, SyncSettings(chunk_size=2)), Oracles(scripted_gateway()))
    assert (b.answer, b.sync_point, b.aux.boundary) == ("studio", 3, 3)


def test_settings_validation():
    with pytest.raises(ValueError):
        SyncSettings(chunk_size=0)
    with pytest.raises(ValueError):
        SyncSettings(evidence_cap=0)
