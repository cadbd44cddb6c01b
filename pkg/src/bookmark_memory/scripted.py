"""Deterministic rule set for the scripted backend.

These rules stand in for LLM calls in tests, desk-scale runs and the
haystack suite. They read the structured ``fields`` attached to each
request rather than parsing prompt text, and they are pure functions of
the request.
"""

from __future__ import annotations

import re
from collections import Counter

from .gateway import OracleRequest, OracleRole, ScriptRule
from .lexical import SCAFFOLD_WORDS, STOP_WORDS, fold_text, normalize_tokens, overlap_score
from .prompts import UNKNOWN
from .storyline import SPECIAL_CHARACTERS

_MOVE_RE = re.compile(
    r"\b([A-Z][\w-]*) (?:moves|goes|walks|runs|heads|returns|travels) to (?:the )?([\w-]+(?: [\w-]+)?)"
)
_CAP_RE = re.compile(r"\b([A-Z][a-z]{2,})\b")

# Words that make a state question ask about a character's location.
_LOCATION_CUES = frozenset({"where", "location", "located"})

_QUERY_NOISE = SCAFFOLD_WORDS | {"usually", "tend", "tends", "right", "react", "respond", "does"}


def _content(question: str, drop: set[str] | frozenset[str] = frozenset()) -> set[str]:
    return {t for t in normalize_tokens(question) if t not in _QUERY_NOISE and t not in drop}


def propose(req: OracleRequest) -> str:
    character = req.fields["character"]
    window = req.fields.get("window", [])
    others = [c for _, c, _ in reversed(window) if c != character and c not in SPECIAL_CHARACTERS]
    names = {c for _, c, _ in window} | {character}
    lines = [
        f"state | Where is {character} right now?",
        f"state | What is {character} currently trying to do?",
        f"behavioral | How does {character} usually speak?",
    ]
    if others:
        lines.insert(1, f"behavioral | How does {character} react to {others[0]}?")
    caps: Counter[str] = Counter()
    for _, _, text in window:
        for word in _CAP_RE.findall(text):
            if word not in names and word.lower() not in STOP_WORDS:
                caps[word] += 1
    if caps:
        entity = min(caps.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        lines.insert(2, f"concept | What is {entity}?")
    k = int(req.fields.get("k", 5))
    return "\n".join(f"{n}. {line}" for n, line in enumerate(lines[:k], start=1))


def relation(req: OracleRequest) -> str:
    q = normalize_tokens(req.fields["query"])
    c = normalize_tokens(req.fields["candidate"])
    if q == c:
        return "reuse"
    if overlap_score(q, c) >= 0.5:
        return "derive"
    return "none"


def derive(req: OracleRequest) -> str:
    return req.fields["parent_answer"]


def _subject_tokens(question: str) -> set[str]:
    return {m.lower() for m in _CAP_RE.findall(question)}


def transition_state(req: OracleRequest) -> str:
    question = req.fields["question"]
    answer = req.fields["answer"]
    chunk = req.fields["chunk"]
    qtokens = normalize_tokens(question)
    if qtokens & _LOCATION_CUES or question.lower().startswith("where"):
        subjects = _subject_tokens(question)
        for _, _, text in chunk:
            for who, place in _MOVE_RE.findall(text):
                if who.lower() in subjects:
                    answer = place
        return answer
    content = _content(question)
    for _, character, text in chunk:
        if content & normalize_tokens(text):
            answer = f"{character}: {text}"
    return answer


def filter_evidence(req: OracleRequest) -> str:
    subject = req.fields["subject"]
    content = _content(req.fields["question"], drop={t for t in normalize_tokens(subject)})
    text = req.fields["action"][2]
    return "yes" if content & normalize_tokens(text) else "no"


def summarize_behavior(req: OracleRequest) -> str:
    snippets = req.fields["snippets"]
    return f"{req.fields['subject']} tends to: " + " / ".join(snippets[-3:])


def summarize_concept(req: OracleRequest) -> str:
    keywords = req.fields.get("keywords", [])
    prior = [] if req.fields["answer"] == UNKNOWN else req.fields["answer"].split("\n")
    lines = list(prior)
    for passage in req.fields["passages"]:
        lines.extend(passage.split("\n"))
    scored = []
    for order, line in enumerate(lines):
        folded = fold_text(line)
        n = sum(1 for k in keywords if k in folded)
        if n:
            scored.append((-n, -order, line))
    keep = []
    for _, _, line in sorted(scored):
        if line not in keep:
            keep.append(line)
        if len(keep) == 3:
            break
    return "\n".join(keep) if keep else req.fields["answer"]


def act(req: OracleRequest) -> str:
    character = req.fields["character"]
    window = req.fields.get("window", [])
    for _, who, text in reversed(window):
        if who == character:
            return text
    if window:
        return window[-1][2]
    return "..."


def judge_em(req: OracleRequest) -> str:
    a = normalize_tokens(req.fields["predicted"])
    b = normalize_tokens(req.fields["reference"])
    if req.fields["predicted"].strip() == req.fields["reference"].strip():
        return "yes"
    return "yes" if overlap_score(a, b) >= 0.5 else "no"


def update_profile(req: OracleRequest) -> str:
    words = req.fields["action"][2].split()[:6]
    entries = [e for e in req.fields["profile"].split("; ") if e]
    entries.append(" ".join(words))
    return "; ".join(entries[-12:])


def default_rules() -> dict[OracleRole, ScriptRule]:
    return {
        OracleRole.PROPOSER: propose,
        OracleRole.RELATION_JUDGE: relation,
        OracleRole.DERIVE_INITIALIZER: derive,
        OracleRole.STATE_TRANSITIONER: transition_state,
        OracleRole.EVIDENCE_FILTER: filter_evidence,
        OracleRole.BEHAVIOR_SUMMARIZER: summarize_behavior,
        OracleRole.CONCEPT_SUMMARIZER: summarize_concept,
        OracleRole.ACTOR: act,
        OracleRole.EM_JUDGE: judge_em,
        OracleRole.PROFILE_UPDATER: update_profile,
    }
