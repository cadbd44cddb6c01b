"""Token normalization and overlap scoring shared by bookmark matching and RICL."""

from __future__ import annotations

import re
import unicodedata

# Fixed English function-word list. Matching must be deterministic, so this
# list is part of the public behaviour; change it only with a version bump.
STOP_WORDS = frozenset(
    """
    a about above after again against all am an and any are as at
    be because been before being below between both but by
    can cannot could
    did do does doing done down during
    each either
    few for from further
    get gets got
    had has have having he her here hers herself him himself his how
    i if in into is it its itself
    just
    let lets
    me more most much must my myself
    no nor not now
    of off on once only or other ought our ours ourselves out over own
    same shall she should so some such
    than that the their theirs them themselves then there these they this those
    through to too
    under until up upon us
    very
    was we were what when where which while who whom whose why will with
    would
    yet you your yours yourself yourselves
    also many may might per since still via whether within without
    dont doesnt didnt isnt arent wasnt werent cant couldnt wont wouldnt
    shouldnt im ive id youre youve theyre weve hes shes thats theres
    s t ll re ve d m
    """.split()
)

_TOKEN_RE = re.compile(r"[a-z0-9]+(?:'[a-z0-9]+)*")


def _fold(text: str) -> str:
    text = unicodedata.normalize("NFKC", text).lower()
    return text.replace("’", "'").replace("‘", "'")


def tokenize(text: str) -> list[str]:
    """Lowercased word tokens with possessive ``'s`` removed and apostrophes dropped."""
    out = []
    for tok in _TOKEN_RE.findall(_fold(text)):
        if tok.endswith("'s"):
            tok = tok[:-2]
        out.append(tok.replace("'", ""))
    return [t for t in out if t]


def normalize_tokens(text: str) -> frozenset[str]:
    return frozenset(t for t in tokenize(text) if t not in STOP_WORDS)


def overlap_score(a: frozenset[str] | set[str], b: frozenset[str] | set[str]) -> float:
    """Jaccard similarity; 0.0 when both sets are empty."""
    if not a and not b:
        return 0.0
    return len(a & b) / len(a | b)


def fold_text(text: str) -> str:
    """Case-folded text used for substring keyword matching."""
    return _fold(text)


# Question scaffolding that carries no content for keyword search.
SCAFFOLD_WORDS = frozenset(
    """
    mean means meaning meant refer refers referred definition define defined
    describe described description explain known called exactly really
    happen happened happens know tell kind sort type thing things
    currently current
    """.split()
)

_QUOTED_RE = re.compile(r'"([^"]+)"|“([^”]+)”')


def concept_keywords(question: str) -> list[str]:
    """Keywords for concept search: content tokens plus quoted phrases verbatim.

    Returned sorted (phrases and tokens interleaved alphabetically) so that
    keyword lists are stable across runs.
    """
    words = {t for t in normalize_tokens(question) if t not in SCAFFOLD_WORDS}
    for a, b in _QUOTED_RE.findall(question):
        phrase = fold_text(a or b).strip()
        if phrase:
            words.add(phrase)
    return sorted(words)
