"""Prompt templates, output grammars and the role-level oracle client.

Templates are plain ``str.format`` strings and are versioned: any edit that
changes rendered bytes must bump ``TEMPLATE_VERSION`` because cached
responses are keyed on the exact prompt.

Output grammars
---------------
Proposer
    One proposal per line: ``<n>. <kind> | <question>`` where ``kind`` is
    ``concept``, ``state`` or ``behavioral`` (case-insensitive) and ``n`` is
    any positive integer (``1)`` is accepted as well as ``1.``).  Lines that
    do not match are dropped.
RelationJudge
    Exactly one of ``reuse``, ``derive``, ``none``.
EvidenceFilter, EMJudge
    Exactly ``yes`` or ``no``.

Label parsing trims whitespace, case-folds and strips surrounding
punctuation (``"Yes."`` parses as ``yes``); anything else is negative.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Sequence

from .gateway import Gateway, OracleRequest, OracleRole
from .storyline import Action, Scene, render_actions

log = logging.getLogger(__name__)

TEMPLATE_VERSION = "1"

KINDS = ("concept", "state", "behavioral")

UNKNOWN = "Unknown"

PROPOSE_TEMPLATE = """\
You are preparing memory lookups that help predict {character}'s next action.

Scene (most recent last):
{scene}

Write up to {k} questions whose answers, drawn from the earlier storyline, would \
help predict what {character} does next. Tag each with a search type:
- behavioral: a general pattern of how a character tends to act or react (phrase it so later scenes can also supply evidence)
- state: something true at the current story point (location, relationship, current goal)
- concept: a named entity or concept that may recur or evolve

Answer with one line per question in the form:
<number>. <behavioral|state|concept> | <question>
"""

RELATION_TEMPLATE = """\
Existing memory question ({kind}): {candidate}
New question ({kind}): {query}

Relation of the new question to the existing memory:
- reuse: both ask for essentially the same maintained information
- derive: not the same, but the existing answer is a useful starting point
- none: not sufficiently related

Existing answer: {answer}

Answer with exactly one word: reuse, derive, or none.
"""

DERIVE_TEMPLATE = """\
A memory question and its current answer:
Q: {parent_question}
A: {parent_answer}

Using only that answer, give the best current answer to a related question. \
If the answer gives nothing to go on, reply exactly "Unknown".
Q: {query}
A:"""

STATE_TEMPLATE = """\
Question: {question}
Answer so far: {answer}

New storyline passage:
{chunk}

Update the answer so it states what is true at the end of the passage. \
Keep it short. Reply "Unknown" if it is still not established.
Updated answer:"""

EVIDENCE_TEMPLATE = """\
Behavioral question about {subject}: {question}

Context:
{context}

Action by {subject}:
{action}

Does this action give direct evidence for the question? Answer yes or no.
"""

BEHAVIOR_SUMMARY_TEMPLATE = """\
Behavioral question about {subject}: {question}

Evidence actions (oldest first):
{evidence}

Summarize the behavioral pattern in one or two sentences.
Summary:"""

CONCEPT_SUMMARY_TEMPLATE = """\
Question: {question}
Current answer: {answer}

New passages mentioning it:
{passages}

Give an updated answer that folds in anything new. Keep it short.
Updated answer:"""

ACTOR_TEMPLATE = """\
You are role-playing {character}.

{grounding}

Scene (most recent last):
{scene}

What is {character}'s next action in response to the current scene? \
Reply with the action only.
{character}:"""

EM_TEMPLATE = """\
Reference action: {reference}
Predicted action: {predicted}

Is the key move of the predicted action the same as the reference? Answer yes or no.
"""

PROFILE_TEMPLATE = """\
Current profile of {character}:
{profile}

Context:
{context}

New action by {character}:
{action}

Extract what this action reveals about {character} and merge it into the profile. \
Return the full updated profile.
Updated profile:"""

NO_GROUNDING = "(No memory notes for this scene.)"

_PROPOSAL_RE = re.compile(
    r"^\s*\d+\s*[.)]\s*(concept|state|behavioral)\s*\|\s*(\S.*?)\s*$", re.IGNORECASE
)


@dataclass(frozen=True)
class ParsedProposals:
    items: tuple[tuple[str, str], ...]
    dropped: tuple[str, ...]


def parse_proposals(text: str, k: int) -> ParsedProposals:
    """Parse proposer output; keeps the first ``k`` well-formed lines."""
    items: list[tuple[str, str]] = []
    dropped: list[str] = []
    for line in text.splitlines():
        if not line.strip():
            continue
        m = _PROPOSAL_RE.match(line)
        if m is None:
            dropped.append(line)
            log.info("dropped malformed proposal line: %r", line)
            continue
        if len(items) < k:
            items.append((m.group(2), m.group(1).lower()))
    return ParsedProposals(tuple(items), tuple(dropped))


def _answer(text: str) -> str:
    text = text.strip()
    return text if text else UNKNOWN


class Oracles:
    """Typed entry points for each oracle role, rendering the templates above."""

    def __init__(self, gateway: Gateway):
        self.gateway = gateway

    def _req(self, role: OracleRole, prompt: str, **fields) -> OracleRequest:
        return OracleRequest(role=role, prompt=prompt, fields=fields)

    def propose(self, scene: Scene, k: int) -> str:
        prompt = PROPOSE_TEMPLATE.format(
            character=scene.target_character,
            scene=scene.render() or "(start of storyline)",
            k=k,
        )
        return self.gateway.call(
            self._req(
                OracleRole.PROPOSER,
                prompt,
                character=scene.target_character,
                window=[(a.index, a.character, a.text) for a in scene.window],
                k=k,
            )
        )

    def relation(self, query: str, kind: str, candidate_question: str, candidate_answer: str) -> str:
        prompt = RELATION_TEMPLATE.format(
            kind=kind, candidate=candidate_question, query=query, answer=candidate_answer
        )
        req = self._req(
            OracleRole.RELATION_JUDGE,
            prompt,
            query=query,
            kind=kind,
            candidate=candidate_question,
        )
        return self.gateway.classify(req, ("reuse", "derive", "none"), "none")

    def derive(self, parent_question: str, parent_answer: str, query: str) -> str:
        prompt = DERIVE_TEMPLATE.format(
            parent_question=parent_question, parent_answer=parent_answer, query=query
        )
        return _answer(
            self.gateway.call(
                self._req(
                    OracleRole.DERIVE_INITIALIZER,
                    prompt,
                    parent_question=parent_question,
                    parent_answer=parent_answer,
                    query=query,
                )
            )
        )

    def transition_state(self, question: str, answer: str, chunk: Sequence[Action]) -> str:
        prompt = STATE_TEMPLATE.format(question=question, answer=answer, chunk=render_actions(chunk))
        return _answer(
            self.gateway.call(
                self._req(
                    OracleRole.STATE_TRANSITIONER,
                    prompt,
                    question=question,
                    answer=answer,
                    chunk=[(a.index, a.character, a.text) for a in chunk],
                )
            )
        )

    def filter_evidence(
        self, question: str, subject: str, action: Action, context: Sequence[Action]
    ) -> bool:
        prompt = EVIDENCE_TEMPLATE.format(
            subject=subject,
            question=question,
            context=render_actions(context) or "(none)",
            action=action.text,
        )
        return self.gateway.classify_binary(
            self._req(
                OracleRole.EVIDENCE_FILTER,
                prompt,
                question=question,
                subject=subject,
                action=(action.index, action.character, action.text),
            )
        )

    def summarize_behavior(self, question: str, subject: str, snippets: Sequence[str]) -> str:
        prompt = BEHAVIOR_SUMMARY_TEMPLATE.format(
            subject=subject, question=question, evidence="\n".join(f"- {s}" for s in snippets)
        )
        return _answer(
            self.gateway.call(
                self._req(
                    OracleRole.BEHAVIOR_SUMMARIZER,
                    prompt,
                    question=question,
                    subject=subject,
                    snippets=list(snippets),
                )
            )
        )

    def summarize_concept(
        self, question: str, answer: str, passages: Sequence[str], keywords: Sequence[str] = ()
    ) -> str:
        prompt = CONCEPT_SUMMARY_TEMPLATE.format(
            question=question, answer=answer, passages="\n---\n".join(passages)
        )
        return _answer(
            self.gateway.call(
                self._req(
                    OracleRole.CONCEPT_SUMMARIZER,
                    prompt,
                    question=question,
                    answer=answer,
                    passages=list(passages),
                    keywords=list(keywords),
                )
            )
        )

    def act(self, scene: Scene, grounding: str) -> str:
        prompt = ACTOR_TEMPLATE.format(
            character=scene.target_character,
            grounding=grounding,
            scene=scene.render() or "(start of storyline)",
        )
        return self.gateway.call(
            self._req(
                OracleRole.ACTOR,
                prompt,
                character=scene.target_character,
                grounding=grounding,
                window=[(a.index, a.character, a.text) for a in scene.window],
            )
        ).strip()

    def judge_em(self, predicted: str, reference: str) -> bool:
        prompt = EM_TEMPLATE.format(reference=reference, predicted=predicted)
        return self.gateway.classify_binary(
            self._req(OracleRole.EM_JUDGE, prompt, predicted=predicted, reference=reference)
        )

    def update_profile(
        self, character: str, profile: str, action: Action, context: Sequence[Action]
    ) -> str:
        prompt = PROFILE_TEMPLATE.format(
            character=character,
            profile=profile or "(empty)",
            context=render_actions(context) or "(none)",
            action=action.text,
        )
        return self.gateway.call(
            self._req(
                OracleRole.PROFILE_UPDATER,
                prompt,
                character=character,
                profile=profile,
                action=(action.index, action.character, action.text),
            )
        ).strip()
