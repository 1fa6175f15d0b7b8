"""Safety and Ethics Reviewer: last pass before an answer is delivered."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

from .core import ParseFailure, PatientCase, Role, RoundSummary, normalize_option_id
from .llm import Backend, ChatRequest
from .parsing import labelled_line_pattern, parse_labelled_answer
from .templates import load_template, render_case, render_kb_block, render_summaries

logger = logging.getLogger(__name__)

_ANSWER_LINE = labelled_line_pattern("Answer ID")
FORMAT_REMINDER = (
    "Your previous reply did not end with a valid answer. Use one of the listed option IDs "
    "on the last line as: Answer ID: {Option ID}: {Option Content}"
)


@dataclass(frozen=True)
class ReviewOutcome:
    final_choice_id: str
    notes: str
    proposed_choice_id: str
    overridden: bool = False
    override_failed: bool = False

    @property
    def flags(self) -> list[str]:
        flags = []
        if self.overridden:
            flags.append("ReviewOverride")
        if self.override_failed:
            flags.append("ReviewOverrideFailed")
        return flags

    def to_dict(self) -> dict:
        return {
            "final_choice_id": self.final_choice_id,
            "proposed_choice_id": self.proposed_choice_id,
            "notes": self.notes,
            "flags": self.flags,
        }


def build_review_prompt(
    case: PatientCase,
    final_summary: RoundSummary,
    proposed_choice: str,
    reflection: Sequence[Mapping] | None = None,
    attempt: int = 0,
    prompt_dir=None,
    **chat_kwargs,
) -> ChatRequest:
    parts = [
        render_case(case),
        "Team's final-round summary:\n" + render_summaries([final_summary]),
        f"Proposed answer ID: {case.render_option(proposed_choice)}",
    ]
    if reflection:
        parts.append(
            "Similar past consultations, for reflection on the proposed answer:\n" + render_kb_block(reflection)
        )
    if attempt:
        parts.append(FORMAT_REMINDER)
    return ChatRequest(
        system_prompt=load_template("safety_reviewer", prompt_dir).substitute(),
        user_prompt="\n\n".join(parts),
        tags={
            "role": Role.SAFETY_REVIEWER.value,
            "case_id": case.case_id,
            "attempt": attempt,
            "kb": bool(reflection),
            "proposed": proposed_choice,
        },
        **chat_kwargs,
    )


def safety_review(
    case: PatientCase,
    final_summary: RoundSummary,
    proposed_choice: str,
    backend: Backend,
    reflection: Sequence[Mapping] | None = None,
    max_parse_retries: int = 2,
    prompt_dir=None,
    **chat_kwargs,
) -> ReviewOutcome:
    """Review the proposed answer; a readable in-option answer from the reviewer wins.

    When the reviewer never names a valid option the proposal is kept and the
    outcome is flagged. The shared pool is not touched.
    """
    proposed = normalize_option_id(proposed_choice, case.options)
    last_reply = ""
    for attempt in range(max_parse_retries + 1):
        reply = backend.chat(
            build_review_prompt(case, final_summary, proposed, reflection, attempt, prompt_dir, **chat_kwargs)
        )
        last_reply = reply
        try:
            choice, _, notes = parse_labelled_answer(reply, _ANSWER_LINE, case.options)
        except ParseFailure as exc:
            logger.warning("case %s: review unreadable (attempt %d): %s", case.case_id, attempt, exc)
            continue
        if choice != proposed:
            logger.info("case %s: reviewer changed %s to %s", case.case_id, proposed, choice)
        return ReviewOutcome(choice, notes, proposed, overridden=choice != proposed)
    return ReviewOutcome(proposed, last_reply.strip(), proposed, override_failed=True)
