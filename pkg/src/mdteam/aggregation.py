"""Lead Physician: digest a round's statements into a four-category summary."""

from __future__ import annotations

import json
import logging
import re
from collections import defaultdict
from dataclasses import dataclass
from typing import Any, Sequence

from .core import (
    CATEGORIES,
    HistoricalSharedPool,
    ParseFailure,
    PatientCase,
    Role,
    RoundSummary,
    Statement,
    votes_unanimous,
)
from .llm import Backend, ChatRequest
from .parsing import first_json_object
from .templates import load_template, render_case, render_statements

logger = logging.getLogger(__name__)

FORMAT_REMINDER = (
    "Your previous reply was not valid JSON in the requested shape. Reply with the JSON "
    "object only, with the keys consistency, conflict, independence and integration."
)

# Placeholders such as "No conflict exists." or "{...}" mean an empty category.
_EMPTY_MARKER = re.compile(r"^\s*(no \w+ exists?\.?|none\.?|n/?a|\{\s*\.\.\.\s*\}|\.\.\.)\s*$", re.I)


@dataclass(frozen=True)
class SummaryOutcome:
    summary: RoundSummary
    fallback: bool = False
    conflict_enforced: bool = False


def _as_items(value: Any) -> list[str]:
    if value is None:
        return []
    if isinstance(value, str):
        value = [value]
    if not isinstance(value, list):
        raise ParseFailure(f"category value must be text or list, got {type(value).__name__}")
    items = []
    for item in value:
        text = item if isinstance(item, str) else json.dumps(item, ensure_ascii=False)
        if text.strip() and not _EMPTY_MARKER.match(text):
            items.append(text)
    return items


def parse_summary_reply(reply: str, round_no: int) -> dict[str, list[str]]:
    obj = first_json_object(reply)
    if not isinstance(obj, dict):
        raise ParseFailure("summary reply is not an object")
    lowered = {str(k).strip().casefold(): v for k, v in obj.items()}
    body = lowered.get(f"round {round_no}")
    if body is None and not any(c in lowered for c in CATEGORIES):
        round_keys = [v for k, v in lowered.items() if k.startswith("round")]
        body = round_keys[-1] if len(round_keys) == 1 else None
    if body is None:
        body = obj
    if not isinstance(body, dict):
        raise ParseFailure("round entry is not an object")
    body = {str(k).strip().casefold(): v for k, v in body.items()}
    missing = [c for c in CATEGORIES if c not in body]
    if missing:
        raise ParseFailure(f"summary lacks categories {missing}")
    parsed = {c: _as_items(body[c]) for c in CATEGORIES}
    if not parsed["integration"]:
        raise ParseFailure("integration category is empty")
    return parsed


def votes_of(statements: Sequence[Statement]) -> dict[str, str]:
    return {s.role.value: s.choice_id for s in statements}


def divergence_note(statements: Sequence[Statement]) -> str:
    by_choice: dict[str, list[str]] = defaultdict(list)
    for s in statements:
        by_choice[s.choice_id].append(s.role.value)
    parts = [f"{cid} ({', '.join(roles)})" for cid, roles in sorted(by_choice.items())]
    return "Specialists chose different options: " + "; ".join(parts)


def fallback_summary(statements: Sequence[Statement], case: PatientCase, round_no: int) -> RoundSummary:
    """Mechanical digest used when the lead physician's reply stays unreadable."""
    unanimous = votes_unanimous(s.choice_id for s in statements)
    consistency = []
    if unanimous and statements:
        cid = statements[0].choice_id
        consistency = [f"All specialists chose {case.render_option(cid)}"]
    conflict = [] if unanimous else [divergence_note(statements)]
    integration = [
        f"{s.role.value}: {s.choice_id}. {_first_line(s.reasoning)}".strip() for s in statements
    ] or ["No valid specialist statements this round."]
    return RoundSummary(
        round=round_no,
        consistency=tuple(consistency),
        conflict=tuple(conflict),
        independence=(),
        integration=tuple(integration),
        votes=votes_of(statements),
    )


def _first_line(text: str) -> str:
    for line in text.splitlines():
        if line.strip():
            return line.strip()
    return ""


def build_summary_prompt(
    statements: Sequence[Statement], case: PatientCase, round_no: int, prompt_dir=None, attempt: int = 0, **chat_kwargs
) -> ChatRequest:
    user = (
        f"Consultation round {round_no}.\n\n"
        + render_case(case)
        + "\n\nSpecialist responses:\n"
        + render_statements(statements, case)
    )
    if attempt:
        user += "\n\n" + FORMAT_REMINDER
    return ChatRequest(
        system_prompt=load_template("lead_physician", prompt_dir).substitute(round=round_no),
        user_prompt=user,
        tags={"role": Role.LEAD_PHYSICIAN.value, "round": round_no, "case_id": case.case_id, "attempt": attempt},
        **chat_kwargs,
    )


def summarize_round(
    statements: Sequence[Statement],
    case: PatientCase,
    backend: Backend,
    round_no: int | None = None,
    max_parse_retries: int = 2,
    prompt_dir=None,
    **chat_kwargs,
) -> SummaryOutcome:
    """Ask the lead physician for the round digest.

    Votes always come from ``statements``. The conflict category is made to
    agree with them: cleared when the vote is unanimous, and given a divergence
    note when the reply left it empty despite split votes.
    """
    if round_no is None:
        if not statements:
            raise ValueError("round number needed when no statements are given")
        rounds = {s.round for s in statements}
        if len(rounds) != 1:
            raise ValueError(f"statements span rounds {sorted(rounds)}")
        round_no = rounds.pop()
    if any(s.round != round_no for s in statements):
        raise ValueError("statements must all belong to the summarized round")

    parsed = None
    for attempt in range(max_parse_retries + 1):
        reply = backend.chat(
            build_summary_prompt(statements, case, round_no, prompt_dir, attempt, **chat_kwargs)
        )
        try:
            parsed = parse_summary_reply(reply, round_no)
            break
        except ParseFailure as exc:
            logger.warning("case %s round %d: summary parse failed: %s", case.case_id, round_no, exc)
    if parsed is None:
        return SummaryOutcome(fallback_summary(statements, case, round_no), fallback=True)

    enforced = False
    if votes_unanimous(s.choice_id for s in statements):
        enforced = bool(parsed["conflict"])
        parsed["conflict"] = []
    elif not parsed["conflict"]:
        parsed["conflict"] = [divergence_note(statements)]
        enforced = True
    summary = RoundSummary(round=round_no, votes=votes_of(statements), **{c: tuple(parsed[c]) for c in CATEGORIES})
    return SummaryOutcome(summary, conflict_enforced=enforced)


def append_summary(pool: HistoricalSharedPool, summary: RoundSummary) -> HistoricalSharedPool:
    return pool.append(summary)
