"""Primary Care Doctor: pick the specialist panel for a case."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass

from .core import MANDATORY_SPECIALISTS, SPECIALISTS, ParseFailure, PatientCase, Role
from .llm import Backend, ChatRequest
from .templates import load_template, render_case

logger = logging.getLogger(__name__)

MIN_ROLES = 2
MAX_ROLES = 8
FORMAT_REMINDER = (
    "Your previous reply could not be read. Give your reasons, then end with the roles "
    "on one line in exactly this format: [{Role one}, {Role two}, ...], using only the "
    "listed specialist names."
)

_LIST_RE = re.compile(r"\[([^\[\]]*\{[^\[\]]*)\]|<([^<>]*\{[^<>]*)>")
_ITEM_RE = re.compile(r"\{([^{}]*)\}")
_LABEL_RE = re.compile(r"(?:output\s+)?roles?\s*:?\s*$", re.IGNORECASE)


def _name_key(name: str) -> str:
    name = name.casefold().replace("&", " and ")
    return " ".join(re.sub(r"[^a-z0-9]+", " ", name).split())


_BY_NAME = {_name_key(r.value): r for r in SPECIALISTS}


@dataclass(frozen=True)
class TriageDecision:
    reasons: str
    roles: tuple[Role, ...]
    injected: tuple[Role, ...] = ()

    def __post_init__(self):
        roles = tuple(Role(r) for r in self.roles)
        object.__setattr__(self, "roles", roles)
        if len(set(roles)) != len(roles):
            raise ValueError("duplicate roles in triage decision")
        if not all(r.is_specialist for r in roles):
            raise ValueError("triage roles must all be specialists")
        missing = [r for r in MANDATORY_SPECIALISTS if r not in roles]
        if missing:
            raise ValueError(f"triage decision lacks mandatory roles {missing}")
        if not MIN_ROLES <= len(roles) <= MAX_ROLES:
            raise ValueError(f"{len(roles)} roles outside {MIN_ROLES}..{MAX_ROLES}")

    def to_dict(self):
        return {
            "reasons": self.reasons,
            "roles": [r.value for r in self.roles],
            "injected": [r.value for r in self.injected],
        }


def _find_list(reply: str) -> re.Match:
    matches = list(_LIST_RE.finditer(reply))
    if not matches:
        raise ParseFailure("no bracketed role list in reply")
    return matches[-1]


def parse_role_list(reply: str) -> tuple[Role, ...]:
    """Extract ``[{Role}, {Role}, ...]`` and map each name onto the specialist set.

    Names are matched exactly after case-folding and punctuation collapse;
    there is no synonym matching.
    """
    if not reply or not reply.strip():
        raise ParseFailure("empty triage reply")
    match = _find_list(reply)
    body = match.group(1) if match.group(1) is not None else match.group(2)
    names = _ITEM_RE.findall(body)
    if not names:
        raise ParseFailure("role list is empty")
    roles: list[Role] = []
    for name in names:
        role = _BY_NAME.get(_name_key(name))
        if role is None:
            raise ParseFailure(f"{name.strip()!r} is not a specialist role")
        if role not in roles:
            roles.append(role)
    return tuple(roles)


def render_role_list(roles) -> str:
    return "[" + ", ".join("{" + Role(r).value + "}" for r in roles) + "]"


def parse_reasons(reply: str) -> str:
    head = reply[: _find_list(reply).start()].rstrip()
    lines = head.splitlines()
    while lines and (not lines[-1].strip() or _LABEL_RE.fullmatch(lines[-1].strip(" •*-"))):
        lines.pop()
    return "\n".join(lines).strip()


def decision_from_reply(reply: str) -> TriageDecision:
    roles = list(parse_role_list(reply))
    injected = tuple(r for r in MANDATORY_SPECIALISTS if r not in roles)
    if injected:
        logger.info("triage omitted mandatory roles %s; adding them", [r.value for r in injected])
        roles.extend(injected)
    return TriageDecision(reasons=parse_reasons(reply), roles=tuple(roles), injected=injected)


def build_triage_prompt(case: PatientCase, prompt_dir=None, attempt: int = 0, **chat_kwargs) -> ChatRequest:
    user = "Input question:\n" + render_case(case)
    if attempt:
        user += "\n\n" + FORMAT_REMINDER
    return ChatRequest(
        system_prompt=load_template("primary_care", prompt_dir).substitute(),
        user_prompt=user,
        tags={"role": Role.PRIMARY_CARE.value, "case_id": case.case_id, "attempt": attempt},
        **chat_kwargs,
    )


def triage(
    case: PatientCase,
    backend: Backend,
    max_parse_retries: int = 2,
    prompt_dir=None,
    **chat_kwargs,
) -> TriageDecision:
    last: ParseFailure | None = None
    for attempt in range(max_parse_retries + 1):
        reply = backend.chat(build_triage_prompt(case, prompt_dir, attempt, **chat_kwargs))
        try:
            return decision_from_reply(reply)
        except ParseFailure as exc:
            logger.warning("case %s: triage parse failed (attempt %d): %s", case.case_id, attempt, exc)
            last = exc
    raise ParseFailure(f"case {case.case_id}: triage unreadable after retries: {last}")
