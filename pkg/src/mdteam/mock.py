"""Scripted consultation panels for the mock backend.

A panel plan says, per case, which specialists triage picks and which option
each specialist names in each round (optionally a different option once a
retrieved-experience block is in its prompt). The panel answers every role
with well-formed replies, and the lead physician's digests carry a
``SENTINEL-R<round>`` marker so tests can see which rounds a prompt quotes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from .core import MANDATORY_SPECIALISTS, Role
from .llm import ChatRequest, MockBackend


def sentinel(round_no: int) -> str:
    return f"SENTINEL-R{round_no}"


@dataclass
class CasePlan:
    roles: Sequence[str]
    votes: Mapping[str, Sequence[str]]
    kb_votes: Mapping[str, Sequence[str]] = field(default_factory=dict)
    review: str | None = None

    def vote(self, role: str, round_no: int, kb: bool) -> str:
        table = self.kb_votes if kb and role in self.kb_votes else self.votes
        seq = table[role]
        return seq[min(round_no, len(seq)) - 1]

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"roles": list(self.roles), "votes": {k: list(v) for k, v in self.votes.items()}}
        if self.kb_votes:
            out["kb_votes"] = {k: list(v) for k, v in self.kb_votes.items()}
        if self.review is not None:
            out["review"] = self.review
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CasePlan":
        return cls(
            roles=list(data["roles"]),
            votes={k: list(v) for k, v in data["votes"].items()},
            kb_votes={k: list(v) for k, v in data.get("kb_votes", {}).items()},
            review=data.get("review"),
        )


@dataclass
class ScriptedPanel:
    plans: dict[str, CasePlan]
    default_vote: str | None = None
    default_roles: Sequence[str] = tuple(r.value for r in MANDATORY_SPECIALISTS)

    def __call__(self, request: ChatRequest) -> str | None:
        tags = request.tags
        role = tags.get("role")
        plan = self.plans.get(tags.get("case_id"))
        if role == Role.PRIMARY_CARE.value:
            roles = plan.roles if plan else self.default_roles
            return "Reasons: scripted panel selection.\n[" + ", ".join("{" + r + "}" for r in roles) + "]"
        if role == Role.LEAD_PHYSICIAN.value:
            return self._digest(tags["round"])
        if role == Role.COT_REVIEWER.value:
            return self._review_record(tags.get("kind"), tags.get("case_id"))
        if role == Role.SAFETY_REVIEWER.value:
            choice = plan.review if plan and plan.review else tags["proposed"]
            return f"Review: no unsafe advice found.\nAnswer ID: {{{choice}}}: {{{choice}}}"
        if role is not None and Role(role).is_specialist:
            round_no = tags["round"]
            if plan is not None and role in plan.votes:
                choice = plan.vote(role, round_no, bool(tags.get("kb")))
            elif self.default_vote is not None:
                choice = self.default_vote
            else:
                return None
            return (
                f"Reasoning: {role} reviewed case {tags.get('case_id')} in round {round_no}.\n"
                f"Choice: {{{choice}}}: {{{choice}}}"
            )
        return None

    @staticmethod
    def _digest(round_no: int) -> str:
        mark = sentinel(round_no)
        body = {
            f"round {round_no}": {
                "consistency": [f"{mark} shared findings"],
                "conflict": [f"{mark} divergent choices"],
                "independence": [],
                "integration": [f"{mark} integrated view of round {round_no}"],
            }
        }
        return json.dumps(body)

    @staticmethod
    def _review_record(kind: str | None, case_id: str | None) -> str:
        if kind == "correct":
            return json.dumps({
                "Question": f"case {case_id}",
                "Answer": "scripted",
                "Summary of S_final4": f"Final-round reasoning of case {case_id} held up.",
            })
        return json.dumps({
            "Question": f"case {case_id}",
            "Correct Answer": "scripted",
            "Initial Hypothesis": f"Initial hypothesis of case {case_id}.",
            "Analysis Process": "The panel kept its first reading across rounds.",
            "Final Conclusion": "The delivered answer was wrong.",
            "Error Reflection": "A key finding was under-weighted; check it first next time.",
        })

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"cases": {k: p.to_dict() for k, p in self.plans.items()}}
        if self.default_vote is not None:
            out["default_vote"] = self.default_vote
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ScriptedPanel":
        kwargs = {}
        if "default_roles" in data:
            kwargs["default_roles"] = list(data["default_roles"])
        return cls(
            plans={k: CasePlan.from_dict(v) for k, v in data.get("cases", {}).items()},
            default_vote=data.get("default_vote"),
            **kwargs,
        )


def mock_backend_from_file(path: str | Path, **kwargs) -> MockBackend:
    """Mock backend from a JSON file.

    The file holds either a flat ``"role/round" -> reply`` script, or an object
    with ``"panel"`` (a ScriptedPanel) and optional ``"script"`` overrides.
    """
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if "panel" in data or "script" in data:
        panel = ScriptedPanel.from_dict(data["panel"]) if "panel" in data else None
        return MockBackend(script=data.get("script", {}), fallback=data.get("_fallback"), responder=panel, **kwargs)
    fallback = data.pop("_fallback", None)
    return MockBackend(script=data, fallback=fallback, **kwargs)
