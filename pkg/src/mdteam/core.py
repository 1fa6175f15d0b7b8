"""Domain types shared across the consultation engine.

All values are immutable once built. JSON helpers live next to the types they
serialize so the on-disk shapes stay in one place.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping, Sequence


class MDTError(Exception):
    """Base class for engine errors."""


class EmptyAfterNormalization(MDTError, ValueError):
    pass


class UnknownOption(MDTError, ValueError):
    pass


class ParseFailure(MDTError, ValueError):
    pass


class MissingSummary(MDTError, LookupError):
    pass


class NonContiguousRound(MDTError, ValueError):
    pass


class Role(str, Enum):
    GENERAL_INTERNAL_MEDICINE = "General Internal Medicine Doctor"
    GENERAL_SURGEON = "General Surgeon"
    PEDIATRICIAN = "Pediatrician"
    OBSTETRICIAN_GYNECOLOGIST = "Obstetrician and Gynecologist"
    RADIOLOGIST = "Radiologist"
    NEUROLOGIST = "Neurologist"
    PATHOLOGIST = "Pathologist"
    PHARMACIST = "Pharmacist"

    PRIMARY_CARE = "Primary Care Doctor"
    LEAD_PHYSICIAN = "Lead Physician"
    COT_REVIEWER = "Chain-of-Thought Reviewer"
    SAFETY_REVIEWER = "Safety and Ethics Reviewer"

    @property
    def is_specialist(self) -> bool:
        return self in SPECIALISTS

    def __str__(self) -> str:
        return self.value


SPECIALISTS: tuple[Role, ...] = (
    Role.GENERAL_INTERNAL_MEDICINE,
    Role.GENERAL_SURGEON,
    Role.PEDIATRICIAN,
    Role.OBSTETRICIAN_GYNECOLOGIST,
    Role.RADIOLOGIST,
    Role.NEUROLOGIST,
    Role.PATHOLOGIST,
    Role.PHARMACIST,
)
AUXILIARY: tuple[Role, ...] = (
    Role.PRIMARY_CARE,
    Role.LEAD_PHYSICIAN,
    Role.COT_REVIEWER,
    Role.SAFETY_REVIEWER,
)
MANDATORY_SPECIALISTS: tuple[Role, ...] = (Role.RADIOLOGIST, Role.PATHOLOGIST, Role.PHARMACIST)


class Termination(str, Enum):
    CONSENSUS = "Consensus"
    MAJORITY_RULE = "MajorityRule"
    TIE_RANDOM = "TieRandom"


_STRIP_CHARS = string.whitespace + "{}[]()<>\"'`.,;:!?*"


def option_key(option_id: str) -> str:
    """Comparison key for option ids: consensus and vote counting use this."""
    return option_id.strip().casefold()


def normalize_option_id(raw: str, options: Iterable[str] | None = None) -> str:
    """Canonicalize an option id as echoed by an agent.

    Without ``options`` the stripped token is returned as written. With
    ``options`` the matching key of the case is returned, compared case-folded,
    so ``"e"`` resolves to ``"E"``.
    """
    if raw is None or not raw.strip():
        raise EmptyAfterNormalization(f"empty option id: {raw!r}")
    token = raw.strip(_STRIP_CHARS)
    if not token:
        raise EmptyAfterNormalization(f"nothing left after normalizing {raw!r}")
    if options is None:
        return token
    wanted = option_key(token)
    for key in options:
        if option_key(key) == wanted:
            return key
    raise UnknownOption(f"{raw!r} does not name an option in {list(options)}")


@dataclass(frozen=True)
class PatientCase:
    case_id: str
    background: str
    question: str
    options: Mapping[str, str]
    gold_answer: str | None = None

    def __post_init__(self):
        if not self.options:
            raise ValueError(f"case {self.case_id}: options must be non-empty")
        keys = [option_key(k) for k in self.options]
        if len(set(keys)) != len(keys):
            raise ValueError(f"case {self.case_id}: option ids collide after normalization")
        if any(not k for k in keys):
            raise ValueError(f"case {self.case_id}: blank option id")
        object.__setattr__(self, "options", dict(self.options))
        if self.gold_answer is not None:
            try:
                gold = normalize_option_id(self.gold_answer, self.options)
            except (UnknownOption, EmptyAfterNormalization) as exc:
                raise ValueError(f"case {self.case_id}: gold answer not among options") from exc
            object.__setattr__(self, "gold_answer", gold)

    def option_text(self, option_id: str) -> str:
        return self.options[option_id]

    def render_option(self, option_id: str) -> str:
        return f"{option_id}: {self.options[option_id]}"

    def query_text(self) -> str:
        """Text embedded for retrieval: background and question."""
        return f"{self.background}\n{self.question}"

    def to_dict(self) -> dict[str, Any]:
        return {
            "case_id": self.case_id,
            "background": self.background,
            "question": self.question,
            "options": dict(self.options),
            "gold_answer": self.gold_answer,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PatientCase":
        return cls(
            case_id=str(data["case_id"]),
            background=data.get("background", ""),
            question=data["question"],
            options=dict(data["options"]),
            gold_answer=data.get("gold_answer"),
        )


@dataclass(frozen=True)
class Statement:
    round: int
    role: Role
    reasoning: str
    choice_id: str
    choice_text: str = ""

    def __post_init__(self):
        if self.round < 1:
            raise ValueError("statement round must be >= 1")
        role = Role(self.role)
        if not role.is_specialist:
            raise ValueError(f"{role.value} is not a specialist role")
        object.__setattr__(self, "role", role)

    def to_dict(self) -> dict[str, Any]:
        return {
            "round": self.round,
            "role": self.role.value,
            "reasoning": self.reasoning,
            "choice_id": self.choice_id,
            "choice_text": self.choice_text,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Statement":
        return cls(
            round=int(data["round"]),
            role=Role(data["role"]),
            reasoning=data["reasoning"],
            choice_id=data["choice_id"],
            choice_text=data.get("choice_text", ""),
        )


CATEGORIES = ("consistency", "conflict", "independence", "integration")
VOTES_KEY = "_votes"


def votes_unanimous(choice_ids: Iterable[str]) -> bool:
    return len({option_key(c) for c in choice_ids}) <= 1


@dataclass(frozen=True)
class RoundSummary:
    """Four-category digest of one round plus the engine-derived votes."""

    round: int
    consistency: tuple[str, ...]
    conflict: tuple[str, ...]
    independence: tuple[str, ...]
    integration: tuple[str, ...]
    votes: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.round < 1:
            raise ValueError("summary round must be >= 1")
        for name in CATEGORIES:
            object.__setattr__(self, name, tuple(str(x) for x in getattr(self, name)))
        object.__setattr__(self, "votes", {str(Role(k)): v for k, v in self.votes.items()})
        if not self.integration:
            raise ValueError(f"round {self.round}: integration must be non-empty")
        if votes_unanimous(self.votes.values()) == bool(self.conflict):
            raise ValueError(
                f"round {self.round}: conflict must be empty exactly when votes agree"
            )

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {name: list(getattr(self, name)) for name in CATEGORIES}
        out[VOTES_KEY] = dict(self.votes)
        return out

    @classmethod
    def from_dict(cls, round_no: int, data: Mapping[str, Any]) -> "RoundSummary":
        return cls(
            round=round_no,
            consistency=tuple(data.get("consistency", ())),
            conflict=tuple(data.get("conflict", ())),
            independence=tuple(data.get("independence", ())),
            integration=tuple(data.get("integration", ())),
            votes=dict(data.get(VOTES_KEY, {})),
        )


@dataclass(frozen=True)
class HistoricalSharedPool:
    """Append-only map round -> RoundSummary for one consultation."""

    entries: tuple[RoundSummary, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        for expected, summary in enumerate(self.entries, start=1):
            if summary.round != expected:
                raise NonContiguousRound(
                    f"pool rounds must run 1..n; found round {summary.round} at position {expected}"
                )

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, round_no: object) -> bool:
        return isinstance(round_no, int) and 1 <= round_no <= len(self.entries)

    def __getitem__(self, round_no: int) -> RoundSummary:
        if round_no not in self:
            raise MissingSummary(f"pool has no summary for round {round_no}")
        return self.entries[round_no - 1]

    @property
    def rounds(self) -> list[int]:
        return [s.round for s in self.entries]

    @property
    def last(self) -> RoundSummary | None:
        return self.entries[-1] if self.entries else None

    def append(self, summary: RoundSummary) -> "HistoricalSharedPool":
        expected = len(self.entries) + 1
        if summary.round != expected:
            raise NonContiguousRound(
                f"cannot store round {summary.round}; next round must be {expected}"
            )
        return HistoricalSharedPool(self.entries + (summary,))

    def to_dict(self) -> dict[str, Any]:
        return {f"round {s.round}": s.to_dict() for s in self.entries}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "HistoricalSharedPool":
        summaries = []
        for key, body in data.items():
            prefix, _, number = key.partition(" ")
            if prefix != "round" or not number.isdigit():
                raise ParseFailure(f"unexpected pool key {key!r}")
            summaries.append(RoundSummary.from_dict(int(number), body))
        summaries.sort(key=lambda s: s.round)
        return cls(tuple(summaries))


def serialize_pool(pool: HistoricalSharedPool) -> str:
    """Canonical JSON: rounds ascending, categories in fixed order, votes last."""
    return json.dumps(pool.to_dict(), indent=2, ensure_ascii=False)


def parse_pool(text: str) -> HistoricalSharedPool:
    return HistoricalSharedPool.from_dict(json.loads(text))


@dataclass(frozen=True)
class ConsultationResult:
    case_id: str
    final_choice_id: str
    termination: Termination
    rounds_used: int
    pool: HistoricalSharedPool
    per_round_statements: tuple[tuple[Statement, ...], ...]
    kb_consulted: bool
    rng_seed: int
    max_rounds: int = 10

    def __post_init__(self):
        object.__setattr__(self, "termination", Termination(self.termination))
        object.__setattr__(
            self, "per_round_statements", tuple(tuple(r) for r in self.per_round_statements)
        )
        if not 1 <= self.rounds_used <= self.max_rounds:
            raise ValueError(f"rounds_used={self.rounds_used} outside 1..{self.max_rounds}")
        if self.termination is Termination.CONSENSUS:
            final = self.per_round_statements[-1] if self.per_round_statements else ()
            if not votes_unanimous(s.choice_id for s in final):
                raise ValueError("consensus termination requires unanimous final round")

    @property
    def final_statements(self) -> Sequence[Statement]:
        return self.per_round_statements[-1] if self.per_round_statements else ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "case_id": self.case_id,
            "final_choice_id": self.final_choice_id,
            "termination": self.termination.value,
            "rounds_used": self.rounds_used,
            "max_rounds": self.max_rounds,
            "pool": self.pool.to_dict(),
            "per_round_statements": [[s.to_dict() for s in r] for r in self.per_round_statements],
            "kb_consulted": self.kb_consulted,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ConsultationResult":
        return cls(
            case_id=data["case_id"],
            final_choice_id=data["final_choice_id"],
            termination=Termination(data["termination"]),
            rounds_used=int(data["rounds_used"]),
            max_rounds=int(data.get("max_rounds", 10)),
            pool=HistoricalSharedPool.from_dict(data["pool"]),
            per_round_statements=tuple(
                tuple(Statement.from_dict(s) for s in r) for r in data["per_round_statements"]
            ),
            kb_consulted=bool(data["kb_consulted"]),
            rng_seed=int(data["rng_seed"]),
        )


def dumps_canonical(obj: Any) -> str:
    """Single-line JSON used for run logs; stable across runs."""
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))
