"""Multi-round specialist discussion with consensus and majority fallback.

Round 1 prompts carry only the case. Round 2 adds the lead physician's digest
of round 1. Every later round r sees exactly the digests of rounds r-1 and
r-2; raw peer statements and older rounds never reach a specialist.
"""

from __future__ import annotations

import logging
import random
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping, Sequence

from .aggregation import SummaryOutcome, fallback_summary, summarize_round
from .core import (
    ConsultationResult,
    HistoricalSharedPool,
    MissingSummary,
    ParseFailure,
    PatientCase,
    Role,
    Statement,
    Termination,
    option_key,
)
from .knowledge import DEFAULT_TOP_K, KbGate, KnowledgeStores, RetrievalHit, kb_gate, retrieve
from .llm import Backend, ChatRequest
from .parsing import labelled_line_pattern, parse_labelled_answer
from .templates import POOL_BLOCK_HEADER, SPECIALTY_FOCUS, load_template, render_case, render_kb_block, render_summaries

logger = logging.getLogger(__name__)

RESIDUAL_WINDOW = 2
DEFAULT_MAX_ROUNDS = 10

_CHOICE_LINE = labelled_line_pattern("Choice")

ANSWER_INSTRUCTION = "End with your conclusion on its own line: Choice: {Option ID}: {Option Content}"
FORMAT_REMINDER = (
    "Your previous reply did not end with a readable choice. Name exactly one of the listed "
    "option IDs on the last line as: Choice: {Option ID}: {Option Content}"
)


class StatementParseFailure(ParseFailure):
    pass


class KbPolicy(str, Enum):
    DISABLED = "Disabled"
    ENABLED = "Enabled"


@dataclass(frozen=True)
class ConsultationConfig:
    max_rounds: int = DEFAULT_MAX_ROUNDS
    rng_seed: int = 0
    kb_policy: KbPolicy = KbPolicy.DISABLED
    top_k: int = DEFAULT_TOP_K
    pooled_retrieval: bool = False
    max_parse_retries: int = 2
    parallel: bool = True
    prompt_dir: str | None = None
    chat: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        object.__setattr__(self, "kb_policy", KbPolicy(self.kb_policy))

    @property
    def residual_window(self) -> int:
        return RESIDUAL_WINDOW


@dataclass
class ConsultationLog:
    """What happened besides the statements and summaries themselves."""

    abstentions: list[dict] = field(default_factory=list)
    summary_fallbacks: list[int] = field(default_factory=list)
    conflict_enforced: list[int] = field(default_factory=list)
    kb_rounds: list[int] = field(default_factory=list)
    kb_gate: str = KbGate.NO_KB.value
    retrieved: list[dict] = field(default_factory=list)
    post_hoc_snippets: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "abstentions": self.abstentions,
            "summary_fallbacks": self.summary_fallbacks,
            "conflict_enforced": self.conflict_enforced,
            "kb_rounds": self.kb_rounds,
            "kb_gate": self.kb_gate,
            "retrieved": self.retrieved,
        }


def pool_window(round_no: int) -> list[int]:
    """Pool rounds a specialist may read in ``round_no``, newest first."""
    return [r for r in range(round_no - 1, round_no - 1 - RESIDUAL_WINDOW, -1) if r >= 1]


def build_specialist_prompt(
    case: PatientCase,
    role: Role,
    round_no: int,
    pool: HistoricalSharedPool,
    kb_snippets: Sequence[Mapping] | None = None,
    attempt: int = 0,
    prompt_dir=None,
    **chat_kwargs,
) -> ChatRequest:
    role = Role(role)
    window = pool_window(round_no)
    missing = [r for r in window if r not in pool]
    if missing:
        raise MissingSummary(f"round {round_no} needs pool rounds {missing}")
    if round_no == 1 and kb_snippets:
        raise ValueError("round 1 prompts never carry retrieved experience")

    parts = [f"Consultation round {round_no}.", render_case(case)]
    if window:
        label = " and ".join(str(r) for r in window)
        parts.append(
            f"{POOL_BLOCK_HEADER}\nLead physician's summaries of round{'s' if len(window) > 1 else ''} {label}:\n"
            + render_summaries(pool[r] for r in window)
        )
    if kb_snippets:
        parts.append(render_kb_block(kb_snippets))
    parts.append(ANSWER_INSTRUCTION)
    if attempt:
        parts.append(FORMAT_REMINDER)
    return ChatRequest(
        system_prompt=load_template("specialist", prompt_dir).substitute(
            role=role.value, focus=SPECIALTY_FOCUS.get(role, "")
        ),
        user_prompt="\n\n".join(parts),
        tags={
            "role": role.value,
            "round": round_no,
            "case_id": case.case_id,
            "attempt": attempt,
            "kb": bool(kb_snippets),
        },
        **chat_kwargs,
    )


def parse_statement(reply: str, case: PatientCase, role: Role, round_no: int) -> Statement:
    try:
        choice_id, content, reasoning = parse_labelled_answer(reply, _CHOICE_LINE, case.options)
    except ParseFailure as exc:
        raise StatementParseFailure(f"{Role(role).value} round {round_no}: {exc}") from exc
    return Statement(
        round=round_no,
        role=role,
        reasoning=reasoning,
        choice_id=choice_id,
        choice_text=content or case.options[choice_id],
    )


def check_consensus(statements: Sequence[Statement]) -> bool:
    """True when every statement names the same option (case-folded)."""
    if not statements:
        return False
    return len({option_key(s.choice_id) for s in statements}) == 1


def decide_final(statements: Sequence[Statement], rng: random.Random) -> tuple[str, Termination]:
    """Plurality vote; a tie for the top count is broken uniformly with ``rng``."""
    if not statements:
        raise ValueError("no statements to decide from")
    canonical: dict[str, str] = {}
    counts: Counter = Counter()
    for s in statements:
        key = option_key(s.choice_id)
        canonical.setdefault(key, s.choice_id)
        counts[key] += 1
    top = max(counts.values())
    leaders = sorted(k for k, n in counts.items() if n == top)
    if len(leaders) == 1:
        return canonical[leaders[0]], Termination.MAJORITY_RULE
    return canonical[rng.choice(leaders)], Termination.TIE_RANDOM


def _ask_specialist(
    case: PatientCase,
    role: Role,
    round_no: int,
    pool: HistoricalSharedPool,
    backend: Backend,
    config: ConsultationConfig,
    kb_snippets,
) -> Statement | None:
    for attempt in range(config.max_parse_retries + 1):
        request = build_specialist_prompt(
            case, role, round_no, pool, kb_snippets, attempt, config.prompt_dir, **config.chat
        )
        try:
            return parse_statement(backend.chat(request), case, role, round_no)
        except StatementParseFailure as exc:
            logger.warning("case %s: %s (attempt %d)", case.case_id, exc, attempt)
    return None


def run_consultation(
    case: PatientCase,
    roles: Sequence[Role],
    backend: Backend,
    pool: HistoricalSharedPool | None = None,
    config: ConsultationConfig | None = None,
    kb_handle: KnowledgeStores | None = None,
    log: ConsultationLog | None = None,
) -> ConsultationResult:
    config = config or ConsultationConfig()
    pool = pool if pool is not None else HistoricalSharedPool()
    log = log if log is not None else ConsultationLog()
    roles = [Role(r) for r in roles]
    if not roles:
        raise ValueError("no specialists to consult")
    if len(pool):
        raise ValueError("consultation must start from an empty pool")
    kb_enabled = config.kb_policy is KbPolicy.ENABLED
    if kb_enabled != (kb_handle is not None):
        raise ValueError("knowledge stores must be given exactly when the KB policy is enabled")

    hits: list[RetrievalHit] | None = None

    def snippets() -> list[dict]:
        nonlocal hits
        if hits is None:
            correct_hits, chain_hits = retrieve(
                case, backend, kb_handle.correct, kb_handle.chain, config.top_k, config.pooled_retrieval
            )
            hits = correct_hits + chain_hits
            log.retrieved = [{"id": h.entry.entry_id, "score": h.score} for h in hits]
        return [h.snippet() for h in hits]

    rounds: list[tuple[Statement, ...]] = []
    round1_consensus = False
    consensus = False
    pool_executor = ThreadPoolExecutor(max_workers=len(roles)) if config.parallel and len(roles) > 1 else None
    try:
        for round_no in range(1, config.max_rounds + 1):
            conflict = bool(pool.last.conflict) if pool.last is not None else False
            gate = kb_gate(round_no, round1_consensus, conflict)
            kb_snippets = None
            if kb_enabled and gate is KbGate.INJECT_INTO_PROMPT:
                kb_snippets = snippets() or None
                if kb_snippets:
                    log.kb_rounds.append(round_no)
                    log.kb_gate = gate.value

            args = (round_no, pool, backend, config, kb_snippets)
            if pool_executor is not None:
                replies = list(pool_executor.map(lambda r: _ask_specialist(case, r, *args), roles))
            else:
                replies = [_ask_specialist(case, r, *args) for r in roles]
            statements = tuple(s for s in replies if s is not None)
            for role, s in zip(roles, replies):
                if s is None:
                    log.abstentions.append({"round": round_no, "role": role.value})

            if statements:
                outcome = summarize_round(
                    statements, case, backend, round_no, config.max_parse_retries, config.prompt_dir, **config.chat
                )
            else:
                outcome = SummaryOutcome(fallback_summary(statements, case, round_no), fallback=True)
            if outcome.fallback:
                log.summary_fallbacks.append(round_no)
            if outcome.conflict_enforced:
                log.conflict_enforced.append(round_no)
            pool = pool.append(outcome.summary)
            rounds.append(statements)

            if check_consensus(statements):
                consensus = True
                round1_consensus = round_no == 1
                break
    finally:
        if pool_executor is not None:
            pool_executor.shutdown()

    if consensus:
        final_choice, termination = rounds[-1][0].choice_id, Termination.CONSENSUS
    else:
        voting = next((r for r in reversed(rounds) if r), ())
        if not voting:
            raise StatementParseFailure(f"case {case.case_id}: no specialist produced a readable choice")
        final_choice, termination = decide_final(voting, random.Random(config.rng_seed))

    if kb_enabled and round1_consensus:
        gate = kb_gate(len(rounds) + 1, True, False)
        if gate is KbGate.POST_HOC_REFLECT:
            log.post_hoc_snippets = snippets()
            if log.post_hoc_snippets:
                log.kb_gate = gate.value

    return ConsultationResult(
        case_id=case.case_id,
        final_choice_id=final_choice,
        termination=termination,
        rounds_used=len(rounds),
        max_rounds=config.max_rounds,
        pool=pool,
        per_round_statements=tuple(rounds),
        kb_consulted=bool(log.kb_rounds or log.post_hoc_snippets),
        rng_seed=config.rng_seed,
    )
