"""One case end to end: triage, discussion, safety review, experience filing."""

from __future__ import annotations

import dataclasses
import hashlib
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

from .consultation import ConsultationConfig, ConsultationLog, KbPolicy, run_consultation
from .core import ConsultationResult, MDTError, PatientCase, option_key
from .knowledge import KnowledgeStores, ReviewerParseFailure, route_and_store
from .llm import Backend
from .review import ReviewOutcome, safety_review
from .triage import TriageDecision, triage

logger = logging.getLogger(__name__)


class Mode(str, Enum):
    TRAIN = "Train"
    TEST = "Test"
    VANILLA = "Vanilla"

    @classmethod
    def parse(cls, value: "str | Mode") -> "Mode":
        if isinstance(value, Mode):
            return value
        for mode in cls:
            if mode.value.casefold() == str(value).casefold():
                return mode
        raise ValueError(f"unknown mode {value!r}; expected one of {[m.value for m in cls]}")


def case_seed(run_seed: int, case_id: str) -> int:
    """Per-case RNG seed, independent of scheduling order."""
    digest = hashlib.sha256(f"{run_seed}:{case_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


@dataclass
class CaseRecord:
    case_id: str
    gold: str | None
    predicted: str | None = None
    triage: TriageDecision | None = None
    result: ConsultationResult | None = None
    review: ReviewOutcome | None = None
    log: ConsultationLog | None = None
    stored: dict | None = None
    flags: list[str] = field(default_factory=list)
    error: str | None = None

    @property
    def scored(self) -> bool:
        return self.error is None and self.predicted is not None and self.gold is not None

    @property
    def correct(self) -> bool:
        return self.scored and option_key(self.predicted) == option_key(self.gold)

    def to_dict(self) -> dict[str, Any]:
        return {
            "case_id": self.case_id,
            "gold": self.gold,
            "predicted": self.predicted,
            "correct": self.correct if self.scored else None,
            "error": self.error,
            "flags": self.flags,
            "triage": self.triage.to_dict() if self.triage else None,
            "result": self.result.to_dict() if self.result else None,
            "review": self.review.to_dict() if self.review else None,
            "consultation": self.log.to_dict() if self.log else None,
            "stored": self.stored,
        }


def consult_case(
    case: PatientCase,
    backend: Backend,
    config: ConsultationConfig,
    stores: KnowledgeStores | None = None,
    mode: Mode | str = Mode.VANILLA,
    source_dataset: str = "",
) -> CaseRecord:
    """Run one case. Backend and parse errors end up in ``record.error``."""
    mode = Mode.parse(mode)
    record = CaseRecord(case_id=case.case_id, gold=case.gold_answer)
    use_kb = mode is not Mode.VANILLA and stores is not None
    config = dataclasses.replace(config, kb_policy=KbPolicy.ENABLED if use_kb else KbPolicy.DISABLED)
    chat = dict(config.chat)
    try:
        record.triage = triage(case, backend, config.max_parse_retries, config.prompt_dir, **chat)
        if record.triage.injected:
            record.flags.append("MandatoryRolesInjected")
        record.log = ConsultationLog()
        result = run_consultation(
            case,
            record.triage.roles,
            backend,
            config=config,
            kb_handle=stores if use_kb else None,
            log=record.log,
        )
        if record.log.abstentions:
            record.flags.append("Abstentions")
        if record.log.summary_fallbacks:
            record.flags.append("FallbackSummary")
        record.review = safety_review(
            case,
            result.pool.last,
            result.final_choice_id,
            backend,
            reflection=record.log.post_hoc_snippets or None,
            max_parse_retries=config.max_parse_retries,
            prompt_dir=config.prompt_dir,
            **chat,
        )
        record.flags.extend(record.review.flags)
        result = dataclasses.replace(result, final_choice_id=record.review.final_choice_id)
        record.result = result
        record.predicted = result.final_choice_id
    except MDTError as exc:
        logger.error("case %s failed: %s", case.case_id, exc)
        record.error = f"{type(exc).__name__}: {exc}"
        return record

    # Scoring precedes storage: the answer is validated before it is filed.
    if mode is Mode.TRAIN and stores is not None and case.gold_answer is not None:
        try:
            entry = route_and_store(
                result,
                case,
                backend,
                stores.correct,
                stores.chain,
                source_dataset=source_dataset,
                max_parse_retries=config.max_parse_retries,
                prompt_dir=config.prompt_dir,
                **chat,
            )
            record.stored = {"kind": entry.kind.value, "id": entry.entry_id}
        except ReviewerParseFailure as exc:
            logger.error("case %s: experience not stored: %s", case.case_id, exc)
            record.flags.append("ReviewerParseFailure")
        except MDTError as exc:
            logger.error("case %s: experience not stored: %s", case.case_id, exc)
            record.flags.append(f"StoreError:{type(exc).__name__}")
    return record
