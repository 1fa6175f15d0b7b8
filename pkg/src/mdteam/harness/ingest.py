"""JSONL loaders for MedQA and PubMedQA."""

from __future__ import annotations

import json
from enum import Enum
from pathlib import Path
from typing import Any, Mapping

from ..core import MDTError, PatientCase

PUBMEDQA_OPTIONS = {"yes": "yes", "no": "no", "maybe": "maybe"}


class MalformedRecord(MDTError, ValueError):
    pass


class UnknownKind(MDTError, ValueError):
    pass


class DatasetKind(str, Enum):
    MEDQA = "MedQA"
    PUBMEDQA = "PubMedQA"

    @classmethod
    def parse(cls, value: "str | DatasetKind") -> "DatasetKind":
        if isinstance(value, DatasetKind):
            return value
        for kind in cls:
            if kind.value.casefold() == str(value).casefold():
                return kind
        raise UnknownKind(f"unknown dataset kind {value!r}; expected MedQA or PubMedQA")


def _get(data: Mapping[str, Any], *names: str) -> Any:
    for name in names:
        if name in data:
            return data[name]
    return None


def _medqa_case(data: Mapping[str, Any], case_id: str, require_gold: bool) -> PatientCase:
    question = _get(data, "question")
    options = _get(data, "options")
    if not isinstance(question, str) or not question.strip():
        raise ValueError("missing question")
    if isinstance(options, list):
        # Some dumps store options as [{"key": "A", "value": "..."}].
        options = {o["key"]: o["value"] for o in options}
    if not isinstance(options, dict) or not options:
        raise ValueError("missing options")
    gold = _get(data, "answer_idx")
    if gold is None and require_gold:
        raise ValueError("missing answer_idx")
    return PatientCase(case_id=case_id, background="", question=question, options=options, gold_answer=gold)


def _pubmedqa_case(data: Mapping[str, Any], case_id: str, require_gold: bool) -> PatientCase:
    question = _get(data, "question", "QUESTION")
    contexts = _get(data, "contexts", "CONTEXTS", "context")
    if not isinstance(question, str) or not question.strip():
        raise ValueError("missing question")
    if isinstance(contexts, dict):
        contexts = contexts.get("contexts", [])
    if isinstance(contexts, str):
        contexts = [contexts]
    if contexts is None:
        raise ValueError("missing contexts")
    gold = _get(data, "final_decision")
    if gold is None and require_gold:
        raise ValueError("missing final_decision")
    return PatientCase(
        case_id=case_id,
        background="\n".join(str(c) for c in contexts),
        question=question,
        options=dict(PUBMEDQA_OPTIONS),
        gold_answer=gold.strip().lower() if isinstance(gold, str) else gold,
    )


def ingest(path: str | Path, kind: DatasetKind | str, require_gold: bool = True, limit: int | None = None) -> list[PatientCase]:
    """Read one JSON object per line into cases; ids default to ``<stem>-<line>``."""
    kind = DatasetKind.parse(kind)
    path = Path(path)
    build = _medqa_case if kind is DatasetKind.MEDQA else _pubmedqa_case
    cases = []
    seen = set()
    with path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
                if not isinstance(data, dict):
                    raise ValueError("line is not a JSON object")
                raw_id = _get(data, "id", "case_id", "pubid", "pmid")
                case_id = str(raw_id) if raw_id is not None else f"{path.stem}-{line_no}"
                if case_id in seen:
                    raise ValueError(f"duplicate case id {case_id!r}")
                case = build(data, case_id, require_gold)
            except (ValueError, KeyError, TypeError, AttributeError) as exc:
                raise MalformedRecord(f"{path}:{line_no}: {exc}") from exc
            seen.add(case_id)
            cases.append(case)
            if limit is not None and len(cases) >= limit:
                break
    return cases
