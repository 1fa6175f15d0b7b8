"""Experience stores: verified-correct consultations and error reflections.

Each store is a flat list of embedded records searched by exhaustive cosine
scan. Stores persist as JSON lines, one entry per line, appended as they grow.
"""

from __future__ import annotations

import json
import logging
import math
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence, Union

import numpy as np

from .core import MDTError, ParseFailure, PatientCase, Role, ConsultationResult, option_key
from .llm import Backend, ChatRequest, EmbeddingVector
from .parsing import first_json_object
from .templates import load_template, render_case, render_summaries

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_TOP_K = 5


class DimensionMismatch(MDTError, ValueError):
    pass


class ZeroVector(MDTError, ValueError):
    pass


class SchemaVersionMismatch(MDTError, ValueError):
    pass


class ReviewerParseFailure(ParseFailure):
    pass


class ReadOnlyKnowledgeBase(MDTError, PermissionError):
    pass


class KbKind(str, Enum):
    CORRECT = "correct"
    CHAIN = "chain"


@dataclass(frozen=True)
class CorrectRecord:
    question: str
    answer: str
    summary_final: str

    KEYS = ("Question", "Answer", "Summary of S_final4")

    def __post_init__(self):
        for name in ("question", "answer", "summary_final"):
            if not str(getattr(self, name)).strip():
                raise ValueError(f"CorrectRecord.{name} must be non-empty")

    def to_dict(self) -> dict[str, str]:
        return dict(zip(self.KEYS, (self.question, self.answer, self.summary_final)))

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CorrectRecord":
        return cls(*(_text(data[k]) for k in cls.KEYS))


@dataclass(frozen=True)
class ChainRecord:
    question: str
    correct_answer: str
    initial_hypothesis: str
    analysis_process: str
    final_conclusion: str
    error_reflection: str

    KEYS = (
        "Question",
        "Correct Answer",
        "Initial Hypothesis",
        "Analysis Process",
        "Final Conclusion",
        "Error Reflection",
    )
    FIELDS = (
        "question",
        "correct_answer",
        "initial_hypothesis",
        "analysis_process",
        "final_conclusion",
        "error_reflection",
    )

    def __post_init__(self):
        for name in self.FIELDS:
            if not str(getattr(self, name)).strip():
                raise ValueError(f"ChainRecord.{name} must be non-empty")

    def to_dict(self) -> dict[str, str]:
        return {k: getattr(self, f) for k, f in zip(self.KEYS, self.FIELDS)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ChainRecord":
        return cls(*(_text(data[k]) for k in cls.KEYS))


Record = Union[CorrectRecord, ChainRecord]
RECORD_TYPES = {KbKind.CORRECT: CorrectRecord, KbKind.CHAIN: ChainRecord}


def _text(value: Any) -> str:
    """Reviewer values may arrive as text, lists of text, or nested objects."""
    if value is None:
        return ""
    if isinstance(value, str):
        return value.strip()
    if isinstance(value, list):
        return "\n".join(t for t in (_text(v) for v in value) if t)
    if isinstance(value, dict):
        return json.dumps(value, ensure_ascii=False)
    return str(value)


@dataclass(frozen=True)
class KbEntry:
    entry_id: str
    kind: KbKind
    record: Record
    embedding: EmbeddingVector
    source_dataset: str
    created_at: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": self.kind.value,
            "id": self.entry_id,
            "record": self.record.to_dict(),
            "embedding": list(self.embedding.values),
            "source_dataset": self.source_dataset,
            "created_at": self.created_at,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "KbEntry":
        kind = KbKind(data["kind"])
        return cls(
            entry_id=str(data["id"]),
            kind=kind,
            record=RECORD_TYPES[kind].from_dict(data["record"]),
            embedding=EmbeddingVector(tuple(data["embedding"])),
            source_dataset=str(data.get("source_dataset", "")),
            created_at=str(data["created_at"]),
        )


@dataclass(frozen=True)
class RetrievalHit:
    entry: KbEntry
    score: float

    def snippet(self) -> dict[str, Any]:
        label = "CorrectKB" if self.entry.kind is KbKind.CORRECT else "ChainKB"
        return {"source": label, "similarity": round(self.score, 4), **self.entry.record.to_dict()}


def _vector(v) -> np.ndarray:
    if isinstance(v, EmbeddingVector):
        return v.as_array()
    return np.asarray(v, dtype=np.float64)


def cosine(a, b) -> float:
    """Cosine similarity, clipped to [-1, 1]."""
    x, y = _vector(a), _vector(b)
    if x.shape != y.shape:
        raise DimensionMismatch(f"dimensions {x.shape[0]} and {y.shape[0]} differ")
    nx, ny = float(np.linalg.norm(x)), float(np.linalg.norm(y))
    if nx == 0.0 or ny == 0.0:
        raise ZeroVector("cosine undefined for a zero vector")
    return min(1.0, max(-1.0, float(np.dot(x, y)) / (nx * ny)))


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


class KnowledgeBase:
    """One experience store.

    Appends go through a single lock; readers take the current snapshot, so
    a search running during an append sees the store either before or after
    it. With ``path`` set every new entry is also appended to that file.
    """

    def __init__(
        self,
        kind: KbKind | str,
        path: str | Path | None = None,
        read_only: bool = False,
        clock: Callable[[], str] = _utc_now,
    ):
        self.kind = KbKind(kind)
        self.path = Path(path) if path is not None else None
        self.read_only = read_only
        self.clock = clock
        self._entries: tuple[KbEntry, ...] = ()
        self._matrix: np.ndarray | None = None
        self._norms: np.ndarray | None = None
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    @property
    def entries(self) -> tuple[KbEntry, ...]:
        return self._entries

    @property
    def dim(self) -> int | None:
        return len(self._entries[0].embedding) if self._entries else None

    def _check_entry(self, entry: KbEntry, snapshot: tuple[KbEntry, ...]) -> None:
        if entry.kind is not self.kind:
            raise ValueError(f"{entry.kind.value} entry cannot go into a {self.kind.value} store")
        if snapshot and len(entry.embedding) != len(snapshot[0].embedding):
            raise DimensionMismatch(
                f"embedding dimension {len(entry.embedding)} != store dimension {len(snapshot[0].embedding)}"
            )
        if not any(entry.embedding.values):
            raise ZeroVector("cannot index a zero embedding")

    def add(self, record: Record, embedding: EmbeddingVector, source_dataset: str = "") -> KbEntry:
        if self.read_only:
            raise ReadOnlyKnowledgeBase(f"{self.kind.value} store is read-only")
        if not isinstance(record, RECORD_TYPES[self.kind]):
            raise TypeError(f"{type(record).__name__} does not belong in a {self.kind.value} store")
        with self._lock:
            snapshot = self._entries
            entry = KbEntry(
                entry_id=f"{self.kind.value}-{len(snapshot) + 1:06d}",
                kind=self.kind,
                record=record,
                embedding=embedding,
                source_dataset=source_dataset,
                created_at=self.clock(),
            )
            self._check_entry(entry, snapshot)
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry.to_dict(), ensure_ascii=False) + "\n")
            self._entries = snapshot + (entry,)
            self._matrix = None
        return entry

    def extend(self, entries: Iterable[KbEntry]) -> None:
        with self._lock:
            grown = list(self._entries)
            for entry in entries:
                self._check_entry(entry, grown[:1])
                grown.append(entry)
            self._entries = tuple(grown)
            self._matrix = None

    def _index(self, snapshot: tuple[KbEntry, ...]) -> tuple[np.ndarray, np.ndarray]:
        matrix, norms = self._matrix, self._norms
        if matrix is None or matrix.shape[0] != len(snapshot):
            matrix = np.array([e.embedding.values for e in snapshot], dtype=np.float64)
            norms = np.linalg.norm(matrix, axis=1)
            self._matrix, self._norms = matrix, norms
        return matrix, norms

    def search(self, query, k: int = DEFAULT_TOP_K) -> list[RetrievalHit]:
        """Top-k by cosine; ties go to the older entry, then the smaller id."""
        if k < 1:
            raise ValueError("k must be >= 1")
        snapshot = self._entries
        if not snapshot:
            return []
        q = _vector(query)
        matrix, norms = self._index(snapshot)
        if q.shape[0] != matrix.shape[1]:
            raise DimensionMismatch(f"query dimension {q.shape[0]} != store dimension {matrix.shape[1]}")
        qn = float(np.linalg.norm(q))
        if qn == 0.0:
            raise ZeroVector("query embedding is zero")
        scores = np.clip((matrix @ q) / (norms * qn), -1.0, 1.0)
        order = sorted(
            range(len(snapshot)),
            key=lambda i: (-scores[i], snapshot[i].created_at, snapshot[i].entry_id),
        )
        return [RetrievalHit(snapshot[i], float(scores[i])) for i in order[:k]]

    def persist(self, path: str | Path) -> None:
        persist(self, path)

    @classmethod
    def load(cls, path: str | Path, kind: KbKind | str | None = None, read_only: bool = False, **kwargs) -> "KnowledgeBase":
        entries = read_entries(path)
        if kind is None:
            kinds = {e.kind for e in entries}
            if len(kinds) > 1:
                raise SchemaVersionMismatch(f"{path}: mixed entry kinds {sorted(k.value for k in kinds)}")
            kind = kinds.pop() if kinds else KbKind.CORRECT
        kb = cls(kind, path=None if read_only else path, read_only=read_only, **kwargs)
        kb.extend(entries)
        return kb


def read_entries(path: str | Path) -> list[KbEntry]:
    entries = []
    with Path(path).open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaVersionMismatch(f"{path}:{line_no}: not valid JSON ({exc.msg})") from exc
            if not isinstance(data, dict) or data.get("schema_version") != SCHEMA_VERSION:
                found = data.get("schema_version") if isinstance(data, dict) else None
                raise SchemaVersionMismatch(
                    f"{path}:{line_no}: expected schema_version {SCHEMA_VERSION}, found {found!r}"
                )
            try:
                entries.append(KbEntry.from_dict(data))
            except (KeyError, ValueError, TypeError) as exc:
                raise SchemaVersionMismatch(f"{path}:{line_no}: malformed entry ({exc})") from exc
    return entries


def persist(kb: KnowledgeBase, path: str | Path) -> None:
    """Write every entry of ``kb`` to ``path``; an empty store gives an empty file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for entry in kb.entries:
            fh.write(json.dumps(entry.to_dict(), ensure_ascii=False) + "\n")


def load(path: str | Path, kind: KbKind | str | None = None, read_only: bool = False) -> KnowledgeBase:
    return KnowledgeBase.load(path, kind=kind, read_only=read_only)


@dataclass
class KnowledgeStores:
    """The correct-answer store and the reflection store used together."""

    correct: KnowledgeBase
    chain: KnowledgeBase

    CORRECT_FILE = "correct.jsonl"
    CHAIN_FILE = "chain.jsonl"

    @classmethod
    def in_memory(cls, clock: Callable[[], str] = _utc_now) -> "KnowledgeStores":
        return cls(KnowledgeBase(KbKind.CORRECT, clock=clock), KnowledgeBase(KbKind.CHAIN, clock=clock))

    @classmethod
    def open_dir(cls, directory: str | Path, read_only: bool = False, create: bool = False, **kwargs) -> "KnowledgeStores":
        directory = Path(directory)
        stores = []
        for kind, name in ((KbKind.CORRECT, cls.CORRECT_FILE), (KbKind.CHAIN, cls.CHAIN_FILE)):
            path = directory / name
            if path.exists():
                stores.append(KnowledgeBase.load(path, kind=kind, read_only=read_only, **kwargs))
            elif create and not read_only:
                directory.mkdir(parents=True, exist_ok=True)
                path.touch()
                stores.append(KnowledgeBase(kind, path=path, **kwargs))
            else:
                raise FileNotFoundError(f"knowledge base file {path} does not exist")
        return cls(*stores)

    def sizes(self) -> dict[str, int]:
        return {"correct": len(self.correct), "chain": len(self.chain)}


def retrieve(
    query_case: PatientCase,
    backend: Backend,
    correct_kb: KnowledgeBase,
    chain_kb: KnowledgeBase,
    k: int = DEFAULT_TOP_K,
    pooled: bool = False,
) -> tuple[list[RetrievalHit], list[RetrievalHit]]:
    """Top-k hits from each store for a case (or top-k overall with ``pooled``)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not len(correct_kb) and not len(chain_kb):
        return [], []
    query = backend.embed(query_case.query_text())
    correct_hits = correct_kb.search(query, k) if len(correct_kb) else []
    chain_hits = chain_kb.search(query, k) if len(chain_kb) else []
    if pooled:
        merged = sorted(
            correct_hits + chain_hits,
            key=lambda h: (-h.score, h.entry.created_at, h.entry.kind.value, h.entry.entry_id),
        )[:k]
        correct_hits = [h for h in merged if h.entry.kind is KbKind.CORRECT]
        chain_hits = [h for h in merged if h.entry.kind is KbKind.CHAIN]
    return correct_hits, chain_hits


class KbGate(str, Enum):
    NO_KB = "NoKb"
    INJECT_INTO_PROMPT = "InjectIntoPrompt"
    POST_HOC_REFLECT = "PostHocReflect"


def kb_gate(round_no: int, round1_had_consensus: bool, current_conflict: bool) -> KbGate:
    """When retrieved experience may be used.

    ``round_no`` is the round about to use the stores. Round 1 never does.
    After a first-round consensus there is no round 2, so any later query is
    the post-discussion reflection. Otherwise a conflicted round 2+ gets the
    experience block injected into its prompts.
    """
    if round_no < 1:
        raise ValueError("round must be >= 1")
    if round_no == 1:
        return KbGate.NO_KB
    if round1_had_consensus:
        return KbGate.POST_HOC_REFLECT
    if current_conflict:
        return KbGate.INJECT_INTO_PROMPT
    return KbGate.NO_KB


REVIEWER_REMINDER = (
    "Your previous reply could not be read. Reply with the JSON object only, using exactly "
    "the keys listed, each with a non-empty value."
)


def build_reviewer_prompt(
    result: ConsultationResult, case: PatientCase, correct: bool, prompt_dir=None, attempt: int = 0, **chat_kwargs
) -> ChatRequest:
    if correct:
        summaries = [result.pool[result.pool.rounds[-1]]]
        template = "cot_reviewer_correct"
    else:
        summaries = list(result.pool.entries)
        template = "cot_reviewer_chain"
    parts = [
        render_case(case),
        f"Team's final answer: {case.render_option(result.final_choice_id)}",
        f"Correct answer: {case.render_option(case.gold_answer)}",
        ("Final-round summary:\n" if correct else "All rounds from the shared pool:\n") + render_summaries(summaries),
    ]
    user = "\n\n".join(parts)
    if attempt:
        user += "\n\n" + REVIEWER_REMINDER
    return ChatRequest(
        system_prompt=load_template(template, prompt_dir).substitute(),
        user_prompt=user,
        tags={
            "role": Role.COT_REVIEWER.value,
            "case_id": case.case_id,
            "attempt": attempt,
            "kind": (KbKind.CORRECT if correct else KbKind.CHAIN).value,
        },
        **chat_kwargs,
    )


def parse_reviewer_reply(reply: str, case: PatientCase, correct: bool) -> Record:
    """Reviewer JSON to a record. Question and answer fields come from the case."""
    obj = first_json_object(reply)
    if not isinstance(obj, dict):
        raise ReviewerParseFailure("reviewer reply is not an object")
    fields = {str(k).strip().casefold(): v for k, v in obj.items()}
    answer = case.render_option(case.gold_answer)
    if correct:
        summary = _text(fields.get("summary of s_final4") or _lookup_prefix(fields, "summary"))
        if not summary:
            raise ReviewerParseFailure("missing summary of the final round")
        return CorrectRecord(question=case.question, answer=answer, summary_final=summary)
    values = {}
    for key, name in zip(ChainRecord.KEYS[2:], ChainRecord.FIELDS[2:]):
        values[name] = _text(fields.get(key.casefold()))
        if not values[name]:
            raise ReviewerParseFailure(f"missing {key!r}")
    return ChainRecord(question=case.question, correct_answer=answer, **values)


def _lookup_prefix(fields: Mapping[str, Any], prefix: str) -> Any:
    for key, value in fields.items():
        if key.startswith(prefix):
            return value
    return None


def outcome_is_valid(result: ConsultationResult, case: PatientCase) -> bool:
    return option_key(result.final_choice_id) == option_key(case.gold_answer)


def route_and_store(
    result: ConsultationResult,
    case: PatientCase,
    backend: Backend,
    correct_kb: KnowledgeBase,
    chain_kb: KnowledgeBase,
    source_dataset: str = "",
    max_parse_retries: int = 2,
    prompt_dir=None,
    **chat_kwargs,
) -> KbEntry:
    """File the consultation as a correct experience or an error reflection."""
    if case.gold_answer is None:
        raise ValueError(f"case {case.case_id} has no gold answer to validate against")
    correct = outcome_is_valid(result, case)
    record = None
    last = None
    for attempt in range(max_parse_retries + 1):
        reply = backend.chat(build_reviewer_prompt(result, case, correct, prompt_dir, attempt, **chat_kwargs))
        try:
            record = parse_reviewer_reply(reply, case, correct)
            break
        except (ParseFailure, ValueError) as exc:
            logger.warning("case %s: reviewer parse failed (attempt %d): %s", case.case_id, attempt, exc)
            last = exc
    if record is None:
        raise ReviewerParseFailure(f"case {case.case_id}: reviewer unreadable after retries: {last}")
    target = correct_kb if correct else chain_kb
    return target.add(record, backend.embed(case.query_text()), source_dataset)
