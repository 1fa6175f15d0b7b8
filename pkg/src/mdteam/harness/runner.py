"""Batch evaluation and the experiment drivers built on it."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import yaml

from ..consultation import ConsultationConfig
from ..core import MDTError, PatientCase, dumps_canonical
from ..knowledge import KnowledgeBase, KnowledgeStores
from ..llm import DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE, Backend, OpenAIBackend
from ..mock import mock_backend_from_file
from ..pipeline import CaseRecord, Mode, case_seed, consult_case
from .ingest import DatasetKind, ingest
from .metrics import Metrics, compute_metrics

logger = logging.getLogger(__name__)

DEFAULT_CHECKPOINT_EVERY = 100


class ConfigError(MDTError, ValueError):
    pass


@dataclass
class RunConfig:
    dataset_path: Path
    dataset_kind: DatasetKind = DatasetKind.MEDQA
    mode: Mode = Mode.VANILLA
    kb_dir: Path | None = None
    backend: dict[str, Any] = field(default_factory=lambda: {"kind": "openai"})
    seed: int = 42
    concurrency: int = 1
    sequential: bool = True
    max_rounds: int = 10
    top_k: int = 5
    pooled_retrieval: bool = False
    checkpoint_every: int = DEFAULT_CHECKPOINT_EVERY
    output_dir: Path | None = None
    limit: int | None = None
    eval_path: Path | None = None
    eval_kind: DatasetKind | None = None
    prompt_dir: Path | None = None
    name: str | None = None

    def __post_init__(self):
        self.dataset_path = Path(self.dataset_path)
        self.dataset_kind = DatasetKind.parse(self.dataset_kind)
        self.mode = Mode.parse(self.mode)
        for attr in ("kb_dir", "output_dir", "eval_path", "prompt_dir"):
            value = getattr(self, attr)
            if value is not None:
                setattr(self, attr, Path(value))
        if self.eval_kind is not None:
            self.eval_kind = DatasetKind.parse(self.eval_kind)
        if self.max_rounds < 1:
            raise ConfigError("max_rounds must be >= 1")
        if self.concurrency < 1:
            raise ConfigError("concurrency must be >= 1")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")

    @property
    def dataset_name(self) -> str:
        return self.name or self.dataset_kind.value

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "RunConfig":
        """YAML or JSON config; relative paths resolve against the file's folder."""
        path = Path(path)
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a mapping")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data, base_dir=path.parent)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], base_dir: Path | None = None) -> "RunConfig":
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known - {"cross"}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        data.pop("cross", None)
        if base_dir is not None:
            for key in ("dataset_path", "kb_dir", "output_dir", "eval_path", "prompt_dir"):
                if data.get(key) is not None:
                    data[key] = base_dir / data[key]
            backend = dict(data.get("backend") or {})
            if backend.get("script"):
                backend["script"] = str(base_dir / backend["script"])
            data["backend"] = backend or {"kind": "openai"}
        if "dataset_path" not in data:
            raise ConfigError("config needs dataset_path")
        try:
            return cls(**data)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def consultation_config(self) -> ConsultationConfig:
        chat = {
            "temperature": float(self.backend.get("temperature", DEFAULT_TEMPERATURE)),
            "max_tokens": int(self.backend.get("max_tokens", DEFAULT_MAX_TOKENS)),
        }
        if self.backend.get("model"):
            chat["model_name"] = self.backend["model"]
        return ConsultationConfig(
            max_rounds=self.max_rounds,
            rng_seed=self.seed,
            top_k=self.top_k,
            pooled_retrieval=self.pooled_retrieval,
            prompt_dir=str(self.prompt_dir) if self.prompt_dir else None,
            chat=chat,
        )

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Path):
                value = str(value)
            elif hasattr(value, "value"):
                value = value.value
            out[f.name] = value
        return out


def build_backend(settings: Mapping[str, Any], concurrency: int = 8) -> Backend:
    kind = str(settings.get("kind", "openai")).lower()
    if kind == "mock":
        if not settings.get("script"):
            raise ConfigError("mock backend needs a script file")
        return mock_backend_from_file(settings["script"], embedding_dim=int(settings.get("embedding_dim", 256)))
    if kind in ("openai", "live"):
        key_env = settings.get("api_key_env", "MDT_API_KEY")
        api_key = os.environ.get(key_env, "")
        if not api_key:
            raise ConfigError(f"live backend needs the {key_env} environment variable")
        kwargs = {
            k: settings[k]
            for k in ("base_url", "model", "embedding_model", "max_attempts", "timeout")
            if settings.get(k) is not None
        }
        return OpenAIBackend(api_key=api_key, max_concurrency=concurrency, **kwargs)
    raise ConfigError(f"unknown backend kind {kind!r}")


def open_stores(mode: Mode, kb_dir: Path | None) -> KnowledgeStores | None:
    """Stores for a run. Test mode gets a read-only view and never writes."""
    if mode is Mode.VANILLA:
        return None
    if kb_dir is None:
        raise ConfigError(f"{mode.value} mode needs kb_dir")
    if mode is Mode.TRAIN:
        return KnowledgeStores.open_dir(kb_dir, create=True)
    try:
        return KnowledgeStores.open_dir(kb_dir, read_only=True)
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from exc


def read_only_view(stores: KnowledgeStores) -> KnowledgeStores:
    views = []
    for kb in (stores.correct, stores.chain):
        view = KnowledgeBase(kb.kind, read_only=True)
        view.extend(kb.entries)
        views.append(view)
    return KnowledgeStores(*views)


@dataclass
class RunOutput:
    metrics: Metrics
    records: list[CaseRecord]
    checkpoints: list[dict[str, Any]]

    def log_lines(self) -> list[str]:
        return [dumps_canonical(r.to_dict()) for r in self.records]


def run_cases(
    cases: Sequence[PatientCase],
    backend: Backend,
    config: ConsultationConfig,
    stores: KnowledgeStores | None,
    mode: Mode,
    seed: int,
    source_dataset: str = "",
    concurrency: int = 1,
    sequential: bool = True,
    on_record: Callable[[int, CaseRecord], None] | None = None,
) -> list[CaseRecord]:
    def one(case: PatientCase) -> CaseRecord:
        case_config = dataclasses.replace(config, rng_seed=case_seed(seed, case.case_id))
        return consult_case(case, backend, case_config, stores, mode, source_dataset)

    if sequential or concurrency == 1:
        records = []
        for i, case in enumerate(cases):
            records.append(one(case))
            if on_record:
                on_record(i, records[-1])
        return records
    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        records = list(pool.map(one, cases))
    if on_record:
        for i, r in enumerate(records):
            on_record(i, r)
    return records


def running_checkpoints(records: Sequence[CaseRecord], every: int, labels=None) -> list[dict[str, Any]]:
    rows = []
    for end in range(every, len(records) + every, every):
        end = min(end, len(records))
        if rows and rows[-1]["cases"] == end:
            break
        m = compute_metrics(records[:end], labels)
        rows.append({"cases": end, "accuracy": m.accuracy, "f1": m.f1, "n_scored": m.n_scored})
    return rows


def evaluate(
    config: RunConfig,
    backend: Backend | None = None,
    cases: Sequence[PatientCase] | None = None,
    stores: KnowledgeStores | None = None,
) -> RunOutput:
    """Run every case of the dataset in the configured mode.

    Train mode reads and grows the stores; Test mode only reads them; Vanilla
    runs without stores. Errors are recorded per case and the run goes on.
    """
    if stores is None:
        stores = open_stores(config.mode, config.kb_dir)
    elif config.mode is Mode.TEST:
        stores = read_only_view(stores)
    if cases is None:
        cases = ingest(config.dataset_path, config.dataset_kind, limit=config.limit)
    backend = backend or build_backend(config.backend, config.concurrency)
    labels = sorted({k for c in cases for k in c.options})
    records = run_cases(
        cases,
        backend,
        config.consultation_config(),
        stores if config.mode is not Mode.VANILLA else None,
        config.mode,
        config.seed,
        source_dataset=config.dataset_name,
        concurrency=config.concurrency,
        sequential=config.sequential,
    )
    metrics = compute_metrics(records, labels)
    checkpoints = running_checkpoints(records, config.checkpoint_every, labels)
    if stores is not None and config.mode is Mode.TRAIN:
        sizes = stores.sizes()
        logger.info("stores now hold %d correct and %d chain entries", sizes["correct"], sizes["chain"])
    output = RunOutput(metrics, list(records), checkpoints)
    if config.output_dir is not None:
        write_run(output, config.output_dir, config)
    return output


def write_run(output: RunOutput, out_dir: Path, config: RunConfig | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "run_log.jsonl").open("w", encoding="utf-8") as fh:
        if config is not None:
            # Output location is left out so reruns elsewhere log identically.
            settings = {k: v for k, v in config.to_dict().items() if k != "output_dir"}
            fh.write(dumps_canonical({"config": settings}) + "\n")
        for line in output.log_lines():
            fh.write(line + "\n")
    (out_dir / "metrics.json").write_text(
        json.dumps(output.metrics.to_dict(), indent=2) + "\n", encoding="utf-8"
    )
    write_csv(out_dir / "curve.csv", output.checkpoints, ["cases", "accuracy", "f1", "n_scored"])


def write_csv(path: Path, rows: Sequence[Mapping[str, Any]], columns: Sequence[str]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row.get(c) for c in columns})


def cross_dataset(
    config_a: RunConfig,
    config_b: RunConfig,
    kb_a: Path | KnowledgeStores,
    kb_b: Path | KnowledgeStores,
    backend: Backend | None = None,
    cases_a: Sequence[PatientCase] | None = None,
    cases_b: Sequence[PatientCase] | None = None,
) -> dict[str, dict[str, Metrics]]:
    """Evaluate both datasets without stores and against each dataset's stores.

    Returns ``{dataset: {"Vanilla": m, "KB:<a>": m, "KB:<b>": m}}``; six cells.
    """

    def stores_for(kb) -> KnowledgeStores:
        if isinstance(kb, KnowledgeStores):
            return read_only_view(kb)
        try:
            return KnowledgeStores.open_dir(kb, read_only=True)
        except FileNotFoundError as exc:
            raise ConfigError(str(exc)) from exc

    # Both store sets must load before any case runs.
    sources = {f"KB:{config_a.dataset_name}": stores_for(kb_a), f"KB:{config_b.dataset_name}": stores_for(kb_b)}
    if len(sources) != 2:
        raise ConfigError("the two datasets need distinct names")
    matrix: dict[str, dict[str, Metrics]] = {}
    for config, cases in ((config_a, cases_a), (config_b, cases_b)):
        if cases is None:
            cases = ingest(config.dataset_path, config.dataset_kind, limit=config.limit)
        row = {}
        vanilla = dataclasses.replace(config, mode=Mode.VANILLA, output_dir=None)
        row["Vanilla"] = evaluate(vanilla, backend, cases).metrics
        for label, stores in sources.items():
            test = dataclasses.replace(config, mode=Mode.TEST, output_dir=None)
            row[label] = evaluate(test, backend, cases, stores=stores).metrics
        matrix[config.dataset_name] = row
    return matrix


def cross_rows(matrix: Mapping[str, Mapping[str, Metrics]]) -> list[dict[str, Any]]:
    return [
        {"dataset": ds, "kb_source": src, "accuracy": m.accuracy, "f1": m.f1, "n_scored": m.n_scored}
        for ds, row in matrix.items()
        for src, m in row.items()
    ]


def self_evolution(
    config: RunConfig,
    every: int,
    backend: Backend | None = None,
    train_cases: Sequence[PatientCase] | None = None,
    eval_cases: Sequence[PatientCase] | None = None,
) -> list[dict[str, Any]]:
    """Accuracy on the evaluation set as the stores fill from the training set.

    Training cases stream through in dataset order; after every ``every`` of
    them the evaluation set is scored in Test mode against a read-only
    snapshot. The first row is the empty-store baseline. Stores live in
    memory only.
    """
    if every < 1:
        raise ConfigError("checkpoint interval must be >= 1")
    if train_cases is None:
        train_cases = ingest(config.dataset_path, config.dataset_kind, limit=config.limit)
    if eval_cases is None:
        if config.eval_path is None:
            raise ConfigError("self-evolution curve needs eval_path")
        eval_cases = ingest(config.eval_path, config.eval_kind or config.dataset_kind)
    backend = backend or build_backend(config.backend, config.concurrency)
    # The curve measures growth from nothing, so it never touches kb_dir.
    stores = KnowledgeStores.in_memory()
    labels = sorted({k for c in eval_cases for k in c.options})
    consult_config = config.consultation_config()

    def checkpoint(n_train: int) -> dict[str, Any]:
        records = run_cases(
            eval_cases, backend, consult_config, read_only_view(stores), Mode.TEST, config.seed,
            concurrency=config.concurrency, sequential=config.sequential,
        )
        m = compute_metrics(records, labels)
        sizes = stores.sizes()
        return {
            "train_cases": n_train,
            "correct_kb": sizes["correct"],
            "chain_kb": sizes["chain"],
            "accuracy": m.accuracy,
            "f1": m.f1,
            "n_scored": m.n_scored,
        }

    rows = [checkpoint(0)]
    for start in range(0, len(train_cases), every):
        batch = train_cases[start : start + every]
        run_cases(batch, backend, consult_config, stores, Mode.TRAIN, config.seed, config.dataset_name)
        rows.append(checkpoint(start + len(batch)))
    return rows


CURVE_COLUMNS = ["train_cases", "correct_kb", "chain_kb", "accuracy", "f1", "n_scored"]
CROSS_COLUMNS = ["dataset", "kb_source", "accuracy", "f1", "n_scored"]
