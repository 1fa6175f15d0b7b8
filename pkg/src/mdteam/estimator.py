"""Estimator-style wrapper: ``fit`` grows the knowledge stores, ``predict`` consults."""

from __future__ import annotations

import dataclasses
from typing import Any, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .consultation import DEFAULT_MAX_ROUNDS, ConsultationConfig
from .core import PatientCase, normalize_option_id
from .harness.runner import run_cases
from .knowledge import DEFAULT_TOP_K, KnowledgeStores
from .llm import DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE, Backend
from .pipeline import CaseRecord, Mode


def check_cases(X, y=None) -> tuple[list[PatientCase], list[str] | None]:
    """Coerce X to PatientCases and y to option ids valid for each case.

    X may hold PatientCase objects or their dict form. When y is given it
    replaces each case's gold answer.
    """
    if isinstance(X, (PatientCase, Mapping, str)):
        raise TypeError("X must be a sequence of cases, not a single case")
    cases = [c if isinstance(c, PatientCase) else PatientCase.from_dict(c) for c in X]
    if not cases:
        raise ValueError("X holds no cases")
    ids = [c.case_id for c in cases]
    if len(set(ids)) != len(ids):
        raise ValueError("case ids in X must be unique")
    if y is None:
        return cases, None
    y = [str(v) for v in np.asarray(y, dtype=object).ravel()]
    if len(y) != len(cases):
        raise ValueError(f"X has {len(cases)} cases but y has {len(y)} labels")
    labels = [normalize_option_id(v, c.options) for v, c in zip(y, cases)]
    cases = [dataclasses.replace(c, gold_answer=lbl) for c, lbl in zip(cases, labels)]
    return cases, labels


class MDTeamClassifier(ClassifierMixin, BaseEstimator):
    """Multiple-choice classifier backed by a specialist consultation.

    ``fit`` runs the training cases in Train mode, filing each outcome into
    the stores; ``predict`` runs cases in Test mode against them (or without
    them when ``use_knowledge`` is False).
    """

    def __init__(
        self,
        backend: Backend | None = None,
        max_rounds: int = DEFAULT_MAX_ROUNDS,
        use_knowledge: bool = True,
        top_k: int = DEFAULT_TOP_K,
        pooled_retrieval: bool = False,
        random_state: int = 42,
        n_jobs: int = 1,
        knowledge_dir: str | None = None,
        source_dataset: str = "",
        prompt_dir: str | None = None,
        temperature: float = DEFAULT_TEMPERATURE,
        max_tokens: int = DEFAULT_MAX_TOKENS,
    ):
        self.backend = backend
        self.max_rounds = max_rounds
        self.use_knowledge = use_knowledge
        self.top_k = top_k
        self.pooled_retrieval = pooled_retrieval
        self.random_state = random_state
        self.n_jobs = n_jobs
        self.knowledge_dir = knowledge_dir
        self.source_dataset = source_dataset
        self.prompt_dir = prompt_dir
        self.temperature = temperature
        self.max_tokens = max_tokens

    def _config(self) -> ConsultationConfig:
        return ConsultationConfig(
            max_rounds=self.max_rounds,
            rng_seed=self.random_state,
            top_k=self.top_k,
            pooled_retrieval=self.pooled_retrieval,
            prompt_dir=self.prompt_dir,
            chat={"temperature": self.temperature, "max_tokens": self.max_tokens},
        )

    def _backend(self) -> Backend:
        if self.backend is None:
            raise ValueError("backend must be set")
        return self.backend

    def _run(self, cases, stores, mode) -> list[CaseRecord]:
        return run_cases(
            cases,
            self._backend(),
            self._config(),
            stores,
            mode,
            self.random_state,
            source_dataset=self.source_dataset,
            concurrency=max(1, self.n_jobs),
            sequential=self.n_jobs == 1 or mode is Mode.TRAIN,
        )

    def _new_stores(self) -> KnowledgeStores:
        if self.knowledge_dir is None:
            return KnowledgeStores.in_memory()
        return KnowledgeStores.open_dir(self.knowledge_dir, create=True)

    def fit(self, X, y=None):
        cases, _ = check_cases(X, y)
        if any(c.gold_answer is None for c in cases):
            raise ValueError("fit needs a gold answer for every case")
        self.stores_ = self._new_stores()
        self.history_: list[CaseRecord] = []
        self.classes_ = np.array([])
        return self.partial_fit(cases)

    def partial_fit(self, X, y=None):
        cases, _ = check_cases(X, y)
        if not hasattr(self, "stores_"):
            self.stores_ = self._new_stores()
            self.history_ = []
            self.classes_ = np.array([])
        records = self._run(cases, self.stores_ if self.use_knowledge else None, Mode.TRAIN)
        self.history_.extend(records)
        seen = set(self.classes_.tolist()) | {k for c in cases for k in c.options}
        self.classes_ = np.array(sorted(seen), dtype=object)
        return self

    def consult(self, X) -> list[CaseRecord]:
        """Full per-case records for X."""
        check_is_fitted(self, "stores_")
        cases, _ = check_cases(X)
        if self.use_knowledge:
            return self._run(cases, self.stores_, Mode.TEST)
        return self._run(cases, None, Mode.VANILLA)

    def predict(self, X) -> np.ndarray:
        return np.array([r.predicted for r in self.consult(X)], dtype=object)

    def score(self, X, y=None, sample_weight=None) -> float:
        cases, labels = check_cases(X, y)
        if labels is None:
            labels = [c.gold_answer for c in cases]
        predicted = self.predict(cases)
        hits = np.array([p is not None and p.casefold() == g.casefold() for p, g in zip(predicted, labels)], dtype=float)
        return float(np.average(hits, weights=sample_weight))

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.non_deterministic = False
        tags.input_tags.two_d_array = False
        return tags

    def _more_tags(self) -> dict[str, Any]:
        return {"X_types": ["dict"], "requires_y": False}
