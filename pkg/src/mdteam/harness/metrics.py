"""Accuracy, macro-F1 and run statistics."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from ..core import MDTError, option_key


class LengthMismatch(MDTError, ValueError):
    pass


def macro_f1(predictions: Sequence[str], golds: Sequence[str], labels: Iterable[str]) -> float:
    """Unweighted mean of per-label F1.

    Labels that occur in neither predictions nor golds are left out of the mean.
    """
    if len(predictions) != len(golds):
        raise LengthMismatch(f"{len(predictions)} predictions for {len(golds)} golds")
    if not golds:
        raise LengthMismatch("macro-F1 is undefined for an empty set")
    preds = [option_key(p) if p is not None else None for p in predictions]
    gold = [option_key(g) for g in golds]
    label_keys = {option_key(lbl) for lbl in labels}
    if not set(gold) <= label_keys:
        raise ValueError(f"labels do not cover golds {sorted(set(gold) - label_keys)}")
    scores = []
    for label in sorted(label_keys):
        tp = sum(p == label and g == label for p, g in zip(preds, gold))
        fp = sum(p == label and g != label for p, g in zip(preds, gold))
        fn = sum(p != label and g == label for p, g in zip(preds, gold))
        if tp + fp + fn == 0:
            continue
        scores.append(2 * tp / (2 * tp + fp + fn))
    return sum(scores) / len(scores)


@dataclass
class Metrics:
    accuracy: float
    f1: float
    n_cases: int
    n_scored: int
    n_correct: int
    n_errored: int
    termination: dict[str, int] = field(default_factory=dict)
    mean_rounds: float = 0.0
    specialists: dict[str, int] = field(default_factory=dict)
    panel_sizes: dict[str, int] = field(default_factory=dict)
    flags: dict[str, int] = field(default_factory=dict)
    f1_kind: str = "macro-F1 over answer labels"

    def to_dict(self) -> dict[str, Any]:
        return {
            "accuracy": self.accuracy,
            "f1": self.f1,
            "f1_kind": self.f1_kind,
            "n_cases": self.n_cases,
            "n_scored": self.n_scored,
            "n_correct": self.n_correct,
            "n_errored": self.n_errored,
            "termination": self.termination,
            "mean_rounds": self.mean_rounds,
            "specialists": self.specialists,
            "panel_sizes": self.panel_sizes,
            "flags": self.flags,
        }


def compute_metrics(records: Sequence, labels: Iterable[str] | None = None) -> Metrics:
    """Metrics from pipeline CaseRecords (or their dict form)."""
    rows = [r if isinstance(r, dict) else r.to_dict() for r in records]
    scored = [r for r in rows if r["error"] is None and r["predicted"] is not None and r["gold"] is not None]
    n_correct = sum(1 for r in scored if option_key(r["predicted"]) == option_key(r["gold"]))
    golds = [r["gold"] for r in scored]
    preds = [r["predicted"] for r in scored]
    if labels is None:
        labels = set(golds) | set(preds)
    f1 = macro_f1(preds, golds, labels) if scored else 0.0

    termination: Counter = Counter()
    specialists: Counter = Counter()
    panel_sizes: Counter = Counter()
    flags: Counter = Counter()
    rounds = []
    for r in rows:
        flags.update(r["flags"])
        if r["result"]:
            termination[r["result"]["termination"]] += 1
            rounds.append(r["result"]["rounds_used"])
        if r["triage"]:
            specialists.update(r["triage"]["roles"])
            panel_sizes[str(len(r["triage"]["roles"]))] += 1
    return Metrics(
        accuracy=n_correct / len(scored) if scored else 0.0,
        f1=f1,
        n_cases=len(rows),
        n_scored=len(scored),
        n_correct=n_correct,
        n_errored=sum(1 for r in rows if r["error"] is not None),
        termination=dict(sorted(termination.items())),
        mean_rounds=sum(rounds) / len(rounds) if rounds else 0.0,
        specialists=dict(sorted(specialists.items())),
        panel_sizes=dict(sorted(panel_sizes.items(), key=lambda kv: int(kv[0]))),
        flags=dict(sorted(flags.items())),
    )
