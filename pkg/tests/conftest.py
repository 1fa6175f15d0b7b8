import json
from pathlib import Path

import pytest

from mdteam.core import PatientCase, Role, Statement
from mdteam.llm import MockBackend
from mdteam.mock import CasePlan, ScriptedPanel

FIXTURES = Path(__file__).parent / "fixtures"

UTI_OPTIONS = {
    "A": "Ampicillin",
    "B": "Ceftriaxone",
    "C": "Ciprofloxacin",
    "D": "Doxycycline",
    "E": "Nitrofurantoin",
}

BASE_ROLES = ["Obstetrician and Gynecologist", "Radiologist", "Pathologist", "Pharmacist"]


def make_case(case_id="uti", gold="E", options=None, question=None, background="22 weeks gestation, dysuria for 1 day."):
    return PatientCase(
        case_id=case_id,
        background=background,
        question=question or f"Which of the following is the best treatment for this patient? ({case_id})",
        options=dict(options or UTI_OPTIONS),
        gold_answer=gold,
    )


def statements(round_no, votes):
    """votes: {role name: option id}"""
    return tuple(
        Statement(round=round_no, role=Role(r), reasoning=f"{r} reasoning", choice_id=c, choice_text=UTI_OPTIONS.get(c, c))
        for r, c in votes.items()
    )


def panel_backend(plans, **kwargs):
    return MockBackend(responder=ScriptedPanel({k: v if isinstance(v, CasePlan) else CasePlan(**v) for k, v in plans.items()}), **kwargs)


def load_fixture(name):
    return (FIXTURES / name).read_text(encoding="utf-8")


def load_json_fixture(name):
    return json.loads(load_fixture(name))


@pytest.fixture
def uti_case():
    return make_case()


def precise_cosine(a, b):
    """Cosine at 50 significant digits, independent of numpy."""
    import mpmath

    with mpmath.workdps(50):
        va = [mpmath.mpf(float(x)) for x in a]
        vb = [mpmath.mpf(float(x)) for x in b]
        dot = mpmath.fsum(x * y for x, y in zip(va, vb))
        na = mpmath.sqrt(mpmath.fsum(x * x for x in va))
        nb = mpmath.sqrt(mpmath.fsum(y * y for y in vb))
        return float(dot / (na * nb))


def scan_top_k(entries, query, k):
    """Score every entry with the exact cosine, then order by score, age, id."""
    import math

    def naive(a, b):
        dot = math.fsum(x * y for x, y in zip(a, b))
        return dot / (math.sqrt(math.fsum(x * x for x in a)) * math.sqrt(math.fsum(y * y for y in b)))

    scored = [(naive(e.embedding.values, query), e) for e in entries]
    scored.sort(key=lambda p: (-p[0], p[1].created_at, p[1].entry_id))
    return scored[:k]


class TickClock:
    """Deterministic created_at stamps, optionally repeating to force ties."""

    def __init__(self, repeat=1):
        self.n = 0
        self.repeat = repeat

    def __call__(self):
        stamp = f"2025-01-01T00:00:{(self.n // self.repeat) % 60:02d}.{self.n // self.repeat:06d}Z"
        self.n += 1
        return stamp


def write_dataset(path, cases):
    """MedQA-style JSONL for the given cases."""
    with open(path, "w", encoding="utf-8") as fh:
        for c in cases:
            fh.write(json.dumps({"id": c.case_id, "question": c.question, "options": c.options, "answer_idx": c.gold_answer}) + "\n")
    return path


def write_panel(path, plans, default_vote=None):
    panel = {"cases": {k: (v.to_dict() if isinstance(v, CasePlan) else v) for k, v in plans.items()}}
    if default_vote:
        panel["default_vote"] = default_vote
    Path(path).write_text(json.dumps({"panel": panel}, indent=1), encoding="utf-8")
    return path


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record a one-line pass/fail result for the acceptance summary."""

    def record(label, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] {label}" + (f" -- {detail}" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
