"""Prompt template loading and the text blocks shared between prompts."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources
from pathlib import Path
from string import Template
from typing import Iterable, Mapping

from .core import PatientCase, RoundSummary, Role, Statement

KB_BLOCK_HEADER = "=== Retrieved consultation experience ==="
KB_BLOCK_FOOTER = "=== End of retrieved experience ==="
POOL_BLOCK_HEADER = "=== Historical Shared Pool ==="

SPECIALTY_FOCUS = {
    Role.GENERAL_INTERNAL_MEDICINE: "You cover adult internal medicine and weigh systemic, multi-organ explanations.",
    Role.GENERAL_SURGEON: "You judge whether findings point to a surgical or structural cause and what intervention it needs.",
    Role.PEDIATRICIAN: "You focus on infants, children and adolescents, and on age-specific disease patterns.",
    Role.OBSTETRICIAN_GYNECOLOGIST: "You cover reproductive health and pregnancy, including safety for mother and fetus.",
    Role.RADIOLOGIST: "You reason about imaging findings and which studies would confirm or exclude a diagnosis.",
    Role.NEUROLOGIST: "You focus on disorders of the brain, spinal cord, peripheral nerves and neuromuscular junction.",
    Role.PATHOLOGIST: "You link symptoms to underlying mechanisms and laboratory or tissue findings.",
    Role.PHARMACIST: "You assess drug mechanisms, interactions, contraindications and medication safety.",
}


@lru_cache(maxsize=None)
def _packaged(name: str) -> str:
    return resources.files("mdteam.prompts").joinpath(f"{name}.txt").read_text(encoding="utf-8")


def load_template(name: str, prompt_dir: str | Path | None = None) -> Template:
    """Template by name; a file in ``prompt_dir`` overrides the packaged one."""
    if prompt_dir is not None:
        path = Path(prompt_dir) / f"{name}.txt"
        if path.exists():
            return Template(path.read_text(encoding="utf-8"))
    return Template(_packaged(name))


def render_case(case: PatientCase) -> str:
    parts = []
    if case.background.strip():
        parts.append(f"Background: {case.background.strip()}")
    parts.append(f"Question: {case.question.strip()}")
    parts.append("Options: " + json.dumps(dict(case.options), ensure_ascii=False))
    return "\n".join(parts)


def render_summaries(summaries: Iterable[RoundSummary]) -> str:
    """Pool excerpt in the shared-pool JSON shape, votes omitted."""
    body = {
        f"round {s.round}": {
            "consistency": list(s.consistency),
            "conflict": list(s.conflict),
            "independence": list(s.independence),
            "integration": list(s.integration),
        }
        for s in summaries
    }
    return json.dumps(body, indent=2, ensure_ascii=False)


def render_statements(statements: Iterable[Statement], case: PatientCase) -> str:
    body = {}
    for s in statements:
        text = case.options.get(s.choice_id, s.choice_text)
        body[s.role.value] = {"Reasoning": s.reasoning, "Choice": f"{s.choice_id}: {text}"}
    return json.dumps(body, indent=2, ensure_ascii=False)


def render_kb_block(snippets: Iterable[Mapping]) -> str:
    lines = [KB_BLOCK_HEADER]
    for i, snippet in enumerate(snippets, start=1):
        lines.append(f"[{i}] " + json.dumps(dict(snippet), ensure_ascii=False))
    lines.append(KB_BLOCK_FOOTER)
    return "\n".join(lines)
