"""Helpers for pulling structured answers out of free-text replies."""

from __future__ import annotations

import json
import re
from typing import Any, Iterable

from .core import EmptyAfterNormalization, ParseFailure, UnknownOption, normalize_option_id

_FENCE = re.compile(r"```(?:json)?\s*(.*?)```", re.S)
_ANSWER_BODY = re.compile(r"^\{?\s*([^{}:\s]+?)\s*\}?\s*[:\-.)]?\s*(.*)$", re.S)


def first_json_object(text: str) -> Any:
    fenced = _FENCE.search(text)
    if fenced:
        text = fenced.group(1)
    start = text.find("{")
    if start < 0:
        raise ParseFailure("no JSON object in reply")
    try:
        obj, _ = json.JSONDecoder().raw_decode(text[start:])
    except json.JSONDecodeError as exc:
        raise ParseFailure(f"invalid JSON: {exc}") from exc
    return obj


def labelled_line_pattern(label: str) -> re.Pattern:
    return re.compile(rf"^[ \t>*#\-•]*{label}\s*\**\s*[:：]\s*\**\s*(.+?)\s*$", re.I | re.M)


def parse_labelled_answer(reply: str, label_re: re.Pattern, options: Iterable[str]) -> tuple[str, str, str]:
    """Find the last ``<label>: {ID}: {Content}`` line.

    Returns ``(option_id, echoed_content, text_before_the_line)``.
    """
    matches = list(label_re.finditer(reply or ""))
    if not matches:
        raise ParseFailure("no answer line found")
    match = matches[-1]
    body = _ANSWER_BODY.match(match.group(1).strip())
    if body is None:
        raise ParseFailure(f"unreadable answer line {match.group(0)!r}")
    try:
        option_id = normalize_option_id(body.group(1), list(options))
    except (UnknownOption, EmptyAfterNormalization) as exc:
        raise ParseFailure(str(exc)) from exc
    content = body.group(2).strip().strip("{}").strip()
    return option_id, content, reply[: match.start()].strip()
