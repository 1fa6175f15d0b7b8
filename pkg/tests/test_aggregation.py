import json

import pytest

from mdteam.aggregation import parse_summary_reply, summarize_round
from mdteam.core import HistoricalSharedPool, NonContiguousRound, ParseFailure, RoundSummary
from mdteam.llm import MockBackend

from conftest import make_case, statements

CASE_A_OPTIONS = {
    "A": "Antibodies against postsynaptic nicotinic cholinergic ion channels",
    "B": "Autoantibodies against the presynaptic voltage-gated calcium channels",
    "C": "Autoimmune demyelination of peripheral nerves",
    "D": "Blockade of presynaptic acetylcholine release at the neuromuscular junction",
    "E": "Lower motor neuron destruction in the anterior horn",
}

CASE_A_REPLY = json.dumps({
    "round 1": {
        "consistency": ["Most experts chose D, presynaptic acetylcholine release blockade."],
        "conflict": ["The Neurologist chose B, an immune-mediated calcium channel mechanism, against the others' D."],
        "independence": ["The Radiologist supports D without weighing in on drugs."],
        "integration": ["D remains the best supported explanation; B is a minority alternative."],
    }
})

# Lead physician wrote placeholder text for the empty categories.
CASE_B_REPLY = """Here is the digest.
```json
{"round 1": {
  "consistency": ["All experts selected B, bullous changes of the lung bases."],
  "conflict": ["No conflict exists.", "{...}"],
  "independence": ["No independence exists.", "{...}"],
  "integration": ["All experts agree on B as the most likely additional finding."]
}}
```"""


def test_case_a_split_keeps_conflict_and_endorses_majority():
    case = make_case("case-a", gold="D", options=CASE_A_OPTIONS)
    stmts = statements(1, {"Pediatrician": "D", "Neurologist": "B", "Radiologist": "D", "Pathologist": "D", "Pharmacist": "D"})
    out = summarize_round(stmts, case, MockBackend({"Lead Physician/1": CASE_A_REPLY}))
    assert out.summary.conflict and "Neurologist" in out.summary.conflict[0]
    assert "D" in out.summary.integration[0]
    assert out.summary.votes["Neurologist"] == "B"
    assert not out.fallback and not out.conflict_enforced


def test_case_b_unanimous_has_empty_conflict_and_independence():
    case = make_case("case-b", gold="B")
    stmts = statements(1, {"General Internal Medicine Doctor": "B", "Radiologist": "B", "Pathologist": "B"})
    out = summarize_round(stmts, case, MockBackend({"Lead Physician/1": CASE_B_REPLY}))
    assert out.summary.conflict == ()
    assert out.summary.independence == ()
    assert out.summary.integration


def test_single_statement_round_has_no_conflict():
    reply = json.dumps({"consistency": ["E only"], "conflict": ["imagined"], "independence": [], "integration": ["E"]})
    out = summarize_round(statements(1, {"Radiologist": "E"}), make_case(), MockBackend({"Lead Physician/1": reply}))
    assert out.summary.conflict == ()
    assert out.conflict_enforced


def test_split_votes_with_empty_conflict_get_a_note():
    reply = json.dumps({"consistency": [], "conflict": [], "independence": [], "integration": ["mixed"]})
    stmts = statements(2, {"Radiologist": "E", "Pharmacist": "C"})
    out = summarize_round(stmts, make_case(), MockBackend({"Lead Physician/2": reply}))
    assert out.summary.conflict and out.conflict_enforced


def test_votes_come_from_statements_not_reply():
    reply = json.dumps({"round 1": {"consistency": [], "conflict": [], "independence": [], "integration": ["x"], "_votes": {"Radiologist": "A"}}})
    out = summarize_round(statements(1, {"Radiologist": "E"}), make_case(), MockBackend({"Lead Physician/1": reply}))
    assert out.summary.votes == {"Radiologist": "E"}


def test_unparseable_reply_falls_back_after_reasks():
    backend = MockBackend({"Lead Physician/*": "I summarized it in prose."})
    out = summarize_round(statements(1, {"Radiologist": "E", "Pharmacist": "B"}), make_case(), backend)
    assert out.fallback
    assert out.summary.conflict and out.summary.integration
    assert len(backend.calls) == 3


@pytest.mark.parametrize("reply", ["", "[1, 2]", '{"round 2": {"integration": ["x"]}}', '{"consistency": []}'])
def test_parse_rejects(reply):
    with pytest.raises(ParseFailure):
        parse_summary_reply(reply, 1)


def test_pool_append_rules():
    s = lambda r: RoundSummary(r, ("c",), (), (), ("i",))
    pool = HistoricalSharedPool().append(s(1))
    assert pool.rounds == [1]
    assert pool.append(s(2)).append(s(3)).rounds == [1, 2, 3]
    with pytest.raises(NonContiguousRound):
        pool.append(s(3))
