import pytest

from mdteam.core import MANDATORY_SPECIALISTS, ParseFailure, Role, SPECIALISTS
from mdteam.llm import MockBackend
from mdteam.triage import TriageDecision, decision_from_reply, parse_reasons, parse_role_list, render_role_list, triage

from conftest import make_case

# Replies in the shape of the triage doctor's few-shot examples.
EXEMPLARS = [
    (
        "Reasoning: the patient is pregnant, so obstetric input is needed; imaging, lab and drug support follow.\n\n"
        "Output roles:\n\n"
        "[{Obstetrician and Gynecologist}, {Radiologist}, {Pathologist}, {Pharmacist}]",
        {"Obstetrician and Gynecologist", "Radiologist", "Pathologist", "Pharmacist"},
    ),
    (
        "Reasoning: sudden infant death calls for a pediatric history and a neurological view.\n\n"
        "Output roles:\n\n"
        "[{Pediatrician}, {Neurologist}, {Radiologist}, {Pathologist}, {Pharmacist}]",
        {"Pediatrician", "Neurologist", "Radiologist", "Pathologist", "Pharmacist"},
    ),
    (
        "Reasoning: bilious vomiting in a neonate suggests an obstruction.\n\n"
        "Output roles:\n\n"
        "[{Pediatrician}, {General Surgeon}, {Radiologist}, {Pathologist}, {Pharmacist}]",
        {"Pediatrician", "General Surgeon", "Radiologist", "Pathologist", "Pharmacist"},
    ),
    (
        "• <Reasons>\n"
        "• <{General Internal Medicine Doctor}, {Obstetrician and Gynecologist}, {Radiologist}, {Pathologist}, {Pharmacist}>",
        {"General Internal Medicine Doctor", "Obstetrician and Gynecologist", "Radiologist", "Pathologist", "Pharmacist"},
    ),
]


@pytest.mark.parametrize("reply,expected", EXEMPLARS)
def test_exemplar_replies_parse_to_printed_sets(reply, expected):
    decision = decision_from_reply(reply)
    assert {r.value for r in decision.roles} == expected
    assert not decision.injected


def test_reasons_captured_verbatim():
    reply, _ = EXEMPLARS[0]
    assert parse_reasons(reply) == reply.split("\n\n")[0]


def test_plain_list():
    roles = parse_role_list("[{Pediatrician}, {Pharmacist}, {Radiologist}, {Pathologist}]")
    assert set(roles) == {Role.PEDIATRICIAN, Role.PHARMACIST, Role.RADIOLOGIST, Role.PATHOLOGIST}


@pytest.mark.parametrize("reply", ["[{Cardiologist}]", "[{Radiologist}, {Lead Physician}]", "no list here", "", "[{Radiologists}]"])
def test_invalid_role_names_rejected(reply):
    with pytest.raises(ParseFailure):
        parse_role_list(reply)


def test_mandatory_roles_injected():
    decision = decision_from_reply("Reasons: neuro.\n[{Neurologist}, {Radiologist}]")
    assert set(MANDATORY_SPECIALISTS) <= set(decision.roles)
    assert set(decision.injected) == {Role.PATHOLOGIST, Role.PHARMACIST}


def test_render_then_parse_is_identity():
    for reply, _ in EXEMPLARS:
        roles = parse_role_list(reply)
        assert parse_role_list(render_role_list(roles)) == roles


def test_decision_invariants():
    with pytest.raises(ValueError):
        TriageDecision("r", (Role.RADIOLOGIST,), ())
    with pytest.raises(ValueError):
        TriageDecision("r", (Role.RADIOLOGIST, Role.PATHOLOGIST, Role.LEAD_PHYSICIAN), ())


def test_triage_reasks_then_fails():
    backend = MockBackend({"Primary Care Doctor/*": "[{Cardiologist}]"})
    with pytest.raises(ParseFailure):
        triage(make_case(), backend, max_parse_retries=2)
    assert [c.tags["attempt"] for c in backend.calls] == [0, 1, 2]


def test_triage_recovers_on_reask():
    backend = MockBackend({
        "Primary Care Doctor/*": "I would pick a cardiologist.",
        "Primary Care Doctor/*#1": EXEMPLARS[0][0],
    })
    decision = triage(make_case(), backend)
    assert all(r in SPECIALISTS for r in decision.roles)
    assert len(backend.calls) == 2
