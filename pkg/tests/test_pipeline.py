import dataclasses

from mdteam.consultation import ConsultationConfig
from mdteam.knowledge import KnowledgeStores
from mdteam.llm import MockBackend
from mdteam.mock import CasePlan, ScriptedPanel
from mdteam.pipeline import Mode, case_seed, consult_case

from conftest import BASE_ROLES, make_case


def backend_for(case, votes, review=None, script=None):
    plan = CasePlan(BASE_ROLES, {r: votes for r in BASE_ROLES}, review=review)
    return MockBackend(script or {}, responder=ScriptedPanel({case.case_id: plan}))


def test_vanilla_case_end_to_end():
    case = make_case()
    record = consult_case(case, backend_for(case, ["E"]), ConsultationConfig())
    assert record.predicted == "E" and record.correct
    assert record.stored is None


def record_calls(case):
    backend = backend_for(case, ["E"])
    consult_case(case, backend, ConsultationConfig())
    return backend.calls


def test_call_order():
    roles = [c.tags["role"] for c in record_calls(make_case())]
    assert roles[0] == "Primary Care Doctor"
    assert roles[-2] == "Lead Physician"
    assert roles[-1] == "Safety and Ethics Reviewer"


def test_review_override_becomes_final_answer():
    case = make_case()
    record = consult_case(case, backend_for(case, ["C"], review="E"), ConsultationConfig())
    assert record.result.final_choice_id == "E"
    assert record.predicted == "E"
    assert "ReviewOverride" in record.flags


def test_train_stores_after_scoring():
    case = make_case()
    stores = KnowledgeStores.in_memory()
    backend = backend_for(case, ["C"])
    record = consult_case(case, backend, ConsultationConfig(), stores, Mode.TRAIN, "MedQA")
    assert not record.correct
    assert record.stored["kind"] == "chain"
    assert stores.chain.entries[0].source_dataset == "MedQA"
    assert backend.calls[-1].tags["role"] == "Chain-of-Thought Reviewer"


def test_test_mode_does_not_store():
    case = make_case()
    stores = KnowledgeStores.in_memory()
    consult_case(case, backend_for(case, ["E"]), ConsultationConfig(), stores, Mode.TEST)
    assert stores.sizes() == {"correct": 0, "chain": 0}


def test_triage_injection_flagged():
    case = make_case()
    backend = backend_for(case, ["E"], script={"Primary Care Doctor/*": "Reasons: x\n[{Obstetrician and Gynecologist}, {Radiologist}]"})
    record = consult_case(case, backend, ConsultationConfig())
    assert "MandatoryRolesInjected" in record.flags
    assert len(record.triage.roles) == 4


def test_case_seed_is_stable_and_distinct():
    assert case_seed(42, "a") == case_seed(42, "a")
    assert case_seed(42, "a") != case_seed(42, "b")
    assert case_seed(42, "a") != case_seed(43, "a")
    assert 0 <= case_seed(42, "a") < 2**32
