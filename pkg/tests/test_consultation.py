import random

import pytest

from mdteam.consultation import (
    ConsultationConfig,
    ConsultationLog,
    KbPolicy,
    StatementParseFailure,
    build_specialist_prompt,
    check_consensus,
    decide_final,
    pool_window,
    run_consultation,
)
from mdteam.core import HistoricalSharedPool, MissingSummary, Role, RoundSummary, Termination
from mdteam.knowledge import CorrectRecord, KnowledgeStores
from mdteam.llm import MockBackend
from mdteam.mock import CasePlan, ScriptedPanel, sentinel
from mdteam.templates import KB_BLOCK_HEADER, POOL_BLOCK_HEADER

from conftest import BASE_ROLES, make_case, statements

FIVE = ["Pediatrician", "Neurologist", "Radiologist", "Pathologist", "Pharmacist"]


def run(votes, roles, seed=0, case=None, stores=None, log=None, max_rounds=10):
    case = case or make_case()
    backend = MockBackend(responder=ScriptedPanel({case.case_id: CasePlan(roles, votes)}))
    config = ConsultationConfig(
        max_rounds=max_rounds, rng_seed=seed, kb_policy=KbPolicy.ENABLED if stores else KbPolicy.DISABLED
    )
    result = run_consultation(case, [Role(r) for r in roles], backend, config=config, kb_handle=stores, log=log)
    return result, backend


def specialist_prompts(backend, round_no):
    return [c.user_prompt for c in backend.calls if Role(c.tags["role"]).is_specialist and c.tags.get("round") == round_no]


def test_unanimous_first_round_is_consensus():
    result, _ = run({r: ["E"] for r in BASE_ROLES}, BASE_ROLES)
    assert result.termination is Termination.CONSENSUS
    assert result.rounds_used == 1
    assert result.final_choice_id == "E"


def test_four_to_one_split_goes_to_majority():
    votes = dict(zip(FIVE, [["D"], ["B"], ["D"], ["D"], ["D"]]))
    result, _ = run(votes, FIVE)
    assert result.termination is Termination.MAJORITY_RULE
    assert result.rounds_used == 10
    assert result.final_choice_id == "D"


def test_tie_is_random_but_reproducible():
    roles = BASE_ROLES
    votes = dict(zip(roles, [["A"], ["A"], ["B"], ["B"]]))
    first, _ = run(votes, roles, seed=7)
    second, _ = run(votes, roles, seed=7)
    assert first.termination is Termination.TIE_RANDOM
    assert first.final_choice_id in {"A", "B"}
    assert first.final_choice_id == second.final_choice_id
    assert first.to_dict() == second.to_dict()


def test_late_consensus_stops_early():
    votes = {r: ["B", "E"] for r in BASE_ROLES}
    votes["Pharmacist"] = ["E"]
    result, _ = run(votes, BASE_ROLES)
    assert result.termination is Termination.CONSENSUS
    assert result.rounds_used == 2


def test_round_one_prompts_have_no_peer_or_kb_text():
    votes = dict(zip(FIVE, [["D"], ["B"], ["D"], ["D"], ["D"]]))
    _, backend = run(votes, FIVE, max_rounds=3)
    for prompt in specialist_prompts(backend, 1):
        assert "SENTINEL-R" not in prompt
        assert POOL_BLOCK_HEADER not in prompt
        assert KB_BLOCK_HEADER not in prompt
        assert "reviewed case" not in prompt


def test_residual_window_sentinels():
    votes = dict(zip(FIVE, [["D"], ["B"], ["D"], ["D"], ["D"]]))
    _, backend = run(votes, FIVE)
    for r in range(1, 11):
        prompts = specialist_prompts(backend, r)
        assert len(prompts) == 5
        for prompt in prompts:
            visible = {k for k in range(1, 11) if sentinel(k) + " " in prompt}
            assert visible == set(pool_window(r))
    assert pool_window(5) == [4, 3]
    assert pool_window(2) == [1]
    assert pool_window(1) == []


def test_peer_statements_never_reach_specialists():
    votes = dict(zip(FIVE, [["D"], ["B"], ["D"], ["D"], ["D"]]))
    _, backend = run(votes, FIVE, max_rounds=4)
    for r in range(2, 5):
        for prompt in specialist_prompts(backend, r):
            assert "reviewed case" not in prompt


def test_prompt_builder_requires_window_rounds():
    case = make_case()
    with pytest.raises(MissingSummary):
        build_specialist_prompt(case, Role.RADIOLOGIST, 3, HistoricalSharedPool())


def test_kb_block_injected_at_round_two_on_conflict():
    case = make_case()
    backend = MockBackend()
    stores = KnowledgeStores.in_memory()
    stores.correct.add(CorrectRecord("past question", "E", "past summary KBSNIPPET"), backend.embed("past"))
    votes = dict(zip(BASE_ROLES, [["E"], ["E"], ["B"], ["E"]]))
    log = ConsultationLog()
    result, backend = run(votes, BASE_ROLES, case=case, stores=stores, log=log, max_rounds=3)
    r1 = specialist_prompts(backend, 1)
    r2 = specialist_prompts(backend, 2)
    assert all(KB_BLOCK_HEADER not in p for p in r1)
    assert all(KB_BLOCK_HEADER in p and "KBSNIPPET" in p for p in r2)
    assert log.kb_rounds[0] == 2
    assert result.kb_consulted


def test_round_one_consensus_reflects_post_hoc():
    stores = KnowledgeStores.in_memory()
    stores.correct.add(CorrectRecord("q", "E", "s"), MockBackend().embed("past"))
    log = ConsultationLog()
    result, backend = run({r: ["E"] for r in BASE_ROLES}, BASE_ROLES, stores=stores, log=log)
    assert result.rounds_used == 1
    assert log.kb_gate == "PostHocReflect"
    assert log.post_hoc_snippets and not log.kb_rounds
    assert all(KB_BLOCK_HEADER not in p for p in specialist_prompts(backend, 1))


def test_unparseable_specialist_abstains():
    case = make_case()
    panel = ScriptedPanel({case.case_id: CasePlan(BASE_ROLES, {r: ["E"] for r in BASE_ROLES})})
    backend = MockBackend({"Pharmacist/*": "I am not sure."}, responder=panel)
    log = ConsultationLog()
    result = run_consultation(case, [Role(r) for r in BASE_ROLES], backend, log=log)
    assert result.termination is Termination.CONSENSUS
    assert len(result.per_round_statements[0]) == 3
    assert log.abstentions == [{"round": 1, "role": "Pharmacist"}]


def test_all_abstaining_raises():
    backend = MockBackend(fallback="no idea")
    with pytest.raises(StatementParseFailure):
        run_consultation(make_case(), [Role.RADIOLOGIST, Role.PATHOLOGIST], backend, config=ConsultationConfig(max_rounds=2))


def test_kb_policy_requires_stores():
    with pytest.raises(ValueError):
        run_consultation(make_case(), [Role.RADIOLOGIST], MockBackend(), config=ConsultationConfig(kb_policy=KbPolicy.ENABLED))


def test_check_consensus_examples():
    assert check_consensus(statements(1, {"Radiologist": "E", "Pathologist": "E", "Pharmacist": "E"}))
    assert check_consensus(statements(1, {"Radiologist": "E", "Pathologist": "e"}))
    assert not check_consensus(statements(1, {"Radiologist": "A", "Pathologist": "B", "Pharmacist": "A"}))
    assert not check_consensus(())


def test_decide_final_examples():
    rng = random.Random(0)
    votes = dict(zip(FIVE, "DBDDD"))
    assert decide_final(statements(10, votes), rng) == ("D", Termination.MAJORITY_RULE)
    assert decide_final(statements(10, {"Radiologist": "C"}), rng) == ("C", Termination.MAJORITY_RULE)
    tie = statements(10, {"Radiologist": "A", "Pathologist": "A", "Pharmacist": "B", "Neurologist": "B"})
    picks = {decide_final(tie, random.Random(3))[0] for _ in range(5)}
    assert len(picks) == 1 and picks <= {"A", "B"}
