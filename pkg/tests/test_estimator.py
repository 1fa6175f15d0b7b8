import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mdteam.estimator import MDTeamClassifier, check_cases
from mdteam.mock import CasePlan

from conftest import BASE_ROLES, make_case, panel_backend


def dataset(n=6):
    cases = [make_case(f"c{i}", gold="E") for i in range(n)]
    plans = {c.case_id: CasePlan(BASE_ROLES, {r: ["E" if i % 3 else "B"] for r in BASE_ROLES}) for i, c in enumerate(cases)}
    return cases, plans


def test_get_params_and_clone():
    est = MDTeamClassifier(max_rounds=4, top_k=3)
    params = est.get_params()
    assert params["max_rounds"] == 4 and params["top_k"] == 3
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(max_rounds=7)
    assert est.max_rounds == 7


def test_clone_shares_backend():
    cases, plans = dataset()
    backend = panel_backend(plans)
    assert clone(MDTeamClassifier(backend=backend)).backend is backend


def test_fit_predict_score():
    cases, plans = dataset()
    est = MDTeamClassifier(backend=panel_backend(plans)).fit(cases)
    assert est.stores_.sizes() == {"correct": 4, "chain": 2}
    assert list(est.classes_) == list("ABCDE")
    pred = est.predict(cases)
    assert isinstance(pred, np.ndarray) and list(pred) == ["B", "E", "E", "B", "E", "E"]
    assert est.score(cases) == pytest.approx(4 / 6)


def test_predict_before_fit():
    cases, plans = dataset()
    with pytest.raises(NotFittedError):
        MDTeamClassifier(backend=panel_backend(plans)).predict(cases)


def test_y_overrides_gold_and_is_validated():
    cases, _ = dataset(2)
    got, labels = check_cases(cases, ["b", "{C}"])
    assert labels == ["B", "C"] and got[0].gold_answer == "B"
    with pytest.raises(ValueError):
        check_cases(cases, ["A"])
    with pytest.raises(ValueError):
        check_cases(cases, ["A", "Z"])
    with pytest.raises(TypeError):
        check_cases(cases[0])
    with pytest.raises(ValueError):
        check_cases([cases[0], cases[0]])


def test_dict_cases_accepted():
    cases, plans = dataset(2)
    est = MDTeamClassifier(backend=panel_backend(plans), use_knowledge=False).fit([c.to_dict() for c in cases])
    assert est.stores_.sizes() == {"correct": 0, "chain": 0}
    assert list(est.predict([c.to_dict() for c in cases])) == ["B", "E"]


def test_partial_fit_accumulates():
    cases, plans = dataset()
    est = MDTeamClassifier(backend=panel_backend(plans))
    est.partial_fit(cases[:3]).partial_fit(cases[3:])
    assert sum(est.stores_.sizes().values()) == 6
    assert len(est.history_) == 6
