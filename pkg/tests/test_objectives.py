import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from robustdet.core import ContractError, PerInstanceLosses
from robustdet.objectives import ObjectiveKind, combine, cwa_weights, needs_weights, objective_value

LOSSES = PerInstanceLosses([1.0, 2.0, 0.5], [0.25, 1.0, 3.0])


@pytest.mark.parametrize("kind,expected", [("cls", 3.5), ("reg", 4.25), ("vanilla", 7.75),
                                           ("mtd", 1.0 + 2.0 + 3.0)])
def test_objective_values(kind, expected):
    assert objective_value(kind, LOSSES) == pytest.approx(expected)


def test_cwa_hand_computed():
    # labels [0, 0, 1]: raw weights 1/2, 1/2, 1 -> scaled to sum 3
    w = cwa_weights([0, 0, 1])
    assert w.tolist() == [0.75, 0.75, 1.5]
    assert objective_value("cwa", LOSSES, w) == pytest.approx(0.75 * 1.25 + 0.75 * 3.0 + 1.5 * 3.5)


@given(st.lists(st.integers(0, 4), min_size=1, max_size=30))
def test_cwa_weights_properties(labels):
    w = cwa_weights(labels)
    assert w.sum() == pytest.approx(len(labels))
    # each present class carries the same total weight
    totals = {c: w[np.asarray(labels) == c].sum() for c in set(labels)}
    assert max(totals.values()) == pytest.approx(min(totals.values()))


def test_cwa_balanced_equals_vanilla():
    w = cwa_weights([0, 1, 2])
    assert np.allclose(w, 1.0)
    assert objective_value("cwa", LOSSES, w) == pytest.approx(objective_value("vanilla", LOSSES))


def test_cwa_requires_weights():
    with pytest.raises(ContractError):
        objective_value("cwa", LOSSES)
    with pytest.raises(ContractError):
        objective_value("cwa", LOSSES, [1.0, 1.0])
    with pytest.raises(ContractError):
        cwa_weights([])


def test_empty_instances_rejected():
    with pytest.raises(ContractError):
        objective_value("cls", PerInstanceLosses([], []))


def test_parse():
    assert ObjectiveKind.parse(" CLS ") is ObjectiveKind.CLS
    assert needs_weights("cwa") and not needs_weights("reg")
    with pytest.raises(ValueError, match="unknown objective"):
        ObjectiveKind.parse("bogus")


def test_torch_gradient_flows_to_selected_terms_only():
    cls = torch.tensor([1.0, 2.0], requires_grad=True)
    reg = torch.tensor([3.0, 0.5], requires_grad=True)
    combine(ObjectiveKind.CLS, cls, reg).backward()
    assert cls.grad.tolist() == [1.0, 1.0] and reg.grad is None
    cls.grad = None
    combine(ObjectiveKind.MTD, cls, reg).backward()
    # max picks reg for instance 0, cls for instance 1
    assert cls.grad.tolist() == [0.0, 1.0] and reg.grad.tolist() == [1.0, 0.0]
