import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treebp import optim
from treebp.exceptions import ShapeError, UnknownPlanError
from treebp.models import Tree3Params
from treebp.optim import HyperParams, OptimizerState, schedule_alpha, schedule_eta, sgd_nesterov_step
from treebp.plans import TrainPlan, builtin_plans, describe_plans, get_plan


def params_of(*arrays):
    return Tree3Params(*(np.array(a, dtype=np.float64) for a in arrays))


def test_hand_evaluated_step():
    p = params_of([1.0], [0.0], [0.0])
    s = OptimizerState.zeros_like(p)
    sgd_nesterov_step(p, [np.array([0.5]), np.zeros(1), np.zeros(1)], s, eta=0.1, mu=0.9, alpha=0.0)
    assert s.velocity[0][0] == 0.5
    assert p.w_conv[0] == pytest.approx(1 - 0.1 * (0.5 + 0.45), abs=1e-15)
    assert p.w_conv[0] == pytest.approx(0.905)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), eta=st.floats(0, 1))
def test_zero_momentum_is_vanilla_sgd_bitwise(seed, eta):
    r = np.random.default_rng(seed)
    w = [r.normal(size=(3, 2)) for _ in range(3)]
    g = [r.normal(size=(3, 2)) for _ in range(3)]
    p = params_of(*w)
    sgd_nesterov_step(p, g, OptimizerState.zeros_like(p), eta, 0.0, 0.0)
    for a, w0, g0 in zip(p.arrays(), w, g):
        assert np.array_equal(a, w0 - eta * g0)


def test_fixed_point():
    p = params_of([1.0, -2.0], [3.0], [4.0])
    before = p.copy()
    sgd_nesterov_step(p, [np.zeros(2), np.zeros(1), np.zeros(1)], OptimizerState.zeros_like(p), 0.1, 0.9, 0.0)
    assert p.equal(before)


@settings(max_examples=20, deadline=None)
@given(mu=st.floats(0.1, 0.99), n=st.integers(1, 30))
def test_velocity_decays_geometrically(mu, n):
    p = params_of([0.0, 0.0], [0.0], [0.0])
    s = OptimizerState([np.array([3.0, 4.0]), np.array([1.0]), np.array([0.0])])
    v0 = np.linalg.norm(s.velocity[0])
    zeros = [np.zeros(2), np.zeros(1), np.zeros(1)]
    for _ in range(n):
        sgd_nesterov_step(p, zeros, s, 0.01, mu, 0.0)
    assert np.linalg.norm(s.velocity[0]) == pytest.approx(mu ** n * v0, rel=1e-6, abs=1e-12)


def test_weight_decay_and_mask():
    p = params_of([2.0], [1.0, 1.0], [1.0])
    s = OptimizerState.zeros_like(p)
    sgd_nesterov_step(p, [np.zeros(1), np.zeros(2), np.zeros(1)], s, 0.1, 0.0, 0.5,
                      masks={1: np.array([1.0, 0.0])})
    assert p.w_conv[0] == pytest.approx(2 - 0.1 * 1.0)
    assert p.w_tree[0] == pytest.approx(0.95) and p.w_tree[1] == 1.0


def test_step_shape_mismatch():
    p = params_of([1.0], [1.0], [1.0])
    with pytest.raises(ShapeError):
        sgd_nesterov_step(p, [np.zeros(2), np.zeros(1), np.zeros(1)], OptimizerState.zeros_like(p), 0.1, 0, 0)
    with pytest.raises(ShapeError):
        sgd_nesterov_step(p, [np.zeros(1)], OptimizerState.zeros_like(p), 0.1, 0, 0)


def test_hyperparams_validation():
    HyperParams(0.1, 0.9, 1e-4, 100)
    for bad in [(-0.1,), (0.1, 1.0), (0.1, 0.9, -1.0), (0.1, 0.9, 0.0, 0)]:
        with pytest.raises(ValueError):
            HyperParams(*bad)


def test_schedule_examples():
    tree = get_plan("tree3-k6m16-offline").schedule
    assert schedule_eta(tree, 60, 200) == 0.05
    assert schedule_eta(tree, 0, 200) == 0.075
    assert schedule_eta(tree, 199, 200) == 0.0001
    geo = optim.geometric(0.075, 0.6, 20)
    assert schedule_eta(geo, 0) == 0.075
    assert schedule_eta(geo, 40) == pytest.approx(0.075 * 0.36)
    assert schedule_eta(geo, 39) == pytest.approx(0.075 * 0.6)
    with pytest.raises(ValueError):
        schedule_eta(tree, 200, 200)
    with pytest.raises(ValueError):
        schedule_eta(tree, -1)


def test_alpha_switch():
    tree = get_plan("tree3-k6m16-offline")
    assert schedule_alpha(tree.schedule, 10, tree.alpha) == 5e-5
    assert schedule_alpha(tree.schedule, 49, tree.alpha) == 5e-5
    assert schedule_alpha(tree.schedule, 50, tree.alpha) == 1e-5
    assert schedule_alpha(optim.constant(0.1), 150, 3e-3) == 3e-3


def test_schedule_validation():
    with pytest.raises(ValueError):
        optim.piecewise([5, 10], [0.1, 0.01])
    with pytest.raises(ValueError):
        optim.geometric(0.1, 1.5, 10)
    with pytest.raises(ValueError):
        optim.Schedule("cosine")


EXPECTED = {
    "lenet5-offline": (0.1, 0.9, 1e-4, 100),
    "tree3-k6m16-offline": (0.075, 0.965, 5e-5, 100),
    "tree3-k15m16-offline": (0.075, 0.965, 5e-5, 100),
    "tree3-k15m80-offline": (0.075, 0.965, 5e-5, 100),
    "tentree-k15m80-offline": (0.05, 0.97, 5e-5, 100),
    "tree3-mnist": (0.1, 0.9, 5e-4, 100),
    "lenet5-online-50k": (0.012, 0.96, 1e-4, 100),
    "lenet5-online-25k": (0.017, 0.96, 3e-3, 100),
    "lenet5-online-12k": (0.012, 0.94, 8e-3, 50),
    "tree3-online-50k": (0.02, 0.965, 5e-7, 100),
    "tree3-online-25k": (0.03, 0.965, 5e-6, 100),
    "tree3-online-12k": (0.02, 0.965, 5e-5, 50),
}


@pytest.mark.parametrize("name", sorted(EXPECTED))
def test_builtin_plan_values(name):
    p = get_plan(name)
    assert (p.eta, p.mu, p.alpha, p.batch) == EXPECTED[name]
    if p.mode == "online":
        assert p.epochs == 1
        assert p.dataset_size in (50000, 25000, 12500)


def test_k15m80_plan_details():
    p = get_plan("tree3-k15m80-offline")
    assert p.schedule.kind == "geometric" and p.schedule.factor == 0.6 and p.schedule.period == 20
    assert p.augment_shift == 4
    assert get_plan("tree3-mnist").hflip is False


def test_unknown_plan_lists_names():
    with pytest.raises(UnknownPlanError) as e:
        get_plan("tree4")
    assert "tree3-mnist" in str(e.value)


@pytest.mark.parametrize("name", sorted(builtin_plans()))
def test_plan_properties(name):
    plan = builtin_plans()[name]
    etas = [schedule_eta(plan.schedule, e, plan.epochs) for e in range(plan.epochs)]
    assert all(a >= b for a, b in zip(etas, etas[1:]))
    assert TrainPlan.from_json(plan.to_json()) == plan
    assert plan.model_config() is not None


def test_plan_invariants():
    with pytest.raises(ValueError):
        TrainPlan(mode="online", epochs=3)
    with pytest.raises(ValueError):
        get_plan("tree3-online-50k").with_(epochs=2)
    with pytest.raises(ValueError):
        TrainPlan(threshold=0.1, active_fraction=0.01)
    with pytest.raises(ValueError):
        TrainPlan.from_dict({"nonsense": 1})


def test_describe_lists_every_plan():
    text = describe_plans()
    for name in builtin_plans():
        assert name in text
    assert "eta=0.05 mu=0.97 alpha=5e-05" in text
