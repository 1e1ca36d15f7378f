import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rlvr_lab import bandit as bd


def test_zero_step_ratio_is_one():
    inst = bd.random_instance(0, eta=0.0)
    for o in bd.OBJECTIVES:
        for i in range(inst.vocab_size):
            assert bd.closed_form_ratio(inst, o, i) == pytest.approx(1.0, abs=1e-15)
            assert np.all(bd.coefficients(inst, o, i) == 1.0)
        assert bd.numerical_ratio(inst, o, inst.y1) == 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.floats(0.01, 1.0))
def test_closed_form_matches_numerical(seed, eta):
    inst = bd.random_instance(seed, eta=eta)
    rng = np.random.default_rng(seed)
    for i in (inst.y1, inst.y2, int(rng.integers(50))):
        for o in bd.OBJECTIVES:
            cf, nu = bd.closed_form_ratio(inst, o, i), bd.numerical_ratio(inst, o, i)
            assert cf > 0
            assert abs(cf - nu) / nu <= 1e-8


def test_ratio_agreement_100_instances():
    worst = bd.ratio_agreement(100)
    assert set(worst) == {(o, c) for o in bd.OBJECTIVES for c in (1, 2)}
    assert max(worst.values()) <= 1e-8


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_reinforce_dominant_rises_and_others_shrink(seed):
    inst = bd.random_instance(seed, scale=2.0)
    p = inst.probs
    if p[inst.y1] <= p[inst.y2]:
        return
    assert bd.closed_form_ratio(inst, bd.REINFORCE, inst.y1) > 1.0
    gam = bd.coefficients(inst, bd.REINFORCE, inst.y1)
    others = [j for j in range(inst.vocab_size) if j not in inst.positives]
    assert np.all(gam[others] < 1.0)


def test_mle_symmetric_instance():
    x = np.array([1.0, 0.5, -0.3, 0.2, 0.9])
    inst = bd.RatioInstance(np.zeros(50), 11, 5, 0.5, x)
    for o in bd.OBJECTIVES:
        assert bd.numerical_ratio(inst, o, 11) == pytest.approx(bd.numerical_ratio(inst, o, 5), abs=1e-14)


def test_instance_validation():
    with pytest.raises(bd.BanditError):
        bd.RatioInstance(np.zeros(5), 1, 1, 0.5, np.ones(2))
    with pytest.raises(bd.BanditError):
        bd.RatioInstance(np.array([0.0, 1.0, 0, 0]), 0, 1, 0.5, np.ones(2))


def test_toy_defaults_and_conservation():
    for scen in bd.SCENARIOS:
        for o in bd.OBJECTIVES:
            tr = bd.run_toy_experiment(scen, 10, objective=o)
            assert tr.probs.shape == (11, 50)
            assert np.allclose(tr.probs.sum(axis=1), 1.0, atol=1e-12)
            for name, r in tr.ratios.items():
                assert np.allclose(r, tr.probs[1:, tr.tracked[name]] / tr.probs[:-1, tr.tracked[name]])
    assert bd.POSITIVE_ACTIONS == {"uniform": (11, 5), "peaky": (11, 8)}
    assert bd.NEGATIVE_ACTIONS["uniform"] == (11, 5) and bd.NEGATIVE_ACTIONS["peaky"] == (11, 8)


def test_toy_directional_claims():
    mle = bd.run_toy_experiment("peaky_pos", 10, objective=bd.MLE)
    assert abs(mle.prob_of("y1")[-1] - mle.prob_of("y2")[-1]) < 0.05
    rf = bd.run_toy_experiment("peaky_pos", 10, objective=bd.REINFORCE)
    dom = max(rf.tracked.values(), key=lambda a: rf.probs[0, a])
    assert np.all(np.diff(rf.probs[:, dom]) > 0)
    for o in bd.OBJECTIVES:
        uni = bd.run_toy_experiment("uniform_pos", 1, objective=o)
        assert uni.ratios["y1"][0] > 1 and uni.ratios["y2"][0] > 1
        neg = bd.run_toy_experiment("peaky_neg", 1, objective=o)
        assert neg.ratios["y_star"][0] > 1.0
        assert neg.ratios["y2"][0] < 1.0


def test_verify_all_passes():
    checks = bd.verify_all()
    assert checks and all(c.passed for c in checks), [c for c in checks if not c.passed]


def test_toy_errors():
    with pytest.raises(bd.BanditError):
        bd.run_toy_experiment("sideways", 3)
    with pytest.raises(bd.BanditError):
        bd.run_toy_experiment("peaky_pos", 0)
