import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rlvr_lab import envs
from rlvr_lab import policy as pol


def test_high_low_counts():
    suite = envs.make_suite(envs.SuiteConfig(n_problems=64, f_high=1 / 8), seed=7)
    tiers = [p.tier for p in suite]
    assert tiers.count(envs.HIGH) == 8
    assert tiers.count(envs.LOW) == 56
    for p in suite:
        if p.tier == envs.HIGH:
            assert p.base_frequency >= 0.5
        else:
            assert p.base_frequency <= 0.05


def test_same_seed_same_suite():
    a = envs.make_suite(envs.SuiteConfig(), seed=11)
    b = envs.make_suite(envs.SuiteConfig(), seed=11)
    assert a.to_json() == b.to_json()
    assert a.to_json() != envs.make_suite(envs.SuiteConfig(), seed=12).to_json()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000), st.floats(0.0, 1.0))
def test_suite_invariants(seed, p_two):
    cfg = envs.SuiteConfig(n_problems=20, n_skills=8, p_two_solutions=p_two)
    suite = envs.make_suite(cfg, seed)
    assert [p.id for p in suite] == list(range(20))
    train, test = set(suite.ids(envs.TRAIN)), set(suite.ids(envs.TEST))
    assert not train & test and train | test == set(range(20))
    for p in suite:
        assert 1 <= len(p.correct_set) <= 2
        assert len(set(p.correct_set)) == len(p.correct_set)
        assert all(len(y) <= cfg.max_len for y in p.correct_set)
        assert all(y[-1] == cfg.terminator for y in p.correct_set)
        assert len(p.labels) == len(p.correct_set)
    # every skill keeps a training problem
    assert {suite[i].skill for i in train} == {p.skill for p in suite}


def test_two_solutions_are_distinct():
    suite = envs.make_suite(envs.SuiteConfig(p_two_solutions=1.0), seed=0)
    assert all(len(p.correct_set) == 2 and p.correct_set[0] != p.correct_set[1] for p in suite)


def test_infeasible_config():
    with pytest.raises(envs.ConfigError):
        envs.make_suite(envs.SuiteConfig(vocab_size=2, max_len=2, n_problems=4, n_skills=2, p_two_solutions=1.0))
    with pytest.raises(envs.ConfigError):
        envs.make_suite(envs.SuiteConfig(n_problems=4, n_skills=8))


def test_suite_round_trip(small_suite):
    again = envs.loads_suite(small_suite.to_json())
    assert again.to_json() == small_suite.to_json()
    with pytest.raises(envs.ConfigError):
        envs.loads_suite(small_suite.to_json().replace('"format_version": 1', '"format_version": 99'))


def test_verify_modes(small_suite):
    p = small_suite[0]
    y = p.correct_set[0]
    assert envs.verify(p, y) == 1.0
    shaped = envs.RewardSpec(envs.SHAPED)
    assert envs.verify(p, y, shaped) == 1.0
    wrong = next(s for s in small_suite.new_policy().enumerate_sequences() if s[-1] == p.terminator and s not in p.correct_set)
    assert envs.verify(p, wrong) == 0.0
    assert envs.verify(p, wrong, shaped) == -0.5
    unformatted = (0,) * small_suite.max_len
    assert envs.verify(p, unformatted, shaped) == -1.0
    with pytest.raises(envs.ConfigError):
        envs.RewardSpec("graded")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 11), st.lists(st.integers(0, 4), min_size=1, max_size=3))
def test_reward_ranges_and_purity(small_suite, pid, y):
    p = small_suite[pid]
    b = envs.verify(p, y)
    s = envs.verify(p, y, envs.RewardSpec(envs.SHAPED))
    assert b in (0.0, 1.0)
    assert s in (-1.0, -0.5, 1.0)
    assert envs.verify(p, y) == b


def test_pretrain_zero_steps_is_uniform(small_suite):
    base, rep = envs.pretrain_base(small_suite.new_policy(), small_suite, 0)
    assert np.all(base.params == 0)
    assert rep.margin == 0.0


def test_default_base_targets(default_suite):
    base, rep = envs.pretrain_base(default_suite.new_policy(), default_suite, 1000, seed=0)
    assert rep.high_greedy_solved >= 0.8
    assert rep.low_greedy_solved <= 0.2
    assert rep.margin >= 1.0
    # recomputation oracle for the margin
    hi = [np.mean([pol.log_prob(base, p, y) for y in p.correct_set]) for p in default_suite if p.tier == envs.HIGH]
    lo = [np.mean([pol.log_prob(base, p, y) for y in p.correct_set]) for p in default_suite if p.tier == envs.LOW]
    assert rep.margin == pytest.approx(np.mean(hi) - np.mean(lo), abs=1e-9)
    # the more exposed of two answers is the likelier one
    two = [p for p in default_suite if p.tier == envs.HIGH and len(p.correct_set) == 2]
    assert two
    for p in two:
        assert pol.log_prob(base, p, p.correct_set[0]) > pol.log_prob(base, p, p.correct_set[1])


def test_margin_failure_raises(small_suite):
    with pytest.raises(envs.ConstructionError):
        envs.pretrain_base(small_suite.new_policy(), small_suite, 1, min_margin=100.0)


def test_make_bandit():
    b, x = envs.make_bandit(init="uniform")
    assert b.vocab_size == 50 and b.feature_dim == 5 and x.shape == (5,)
    assert np.allclose(b.next_probs(x), 1 / 50, atol=1e-15)
    peaky, x = envs.make_bandit(init="peaky", peak_actions=(8,))
    assert peaky.next_probs(x)[8] >= 0.9
    z = peaky.next_logits(x)
    assert z[8] - np.delete(z, 8).max() >= 3.0
    with pytest.raises(envs.ConfigError):
        envs.make_bandit(vocab_size=2)


def test_strategy_labels():
    cfg = envs.SuiteConfig(strategy_bias=0.9)
    suite = envs.make_suite(cfg, seed=0)
    a, b = cfg.strategy_tokens()
    for p in suite:
        assert sorted(p.labels) == ["A", "B"]
        for y, lab in zip(p.correct_set, p.labels):
            assert suite.strategy_of(y) == lab
            assert y[0] in (a if lab == "A" else b)
    primary_a = np.mean([p.labels[0] == "A" for p in suite])
    assert primary_a > 0.7
    with pytest.raises(envs.ConfigError):
        envs.make_suite(envs.SuiteConfig(strategy_bias=1.5))
