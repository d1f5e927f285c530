import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from ensemble_sampling.engine import (GOLDEN_B, PERTURB, AgentConfig, AnytimeAgent, DoublingSchedule,
                                      GlmES, LinES, LinUCB, NeuralES, UniformRandom, anytime_wrap,
                                      doubling_boundaries, ensemble_size_theory, make_agent, make_rng,
                                      run_episode, select_arm, update_ensemble)
from ensemble_sampling.envs import ArmSet, generate_instance
from ensemble_sampling.errors import InvalidArgumentError, StateError
from ensemble_sampling.glm import GlmDataset, LinkFunction, fit_mle, glm_warmup_schedule


def lin_config(**kw):
    return AgentConfig("LinES", **kw)


# --- arm selection ----------------------------------------------------------

def test_single_member_always_chosen():
    arms, _ = generate_instance("linear", 5, 3, seed=0)
    agent = LinES(lin_config(m=1), arms, seed=0)
    assert {select_arm(agent)[1] for _ in range(50)} == {0}


def test_chosen_member_argmax():
    agent = GlmES(AgentConfig("GlmES", m=2, link="identity", tau=0), ArmSet(np.eye(2)), seed=0)
    agent.thetas[:] = [0.9, 0.1]
    assert select_arm(agent)[0] == 0
    agent.thetas[:] = [0.5, 0.5]
    assert select_arm(agent)[0] == 0  # ties go to the lowest index


def test_member_choice_is_uniform():
    arms, _ = generate_instance("linear", 5, 3, seed=0)
    agent = LinES(lin_config(m=10), arms, seed=3)
    for _ in range(10_000):
        select_arm(agent)
    assert np.all(np.abs(agent.model_counts - 1000) <= 3 * math.sqrt(10_000 * 0.1 * 0.9))


def test_selection_before_warmup_is_an_error():
    arms, _ = generate_instance("logistic", 10, 3, seed=0)
    agent = GlmES(AgentConfig("GlmES", m=3, tau=6), arms, seed=0)
    with pytest.raises(StateError):
        select_arm(agent)


@settings(max_examples=25)
@given(seed=st.integers(0, 2**32), scale=st.floats(1e-3, 1e3))
def test_scaling_predictions_keeps_selection(seed, scale):
    arms, model = generate_instance("linear", 8, 3, seed=seed % 1000)
    a = LinES(lin_config(m=4), arms, seed=seed)
    b = LinES(lin_config(m=4), arms, seed=seed)
    g = np.random.default_rng(seed)
    for _ in range(5):
        k = int(g.integers(8))
        y = float(g.standard_normal())
        a.observe(k, y)
        b.observe(k, y)
    b.B *= scale
    for _ in range(10):
        assert select_arm(a) == select_arm(b)


# --- ensemble updates -------------------------------------------------------

def test_zero_perturbation_lin_members_identical(rng):
    arms, model = generate_instance("linear", 10, 4, seed=1)
    agent = LinES(lin_config(m=5, sigma_r=0.0), arms, seed=0)
    for _ in range(30):
        a = agent.select()
        update_ensemble(agent, a, model.sample_reward(arms[a], rng))
        th = agent.thetas
        assert np.array_equal(th, np.broadcast_to(th[0], th.shape))


def test_zero_perturbation_glm_members_identical(rng):
    arms, model = generate_instance("logistic", 10, 3, seed=1)
    agent = GlmES(AgentConfig("GlmES", m=4, sigma_r=0.0, tau=6, iters=10), arms, seed=0)
    for _ in range(20):
        a = agent.select()
        agent.observe(a, model.sample_reward(arms[a], rng))
        assert np.array_equal(agent.thetas, np.broadcast_to(agent.thetas[0], agent.thetas.shape))


def test_zero_perturbation_lin_is_ridge_on_identity_arms(rng):
    d, lam = 4, 0.7
    agent = LinES(lin_config(m=3, sigma_r=0.0, lam=lam), ArmSet(np.eye(d)), seed=0)
    n, s = np.zeros(d), np.zeros(d)
    for _ in range(40):
        a = int(rng.integers(d))
        y = float(rng.standard_normal())
        agent.observe(a, y)
        n[a] += 1
        s[a] += y
    assert np.allclose(agent.thetas, s / (lam + n), atol=1e-12)


def test_lin_members_are_perturbed_ridge(rng):
    arms, _ = generate_instance("linear", 12, 4, seed=2)
    lam = 1.3
    agent = LinES(lin_config(m=3, sigma_r=0.4, lam=lam), arms, seed=9)
    pulls, ys = [], []
    for _ in range(60):
        a = int(rng.integers(12))
        y = float(rng.standard_normal())
        agent.observe(a, y)
        pulls.append(a)
        ys.append(y)
    X = arms.features[pulls]
    Z = agent.perturbation_history
    A = lam * np.eye(4) + X.T @ X
    for j in range(3):
        expected = np.linalg.solve(A, agent.B0[j] + X.T @ (np.asarray(ys) + Z[:, j]))
        assert np.allclose(agent.thetas[j], expected, atol=1e-10)


def test_glm_refit_matches_gradient_descent_on_raw_history(rng):
    arms, model = generate_instance("logistic", 10, 3, seed=4)
    cfg = AgentConfig("GlmES", m=2, sigma_r=0.3, tau=6, iters=15, step=0.5)
    agent = GlmES(cfg, arms, seed=1)
    pulls, ys = [], []
    for _ in range(12):
        a = agent.select()
        y = model.sample_reward(arms[a], rng)
        prev = agent.thetas.copy()
        agent.observe(a, y)
        pulls.append(a)
        ys.append(y)
    Z = agent.perturbation_history
    link = LinkFunction.logistic()
    for j in range(2):
        data = GlmDataset(arms.features[pulls], np.asarray(ys) + Z[:, j])
        ref = fit_mle(data, cfg.lam, link, iters=cfg.iters, step=cfg.step / len(ys), theta_init=prev[j])
        assert np.allclose(agent.thetas[j], ref, atol=1e-10)


def test_m_draws_per_round_and_prefix_stability(rng):
    arms, model = generate_instance("linear", 6, 3, seed=0)
    agent = LinES(lin_config(m=7), arms, seed=5)
    seen = []
    for t in range(25):
        before = agent.perturbation_draws
        a = agent.select()
        agent.observe(a, model.sample_reward(arms[a], rng))
        assert agent.perturbation_draws - before == 7
        hist = agent.perturbation_history
        for old in seen:
            assert np.array_equal(hist[: len(old)], old)
        seen.append(hist.copy())
    expected = np.array([make_rng(5, 0, PERTURB, j).standard_normal(25) for j in range(7)]).T * 0.1
    assert np.array_equal(agent.perturbation_history, expected)


@pytest.mark.parametrize("variant,extra", [("LinES", {}), ("GlmES", dict(tau=25, iters=5)),
                                            ("NeuralES", dict(tau=10, iters=2, width=4, depth=2))])
def test_total_draws_equal_m_times_horizon(variant, extra):
    kind = {"LinES": "linear", "GlmES": "logistic", "NeuralES": "quadratic"}[variant]
    arms, model = generate_instance(kind, 10, 4, seed=0)
    trace = run_episode(model, arms, AgentConfig(variant, m=6, **extra), 60, seed=1)
    assert trace.perturbation_draws == 6 * 60


def test_invalid_reward_rejected():
    arms, _ = generate_instance("linear", 5, 3, seed=0)
    with pytest.raises(InvalidArgumentError):
        LinES(lin_config(), arms, 0).observe(0, float("nan"))


def _phe_reference(xs, ys, lam, sigma, x_eval, g):
    # perturbed-history exploration: fresh noise on every past reward
    z = sigma * g.standard_normal(len(ys))
    theta = np.linalg.solve(lam * np.eye(xs.shape[1]) + xs.T @ xs, xs.T @ (ys + z))
    return float(x_eval @ theta)


def test_full_resampling_matches_perturbed_history_exploration():
    arms, _ = generate_instance("linear", 6, 3, seed=0)
    g = np.random.default_rng(0)
    pulls = g.integers(0, 6, 15)
    ys = g.standard_normal(15)
    cfg = lin_config(m=1, sigma_r=0.5, lam=1.0, prior_scale=0.0)
    ours, ref = [], []
    ref_rng = np.random.default_rng(10**6)
    for seed in range(1000):
        agent = LinES(cfg, arms, seed, resample_all=True)
        for a, y in zip(pulls, ys):
            agent.observe(int(a), float(y))
        ours.append(agent.predict(0)[0])
        ref.append(_phe_reference(arms.features[pulls], ys, 1.0, 0.5, arms.features[0], ref_rng))
    assert stats.ks_2samp(ours, ref).pvalue > 0.01


# --- episodes ---------------------------------------------------------------

def test_uniform_regret_matches_mean_gap():
    arms, model = generate_instance("linear", 50, 20, seed=0)
    means = model.mean_rewards(arms.features)
    mean_gap = float(np.mean(means.max() - means))
    T = 10_000
    per_round = np.mean([run_episode(model, arms, AgentConfig("UniformRandom"), T, s).regret_at(T) / T
                         for s in range(10)])
    assert abs(per_round / mean_gap - 1) < 0.2


def test_uniform_arm_counts():
    arms, model = generate_instance("linear", 50, 5, seed=0)
    trace = run_episode(model, arms, AgentConfig("UniformRandom"), 10_000, seed=3)
    counts = np.bincount(trace.arms, minlength=50)
    assert np.all(np.abs(counts - 200) <= 5 * math.sqrt(10_000 * 0.02 * 0.98))


def test_noiseless_identification_after_spanning_pulls():
    arms, model = generate_instance("linear", 20, 4, seed=7, noise_sigma=0.0)
    agent = LinES(lin_config(m=3, sigma_r=0.0, lam=1e-10), arms, seed=0)
    basis = []
    for k in range(arms.K):  # force d linearly independent pulls
        if np.linalg.matrix_rank(arms.features[basis + [k]]) > len(basis):
            basis.append(k)
        if len(basis) == arms.d:
            break
    for k in basis:
        agent.observe(k, model.mean_reward(arms[k]))
    best = int(np.argmax(model.mean_rewards(arms.features)))
    for _ in range(20):
        a = agent.select()
        assert a == best
        agent.observe(a, model.mean_reward(arms[a]))


def test_zero_perturbation_lin_is_greedy_ridge():
    arms, model = generate_instance("linear", 20, 5, seed=3)
    es = run_episode(model, arms, lin_config(m=4, sigma_r=0.0), 300, seed=2)
    greedy = run_episode(model, arms, AgentConfig("LinUCB", alpha=0.0), 300, seed=2)
    assert np.array_equal(es.arms, greedy.arms)


def test_thompson_with_zero_scale_is_greedy_ridge():
    arms, model = generate_instance("linear", 20, 5, seed=3)
    ts = run_episode(model, arms, AgentConfig("LinTS", posterior_scale=0.0), 300, seed=2)
    greedy = run_episode(model, arms, AgentConfig("LinUCB", alpha=0.0), 300, seed=2)
    assert np.array_equal(ts.arms, greedy.arms)


@pytest.mark.parametrize("cfg,kind", [
    (AgentConfig("LinES", m=5), "linear"),
    (AgentConfig("GlmES", m=3, tau=30, iters=5), "logistic"),
    (AgentConfig("NeuralES", m=2, tau=10, iters=3, width=4, depth=3), "distance"),
    (AgentConfig("LinTS"), "linear"),
    (AgentConfig("UniformRandom"), "linear"),
])
def test_same_seed_same_trace_bytes(cfg, kind):
    arms, model = generate_instance(kind, 10, 4, seed=0)
    a = run_episode(model, arms, cfg, 80, seed=11)
    b = run_episode(model, arms, cfg, 80, seed=11)
    assert a.arms.tobytes() == b.arms.tobytes() and a.cum.tobytes() == b.cum.tobytes()


@pytest.mark.parametrize("variant,kind,extra", [
    ("GlmES", "logistic", dict(tau=30, iters=10)),
    ("NeuralES", "quadratic", dict(tau=10, iters=5, width=4, depth=3)),
])
def test_thread_count_does_not_change_trace(variant, kind, extra):
    arms, model = generate_instance(kind, 10, 4, seed=0)
    traces = [run_episode(model, arms, AgentConfig(variant, m=4, n_threads=n, **extra), 60, seed=2)
              for n in (1, 2)]
    assert traces[0].arms.tobytes() == traces[1].arms.tobytes()


@settings(max_examples=20)
@given(seed=st.integers(0, 2**32), kind=st.sampled_from(["linear", "logistic", "quadratic", "distance"]))
def test_trace_accounting(seed, kind):
    arms, model = generate_instance(kind, 8, 3, seed=seed % 997)
    trace = run_episode(model, arms, AgentConfig("LinTS"), 50, seed=seed)
    assert np.array_equal(trace.cum, np.cumsum(trace.inst))
    assert trace.inst.min() >= -1e-12
    assert np.array_equal(trace.rounds, np.arange(1, 51))


def test_horizon_must_exceed_warmup():
    arms, model = generate_instance("logistic", 10, 4, seed=0)
    with pytest.raises(InvalidArgumentError):
        run_episode(model, arms, AgentConfig("GlmES", tau=50), 50, seed=0)


def test_glm_warmup_follows_design():
    arms, model = generate_instance("logistic", 30, 4, seed=0)
    agent = GlmES(AgentConfig("GlmES", m=2, tau=20, iters=2), arms, seed=0)
    pulls = []
    for _ in range(20):
        assert not agent.fitted
        a = agent.select()
        pulls.append(a)
        agent.observe(a, 0.0)
    assert pulls == glm_warmup_schedule(arms, 20)
    assert agent.fitted


def test_neural_warmup_pulls_each_arm_once():
    arms, _ = generate_instance("quadratic", 7, 4, seed=0)
    agent = NeuralES(AgentConfig("NeuralES", m=2, tau=7, iters=2, width=4), arms, seed=0)
    pulls = []
    for _ in range(7):
        a = agent.select()
        pulls.append(a)
        agent.observe(a, 0.0)
    assert pulls == list(range(7))


def test_baselines_run(rng):
    arms, model = generate_instance("linear", 10, 3, seed=0)
    for cls, cfg in ((LinUCB, AgentConfig("LinUCB")), (UniformRandom, AgentConfig("UniformRandom"))):
        agent = cls(cfg, arms, seed=0)
        for _ in range(5):
            a = agent.select()
            assert 0 <= a < 10
            agent.observe(a, 0.1)
        assert agent.t == 5


@pytest.mark.parametrize("bad", [dict(m=0), dict(sigma_r=-0.1), dict(tau=-1), dict(lam=0.0),
                                 dict(width=5), dict(step_rule="capped")])
def test_config_validation(bad):
    with pytest.raises(InvalidArgumentError):
        AgentConfig("NeuralES", **bad)


def test_unknown_variant_rejected():
    with pytest.raises(InvalidArgumentError):
        AgentConfig("EpsGreedy")


# --- anytime schedule -------------------------------------------------------

def _lucas_fib(n):
    # Lucas and Fibonacci numbers L_n, F_n
    L, F = 2, 0
    L1, F1 = 1, 1
    for _ in range(n):
        L, L1 = L1, L + L1
        F, F1 = F1, F + F1
    return L, F


def exact_golden_boundary(t0, i):
    """floor(t0 b^i) for b = phi^2 in integer arithmetic: b^i = (L_2i + F_2i sqrt 5) / 2."""
    L, F = _lucas_fib(2 * i)
    return (t0 * L + math.isqrt(5 * t0 * t0 * F * F)) // 2


@pytest.mark.parametrize("t0", [1, 100, 300, 1000])
def test_boundaries_match_exact_arithmetic(t0):
    sched = DoublingSchedule(t0=t0)
    got = doubling_boundaries(sched, 10**7)
    expected = []
    i = 0
    while (b := exact_golden_boundary(t0, i)) <= 10**7:
        expected.append(b)
        i += 1
    assert got == expected


def test_boundaries_standard_prefix():
    assert doubling_boundaries(DoublingSchedule(100), 10_000)[:4] == [100, 261, 685, 1794]
    assert doubling_boundaries(DoublingSchedule(300), 10_000)[:3] == [300, 785, 2056]


def test_boundaries_powers_of_two():
    assert doubling_boundaries(DoublingSchedule(t0=1, b=2.0), 1000) == [2 ** i for i in range(10)]


def test_golden_ratio_default():
    assert DoublingSchedule().b == GOLDEN_B == pytest.approx(2.618033988749895)


@given(t0=st.integers(1, 1000), b=st.floats(1.01, 5.0))
def test_boundaries_strictly_increasing(t0, b):
    try:
        got = doubling_boundaries(DoublingSchedule(t0, b), 10**6)
    except InvalidArgumentError:
        return  # floors collide for b close to 1 and small t0
    assert all(x < y for x, y in zip(got, got[1:]))
    assert all(x <= 10**6 for x in got)


def test_schedule_validation():
    with pytest.raises(InvalidArgumentError):
        DoublingSchedule(t0=0)
    with pytest.raises(InvalidArgumentError):
        DoublingSchedule(b=1.0)


def test_second_segment_parameters():
    sched = DoublingSchedule(100)
    assert sched.segment_length(1) == 161
    m, sigma = sched.segment_params(1)
    assert m == math.ceil(2 * math.log(161)) == 11
    assert sigma == pytest.approx(0.02 * math.log(161))


def test_no_restart_before_first_boundary():
    arms, model = generate_instance("linear", 10, 3, seed=0)
    cfg = anytime_wrap(AgentConfig("LinES"), DoublingSchedule(100))
    assert run_episode(model, arms, cfg, 99, seed=0).restarts == []


def test_restarts_follow_boundaries():
    arms, model = generate_instance("logistic", 10, 3, seed=0)
    sched = DoublingSchedule(100)
    cfg = anytime_wrap(AgentConfig("GlmES", tau=100, iters=3), sched)
    trace = run_episode(model, arms, cfg, 800, seed=0)
    assert trace.restarts == [b for b in doubling_boundaries(sched, 800) if b < 800] == [100, 261, 685]
    lengths = [100, 161, 424, 115]
    ms = [sched.segment_params(i)[0] for i in range(4)]
    assert trace.perturbation_draws == sum(m * n for m, n in zip(ms, lengths))


def test_anytime_rebuilds_agent_each_segment():
    arms, _ = generate_instance("linear", 5, 3, seed=0)
    agent = make_agent(anytime_wrap(AgentConfig("LinES"), DoublingSchedule(t0=3, b=2.0)), arms, seed=0)
    assert isinstance(agent, AnytimeAgent)
    inners = []
    for _ in range(13):
        a = agent.select()
        inners.append(agent.inner)
        agent.observe(a, 0.0)
    assert agent.restarts == [3, 6, 12]
    assert len({id(x) for x in inners}) == 4
    assert agent.inner.t == 1


# --- ensemble size ----------------------------------------------------------

def test_ensemble_size_examples():
    assert ensemble_size_theory(1, math.e, 1.0, 1.0) == 8
    expected = math.ceil(8 / 0.0225 * (50 * math.log(1e4) + math.log(20)))
    assert ensemble_size_theory(50, 1e4, 0.05, 0.15) == expected


@given(K=st.integers(1, 100), T=st.floats(2, 1e6))
def test_ensemble_size_monotone(K, T):
    base = ensemble_size_theory(K, T, 0.05, 0.2)
    assert ensemble_size_theory(K + 1, T, 0.05, 0.2) >= base
    assert ensemble_size_theory(K, T * 2, 0.05, 0.2) >= base


def test_ensemble_size_validation():
    with pytest.raises(InvalidArgumentError):
        ensemble_size_theory(0, 10, 0.1, 0.5)
