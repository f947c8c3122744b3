import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import prisoners_dilemma
from lincce.coreset import CoreSet, FeatureMap, c_max, one_hot_features
from lincce.ftrl import (EpochState, LearnerParams, LinConfidentFTRL, RestartBudgetExceeded, ftrl_policy,
                         ftrl_step_size, iterate_policies, run_lin_confident_ftrl, softmax_policy,
                         step_size_scale)
from lincce.game import MarkovGame, uniform_policy
from lincce.harness import chain, generate_random_tabular, matching_pennies
from lincce.oracle import cce_gap
from lincce.simulator import AccessProtocol, Simulator


def learner(game, params, protocol=AccessProtocol.LOCAL, seed=0, fmaps=None):
    fmaps = fmaps or one_hot_features(game.action_counts, game.num_states)
    return LinConfidentFTRL(Simulator(game, protocol, seed=seed), fmaps, params)


def repeated_matching_pennies(H):
    g = matching_pennies()
    return MarkovGame(1, H, (2, 2), np.ones((H, 1, 4, 1)), np.repeat(g.r, H, axis=0))


def self_loop(S=1, H=3):
    P = np.zeros((H, S, 1, S))
    P[:, np.arange(S), 0, np.arange(S)] = 1.0
    return MarkovGame(S, H, (1,), P, np.ones((H, 1, S, 1)))


# -- step sizes and policies ---------------------------------------------

def test_step_size_plug_in_value():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 4, 4))
    fm = FeatureMap(x / np.linalg.norm(x, axis=-1, keepdims=True))
    p = LearnerParams(K=1024, N=1)
    assert step_size_scale(p, fm, 3) == 2.0
    assert ftrl_step_size(1024, p, fm, 3, 3) == pytest.approx(1024 * math.sqrt(2 * math.log(4) / 1024) / 12)
    assert ftrl_step_size(1024, p, fm, 3, 3) == pytest.approx(4.440, abs=1e-3)


def test_step_size_single_action_and_linearity():
    p = LearnerParams(K=64, N=1)
    fm1 = FeatureMap.one_hot(2, 1)
    assert ftrl_step_size(5, p, fm1, 2, 2) == 0.0
    fm = FeatureMap.one_hot(2, 3)
    for k in (1, 7, 32):
        assert ftrl_step_size(2 * k, p, fm, 2, 2) == pytest.approx(2 * ftrl_step_size(k, p, fm, 2, 2))
    with pytest.raises(ValueError):
        ftrl_step_size(0, p, fm, 2, 2)


def test_declared_misspecification_uses_the_min_formula():
    p = LearnerParams(K=64, N=1, tau=0.5, delta=0.1)
    fm = FeatureMap.one_hot(4, 3)           # nu = 0, d = 12
    expected = min(1 + math.sqrt(0.5 * math.log(4 * 3 / 0.1)), math.sqrt(12))
    assert step_size_scale(p, fm, 4) == pytest.approx(expected)
    assert step_size_scale(LearnerParams(K=1, N=1, gamma_hat=3.0), fm, 4) == 3.0


def test_softmax_examples():
    np.testing.assert_allclose(softmax_policy(np.array([2.0, 2.0, 2.0]), 5.0), 1 / 3)
    np.testing.assert_allclose(softmax_policy(np.array([9.0, -4.0]), 0.0), 0.5)
    np.testing.assert_allclose(softmax_policy(np.array([1.0, 0.0]), math.log(3)), [0.75, 0.25])
    big = softmax_policy(np.array([1e4, 0.0]), 10.0)
    assert np.all(np.isfinite(big)) and big[0] == 1.0


def test_ftrl_policy_uses_features():
    fm = FeatureMap.one_hot(2, 2)
    theta = np.array([0.0, 0.0, 1.0, 0.0])
    np.testing.assert_allclose(ftrl_policy(theta, math.log(3), fm, 1), [0.75, 0.25])
    np.testing.assert_allclose(ftrl_policy(theta, math.log(3), fm, 0), [0.5, 0.5])


@settings(max_examples=50, deadline=None)
@given(vals=st.lists(st.floats(-50, 50), min_size=1, max_size=6), c=st.floats(-100, 100),
       eta=st.floats(0, 5))
def test_softmax_shift_invariance(vals, c, eta):
    v = np.array(vals)
    np.testing.assert_allclose(softmax_policy(v + c, eta), softmax_policy(v, eta), atol=1e-12)


def test_iterate_policies_matches_recursion():
    rng = np.random.default_rng(0)
    fm = FeatureMap.one_hot(3, 2)
    hist = rng.normal(size=(5, 6))
    etas = np.arange(1, 6) * 0.3
    pis = iterate_policies(fm, hist, etas)
    np.testing.assert_allclose(pis[0], 0.5)
    for k in range(1, 5):
        for s in range(3):
            np.testing.assert_allclose(pis[k, s], ftrl_policy(hist[k - 1], etas[k - 1], fm, s))


def hedge_average_regret(y, eta):
    """Average regret of exponential weights on the cumulative gains (package softmax)."""
    T = len(y)
    cum = np.vstack([np.zeros(y.shape[1]), np.cumsum(y, axis=0)[:-1]])
    pis = softmax_policy(cum, eta)
    return (y.sum(axis=0).max() - np.einsum("ta,ta->", pis, y)) / T


def test_regret_bound_on_adversarial_sequences():
    T, A = 1024, 4
    eta = math.sqrt(2 * math.log(A) / T)
    # alternating leader: a classic hard case for follow-the-leader
    y = np.zeros((T, A))
    y[0::2, 0] = 1.0
    y[1::2, 1] = 1.0
    y[0, 0] = 0.5
    assert hedge_average_regret(y, eta) <= eta
    # one good arm hidden among noise
    rng = np.random.default_rng(5)
    y = rng.random((T, A)) * 0.9
    y[:, 3] += 0.1
    assert hedge_average_regret(y, eta) <= eta


# -- parameters ----------------------------------------------------------------

def test_param_validation():
    for kw in [dict(K=0, N=1), dict(K=1, N=0), dict(K=1, N=1, tau=0), dict(K=1, N=1, lam=-1),
               dict(K=1, N=1, restart_budget=0), dict(K=1, N=1, c_eta=0)]:
        with pytest.raises(ValueError):
            LearnerParams(**kw)
    assert LearnerParams(K=4, N=1).lam_for(8, 3) == pytest.approx(1 / (4 * 8 * 9))


def test_parameter_regimes():
    p = LearnerParams.for_accuracy(0.25, horizon=3, dim=8, num_states=4, max_actions=3)
    assert p.tau == 1.0 and p.N == 144
    assert p.K == math.ceil(81 * 8 * 16 * min(math.ceil(math.log(4) / 8), 3))
    q = LearnerParams.for_accuracy(1.0, horizon=1, dim=1, num_states=10**6, max_actions=5, c_tau=0.5)
    assert q.tau == pytest.approx(0.5) and q.K == 1


def test_epoch_state_starts_at_ceiling():
    st_ = EpochState(3, 2, [4, 6], 8)
    np.testing.assert_array_equal(st_.V[0][:, 0], [3, 2, 1, 0])
    np.testing.assert_array_equal(st_.V_dag[1][:, 1], [3, 2, 1, 0])


# -- subroutines ---------------------------------------------------------------

def test_single_iteration_recovers_targets():
    g = self_loop(S=2, H=3)
    L = learner(g, LearnerParams(K=1, N=1, lam=1e-8))
    L.explore(0, 3)
    assert L.multi_agent_learning(3)
    assert L.state.V[0][2, 0] == pytest.approx(1.0, abs=1e-7)
    # uncovered state 1 has no data
    assert L.state.V[0][2, 1] == pytest.approx(0.0)


def test_tabular_fixed_point_on_self_loop():
    g = self_loop(S=1, H=4)
    mix, rep = run_lin_confident_ftrl(Simulator(g, AccessProtocol.LOCAL), one_hot_features((1,), 1),
                                      LearnerParams(K=3, N=2, lam=1e-8))
    L = learner(g, LearnerParams(K=3, N=2, lam=1e-8))
    L.run()
    for h in range(1, 5):
        assert L.state.V[0][h - 1, 0] == pytest.approx(4 - h + 1, abs=1e-6)
    assert rep.restarts == 0


def test_escape_triggers_failure_and_exploration():
    # state 0 always moves to state 1, which is not yet covered at step 2
    H, S = 2, 2
    P = np.zeros((H, S, 1, S))
    P[:, :, 0, 1] = 1.0
    g = MarkovGame(S, H, (1,), P, np.zeros((H, 1, S, 1)))
    L = learner(g, LearnerParams(K=4, N=1, lam=1.0))
    L.explore(0, 1)
    assert not L.confident_mask(2)[1]
    assert L.multi_agent_learning(1) is False
    assert L.confident_mask(2)[1]
    assert L.sim.ledger.total_queries == 1
    assert L.report.progress[-1]["phase"] == "learn"


def test_rollout_success_and_forced_escape():
    g = chain(3, 3, A=1, m=1)
    L = learner(g, LearnerParams(K=1, N=5, lam=1.0))
    mix = uniform_policy(g).as_mixture()
    L.explore(0, 1)
    assert L.policy_rollout(mix, 5) is False      # 0 -> 1 at step 1 is new
    assert L.sim.ledger.total_queries == 1
    for h, s in [(2, 1), (3, 2), (1, 0)]:
        L.explore(s, h)
    assert L.policy_rollout(mix, 5) is True
    assert L.sim.ledger.total_queries == 1 + 5 * 3


def test_single_state_rollout_always_succeeds():
    g = repeated_matching_pennies(2)
    L = learner(g, LearnerParams(K=1, N=7))
    L.initialize()
    assert L.policy_rollout(uniform_policy(g).as_mixture(), 7)
    assert L.samples["rollout"] == 14


def test_single_agent_learning_against_uniform_opponent():
    g = prisoners_dilemma()
    K = 4000
    L = learner(g, LearnerParams(K=K, N=1, lam=1e-8))
    L.initialize()
    mix = uniform_policy(g).as_mixture()
    assert L.single_agent_learning(1, 0, mix)
    Q = L.fmaps[0].phi[0] @ L.state.theta_dag[0][0]
    sigma = 0.3 / math.sqrt(K)        # reward is 0.6 or 0 (C), 1.0 or 0.2 (D): sd 0.3 and 0.4
    assert abs(Q[0] - 0.3) <= 3 * sigma
    assert abs(Q[1] - 0.6) <= 3 * 0.4 / math.sqrt(K)
    assert L.state.pi_dag[0][0, 0] == 1
    assert L.state.V_dag[0][0, 0] == pytest.approx(Q.max())


def test_single_agent_learning_deterministic_targets():
    g = prisoners_dilemma()
    L = learner(g, LearnerParams(K=4, N=1, lam=1e-8))
    L.initialize()
    defect = np.zeros((1, 1, 1, 2))
    defect[..., 1] = 1.0
    from lincce.game import StepMixturePolicy
    mix = StepMixturePolicy(np.ones((1, 1)), (defect.copy(), defect.copy()))
    assert L.single_agent_learning(1, 0, mix)
    Q = L.fmaps[0].phi[0] @ L.state.theta_dag[0][0]
    np.testing.assert_allclose(Q, np.array([0.0, 0.2]) / (1 + 1e-8), atol=1e-12)


# -- full runs -----------------------------------------------------------------

def test_rejects_online_access_and_run_needs_local():
    g = matching_pennies()
    with pytest.raises(ValueError):
        learner(g, LearnerParams(K=1, N=1), protocol=AccessProtocol.ONLINE)
    with pytest.raises(ValueError):
        run_lin_confident_ftrl(Simulator(g, AccessProtocol.RANDOM), one_hot_features((2, 2), 1),
                               LearnerParams(K=1, N=1))


def test_feature_shape_checked():
    g = matching_pennies()
    with pytest.raises(ValueError):
        LinConfidentFTRL(Simulator(g, AccessProtocol.LOCAL), one_hot_features((2, 3), 1), LearnerParams(K=1, N=1))
    with pytest.raises(ValueError):
        LinConfidentFTRL(Simulator(g, AccessProtocol.LOCAL), one_hot_features((2,), 1), LearnerParams(K=1, N=1))


def test_repeated_matching_pennies_converges_without_restarts():
    g = repeated_matching_pennies(2)
    mix, rep = run_lin_confident_ftrl(Simulator(g, AccessProtocol.LOCAL, seed=3),
                                      one_hot_features(g.action_counts, 1), LearnerParams(K=4096, N=16))
    assert rep.restarts == 0
    assert cce_gap(g, mix).max_gap <= 0.15


def test_single_action_game_has_zero_gap():
    g = chain(4, 3, A=1, m=2)
    mix, rep = run_lin_confident_ftrl(Simulator(g, AccessProtocol.LOCAL), one_hot_features((1, 1), 4),
                                      LearnerParams(K=8, N=4))
    assert cce_gap(g, mix).max_gap == 0.0
    # the reachable states are 0 -> 1 -> 2, covered by the initial trajectory
    assert rep.restarts == 0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_run_bookkeeping(seed):
    g = generate_random_tabular(4, 2, (2, 3), 3, seed=seed)
    sim = Simulator(g, AccessProtocol.LOCAL, seed=seed)
    fmaps = one_hot_features(g.action_counts, 4)
    L = LinConfidentFTRL(sim, fmaps, LearnerParams(K=32, N=20))
    mix, rep = L.run()
    # double entry: learner accounting equals the simulator ledger, phase by phase
    assert rep.total_samples == sim.ledger.total_queries
    assert dict(rep.phase_samples) == dict(sim.ledger.phase_counts)
    assert sim.ledger.violation_count == 0
    assert rep.phase_samples["init"] == 3
    assert rep.phase_samples["rollout"] == 20 * 3
    assert rep.phase_samples["final_rollout"] == 2 * 20 * 3
    # restarts bounded and each one strictly grows the core sets
    bound = 2 * 3 * math.floor(max(c_max(fm.dim, 0.5, 1 / (32 * fm.dim * 9)) for fm in fmaps))
    assert rep.restarts <= bound and len(rep.progress) == rep.restarts
    sizes = [p["core_pairs"] for p in rep.progress]
    assert all(a < b for a, b in zip(sizes, sizes[1:]))
    # clipping
    for i in range(2):
        for h in range(1, 4):
            assert np.all(L.state.V[i][h - 1] <= 3 - h + 1)
    assert mix.num_components == 32
    np.testing.assert_allclose(mix.weights, 1 / 32)


def test_runs_are_reproducible():
    g = generate_random_tabular(4, 2, (2, 3), 3, seed=9)
    out = []
    for _ in range(2):
        sim = Simulator(g, AccessProtocol.LOCAL, seed=4)
        mix, rep = run_lin_confident_ftrl(sim, one_hot_features(g.action_counts, 4), LearnerParams(K=16, N=8))
        out.append((mix, rep))
    (m1, r1), (m2, r2) = out
    assert all(np.array_equal(a, b) for a, b in zip(m1.components, m2.components))
    assert r1.total_samples == r2.total_samples and r1.restarts == r2.restarts


def test_restart_budget_is_enforced():
    g = generate_random_tabular(4, 2, (2, 3), 3, seed=0)
    with pytest.raises(RestartBudgetExceeded):
        run_lin_confident_ftrl(Simulator(g, AccessProtocol.LOCAL), one_hot_features(g.action_counts, 4),
                               LearnerParams(K=8, N=8, restart_budget=1))


def test_restart_resets_epoch_state_but_keeps_cores():
    g = generate_random_tabular(4, 2, (2, 3), 3, seed=0)
    L = learner(g, LearnerParams(K=8, N=8))
    L.initialize()
    L.state.V[0][0, 0] = -5.0
    before = [[len(c) for c in row] for row in L.cores]
    L._restart()
    assert L.state.V[0][0, 0] == 3.0
    assert [[len(c) for c in row] for row in L.cores] == before
    assert L.report.restarts == 1


def test_general_features_run():
    rng = np.random.default_rng(0)
    g = generate_random_tabular(4, 2, (2, 2), 2, seed=1)
    fmaps = []
    for a in g.action_counts:
        x = rng.normal(size=(4, a, 5))
        fmaps.append(FeatureMap(x / np.linalg.norm(x, axis=-1, keepdims=True)))
    sim = Simulator(g, AccessProtocol.LOCAL, seed=0)
    mix, rep = run_lin_confident_ftrl(sim, fmaps, LearnerParams(K=16, N=8, lam=0.1))
    assert rep.total_samples == sim.ledger.total_queries
    assert np.isfinite(cce_gap(g, mix).max_gap)
