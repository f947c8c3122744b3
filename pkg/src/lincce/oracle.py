"""Exact backward-induction evaluation, best responses and the CCE gap."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from .game import MarkovGame, StepMixturePolicy, joint_action_distribution, opponent_marginal

VALUE_TOL = 1e-9


@dataclass
class GapReport:
    policy_values: List[float]
    best_response_values: List[float]
    gaps: List[float]

    @property
    def max_gap(self) -> float:
        return max(self.gaps)

    def to_dict(self) -> dict:
        return {
            "policy_values": self.policy_values,
            "best_response_values": self.best_response_values,
            "gaps": self.gaps,
            "max_gap": self.max_gap,
        }


def _check_dims(game: MarkovGame, mix: StepMixturePolicy):
    if mix.horizon != game.horizon:
        raise ValueError(f"policy horizon {mix.horizon} != game horizon {game.horizon}")
    if mix.num_states != game.num_states:
        raise ValueError(f"policy covers {mix.num_states} states, game has {game.num_states}")
    if mix.action_counts != game.action_counts:
        raise ValueError(f"policy action counts {mix.action_counts} != game {game.action_counts}")


def joint_distributions(game: MarkovGame, mix: StepMixturePolicy) -> np.ndarray:
    """``mu[h, s, j]`` for every step and state (0-based ``h``)."""
    _check_dims(game, mix)
    mu = np.empty((game.H, game.S, game.num_joint))
    for h in range(game.H):
        for s in range(game.S):
            mu[h, s] = joint_action_distribution(mix, h + 1, s)
    return mu


def evaluate_values(game: MarkovGame, mix: StepMixturePolicy) -> np.ndarray:
    """Value table ``V[h, i, s]`` with ``h = 0..H`` (row ``H`` is the zero terminal row)."""
    mu = joint_distributions(game, mix)
    V = np.zeros((game.H + 1, game.m, game.S))
    for h in range(game.H - 1, -1, -1):
        # Q[i, s, j] = r + P V_{h+1}
        Q = game.r[h] + np.einsum("sjt,it->isj", game.P[h], V[h + 1])
        V[h] = np.einsum("sj,isj->is", mu[h], Q)
    return V


def best_response(game: MarkovGame, mix: StepMixturePolicy, i: int):
    """Deterministic best response of agent ``i`` against the others' per-step marginal.

    Returns ``(probs, V)`` where ``probs`` has shape ``(H, S, A_i)`` (one-hot,
    lowest index on ties) and ``V[h, s]`` for ``h = 0..H``.
    """
    _check_dims(game, mix)
    A = game.action_counts
    Ai = A[i]
    V = np.zeros((game.H + 1, game.S))
    probs = np.zeros((game.H, game.S, Ai))
    for h in range(game.H - 1, -1, -1):
        # per joint action: reward + continuation for agent i
        q_joint = game.r[h, i] + game.P[h] @ V[h + 1]              # (S, J)
        q_joint = q_joint.reshape(game.S, *A)
        q_joint = np.moveaxis(q_joint, 1 + i, 1).reshape(game.S, Ai, -1)
        for s in range(game.S):
            rho = opponent_marginal(mix, h + 1, s, i)
            qa = q_joint[s] @ rho
            a_star = int(np.argmax(qa))
            probs[h, s, a_star] = 1.0
            V[h, s] = qa[a_star]
    return probs, V


def cce_gap(game: MarkovGame, mix: StepMixturePolicy) -> GapReport:
    """Per-agent gain from the best unilateral deviation at the initial state.

    For a product policy every gap is nonnegative.  A correlated mixture can beat
    every fixed deviation, so negative gaps are reported as they are.
    """
    V = evaluate_values(game, mix)
    s1 = game.initial_state
    pol, br, gaps = [], [], []
    for i in range(game.m):
        _, Vbr = best_response(game, mix, i)
        pol.append(float(V[0, i, s1]))
        br.append(float(Vbr[0, s1]))
        gaps.append(br[-1] - pol[-1])
    if mix.num_components == 1 and min(gaps) < -VALUE_TOL:
        raise ArithmeticError(f"best response below policy value: gaps={gaps}")
    return GapReport(pol, br, gaps)


def _sample_rows(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF sampling: one draw per row of ``probs`` using uniforms ``u``."""
    cdf = np.cumsum(probs, axis=-1)
    idx = (u[:, None] >= cdf).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def monte_carlo_value(game: MarkovGame, mix: StepMixturePolicy, trajectories: int, seed=0):
    """Sample-mean returns per agent and their standard errors."""
    _check_dims(game, mix)
    if trajectories < 1:
        raise ValueError("need at least one trajectory")
    rng = np.random.default_rng(seed)
    n = trajectories
    s = np.full(n, game.initial_state)
    returns = np.zeros((n, game.m))
    for h in range(game.H):
        k = _sample_rows(np.broadcast_to(mix.weights[h], (n, mix.num_components)), rng.random(n))
        acts = [_sample_rows(c[h, k, s], rng.random(n)) for c in mix.components]
        j = np.ravel_multi_index(tuple(acts), game.action_counts)
        returns += game.r[h][:, s, j].T
        s = _sample_rows(game.P[h, s, j], rng.random(n))
    mean = returns.mean(axis=0)
    se = returns.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(game.m)
    return mean, se
