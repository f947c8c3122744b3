"""Shared fixtures and brute-force reference implementations used as test oracles."""

import itertools

import numpy as np
import pytest

from lincce.game import MarkovGame, StepMixturePolicy
from lincce.harness import matrix_game


def brute_force_values(game: MarkovGame, mix: StepMixturePolicy):
    """Value at every (h, s) by explicit enumeration of components and joint actions.

    Deliberately loop-based and independent of the vectorised oracle.
    """
    H, S, m = game.horizon, game.num_states, game.num_agents
    V = np.zeros((H + 1, m, S))
    for h in reversed(range(H)):
        for s in range(S):
            for k in range(mix.num_components):
                w = mix.weights[h, k]
                for acts in itertools.product(*[range(a) for a in game.action_counts]):
                    p = w
                    for i, a in enumerate(acts):
                        p *= mix.components[i][h, k, s, a]
                    if p == 0:
                        continue
                    j = int(np.ravel_multi_index(acts, game.action_counts))
                    for i in range(m):
                        cont = sum(game.P[h, s, j, t] * V[h + 1, i, t] for t in range(S))
                        V[h, i, s] += p * (game.r[h, i, s, j] + cont)
    return V


def brute_force_best_response_value(game: MarkovGame, mix: StepMixturePolicy, i: int):
    """Best value of a deterministic Markov deviation, by enumerating every such deviation."""
    H, S = game.horizon, game.num_states
    Ai = game.action_counts[i]
    best = -np.inf
    for choice in itertools.product(range(Ai), repeat=H * S):
        probs = np.zeros((H, S, Ai))
        for idx, a in enumerate(choice):
            probs[idx // S, idx % S, a] = 1.0
        dev = mix.with_agent_policy(i, probs)
        best = max(best, brute_force_values(game, dev)[0, i, game.initial_state])
    return best


def prisoners_dilemma() -> MarkovGame:
    r1 = np.array([[0.6, 0.0], [1.0, 0.2]])
    return matrix_game([r1, r1.T])


def deterministic_mixture(game: MarkovGame, joint_actions, weights=None) -> StepMixturePolicy:
    """Mixture whose ``k``-th component plays ``joint_actions[k]`` everywhere."""
    K = len(joint_actions)
    w = np.full(K, 1.0 / K) if weights is None else np.asarray(weights, float)
    comps = []
    for i, a in enumerate(game.action_counts):
        c = np.zeros((game.horizon, K, game.num_states, a))
        for k, ja in enumerate(joint_actions):
            c[:, k, :, ja[i]] = 1.0
        comps.append(c)
    return StepMixturePolicy(np.tile(w, (game.horizon, 1)), tuple(comps))


def random_mixture(game: MarkovGame, K: int, rng) -> StepMixturePolicy:
    w = rng.dirichlet(np.ones(K), size=game.horizon)
    comps = tuple(rng.dirichlet(np.ones(a), size=(game.horizon, K, game.num_states))
                  for a in game.action_counts)
    return StepMixturePolicy(w, comps)


@pytest.fixture
def pd_game():
    return prisoners_dilemma()
