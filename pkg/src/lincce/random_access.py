"""Random-access (generative model) variant: one core set per agent chosen upfront
over all state-action pairs, a single backward pass with no restarts or rollouts,
and alpha-weighted averaging of the iterates.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .coreset import CoreSet, FeatureMap, quadratic_forms
from .ftrl import LearnerParams, RunReport, ftrl_step_size, softmax_policy
from .game import StepMixturePolicy
from .simulator import AccessProtocol, Opponents, Simulator


def harmonic_rates(K: int) -> np.ndarray:
    """``alpha_k = 1/k``: plain running averages."""
    return 1.0 / np.arange(1, K + 1)


def rescaled_rates(K: int, c_alpha: float = 1.0) -> np.ndarray:
    """``alpha_k = c log K / (k - 1 + c log K)``, the tabular schedule."""
    if K == 1:
        return np.ones(1)
    c = c_alpha * math.log(K)
    return c / (np.arange(K) + c)


def mixture_weights(alphas) -> np.ndarray:
    """Weights ``alpha_i prod_{j>i} (1 - alpha_j)`` placed on iterate ``i``."""
    alphas = np.asarray(alphas, dtype=float)
    if len(alphas) == 0 or alphas[0] != 1.0:
        raise ValueError("the first learning rate must equal 1")
    if np.any(alphas <= 0) or np.any(alphas > 1):
        raise ValueError("learning rates must lie in (0, 1]")
    # tail[i] = prod_{j > i} (1 - alpha_j)
    tail = np.append(np.cumprod((1.0 - alphas[:0:-1]))[::-1], 1.0)
    return alphas * tail


@dataclass
class RAParams:
    K: int
    tau: float = 0.5
    lam: Optional[float] = None
    alphas: Optional[np.ndarray] = None
    etas: Optional[Sequence[np.ndarray]] = None
    bonus: str = "zero"
    c_b: float = 0.0
    delta: float = 0.1
    c_eta: float = 2.0

    def __post_init__(self):
        if self.K < 1 or self.tau <= 0 or self.delta <= 0:
            raise ValueError("K, tau and delta must be positive")
        if self.lam is not None and self.lam <= 0:
            raise ValueError("lam must be positive")
        if self.bonus not in ("zero", "tabular"):
            raise ValueError(f"unknown bonus mode {self.bonus!r}")
        self.alphas = harmonic_rates(self.K) if self.alphas is None else np.asarray(self.alphas, float)
        if len(self.alphas) != self.K:
            raise ValueError("need one learning rate per iteration")
        mixture_weights(self.alphas)

    def lam_for(self, dim: int, horizon: int) -> float:
        return self.lam if self.lam is not None else 1.0 / (self.K * dim * horizon ** 2)

    def as_learner_params(self) -> LearnerParams:
        return LearnerParams(K=self.K, N=1, tau=self.tau, lam=self.lam, delta=self.delta, c_eta=self.c_eta)


def select_core_sets(fmaps: Sequence[FeatureMap], tau: float, lams) -> list:
    """Greedy design over every state-action pair until all are covered within ``tau``."""
    if np.isscalar(lams):
        lams = [lams] * len(fmaps)
    cores = []
    for fm, lam in zip(fmaps, lams):
        core = CoreSet(fm.dim, lam, tau)
        while True:
            qf = quadratic_forms(core, fm)
            flat = int(np.argmax(qf))
            s, a = divmod(flat, fm.num_actions)
            if qf[s, a] <= tau:
                break
            core.add(s, a, fm.phi[s, a])
        cores.append(core)
    return cores


def is_one_hot(fmap: FeatureMap) -> bool:
    phi = fmap.phi.reshape(-1, fmap.dim)
    if not np.all((phi == 0) | (phi == 1)) or not np.all(phi.sum(axis=1) == 1):
        return False
    return len(np.unique(np.argmax(phi, axis=1))) == phi.shape[0]


def tabular_bonus(K: int, H: int, delta: float, S: int, A_sum: int, c_b: float,
                  variances: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Bonus per state from per-iterate variances ``variances[k, s]``."""
    scale = c_b * math.sqrt(math.log(K * S * A_sum / delta) ** 3 / (K * H))
    return scale * (weights @ (np.asarray(variances) + H))


def policy_variance(pis: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Variance of ``q[k, s, .]`` under ``pis[k, s, .]``, shape ``(K, S)``."""
    mean = np.einsum("ksa,ksa->ks", pis, q)
    return np.einsum("ksa,ksa->ks", pis, q ** 2) - mean ** 2


class RandomAccessLearner:
    def __init__(self, sim: Simulator, fmaps: Sequence[FeatureMap], params: RAParams, cores=None):
        if sim.protocol is not AccessProtocol.RANDOM:
            raise ValueError(f"the random-access learner needs random access, got {sim.protocol.value}")
        game = sim.game
        if params.bonus == "tabular" and not all(is_one_hot(fm) for fm in fmaps):
            raise ValueError("the tabular bonus needs one-hot features")
        self.sim, self.game, self.fmaps, self.params = sim, game, list(fmaps), params
        H, K = game.horizon, params.K
        lams = [params.lam_for(fm.dim, H) for fm in fmaps]
        self.cores = cores if cores is not None else select_core_sets(fmaps, params.tau, lams)
        if params.etas is None:
            lp = params.as_learner_params()
            self.etas = [np.array([ftrl_step_size(k + 1, lp, fm, H, game.num_states)
                                   for k in range(1, K + 1)]) for fm in fmaps]
        else:
            self.etas = [np.asarray(e, dtype=float) for e in params.etas]
        self.weights = mixture_weights(params.alphas)
        m, S = game.num_agents, game.num_states
        self.V = [np.zeros((H + 1, S)) for _ in range(m)]
        self.theta = [[None] * H for _ in range(m)]
        self.Q_coef = [[None] * H for _ in range(m)]
        self.policies = [[None] * H for _ in range(m)]
        self.bonus = [np.zeros((H, S)) for _ in range(m)]
        self.samples = 0

    def learn_step(self, h: int):
        game, p = self.game, self.params
        m, K, H = game.num_agents, p.K, game.horizon
        pairs = [np.array(c.pairs, dtype=int).reshape(-1, 2) for c in self.cores]
        M = [c.regression_matrix() for c in self.cores]
        dims = [fm.dim for fm in self.fmaps]
        theta = [np.zeros((K, d)) for d in dims]
        blended = [np.zeros((K, d)) for d in dims]
        current = [np.zeros(d) for d in dims]     # theta^0 = 0
        pis = [np.empty((K, game.num_states, a)) for a in game.action_counts]
        with self.sim.in_phase("learn"):
            for k in range(1, K + 1):
                if k == 1:
                    tables = [np.full((game.num_states, a), 1.0 / a) for a in game.action_counts]
                else:
                    tables = [softmax_policy(self.fmaps[j].phi @ current[j], self.etas[j][k - 2])
                              for j in range(m)]
                for j in range(m):
                    pis[j][k - 1] = tables[j]
                alpha = p.alphas[k - 1]
                for i in range(m):
                    D = pairs[i]
                    if len(D):
                        opp = Opponents.product([None if j == i else tables[j] for j in range(m)])
                        r, nxt = self.sim.local_sampling_batch(h, i, D[:, 0], D[:, 1], opp)
                        self.samples += len(nxt)
                        th = M[i] @ (r + self.V[i][h][nxt])
                    else:
                        th = np.zeros(dims[i])
                    theta[i][k - 1] = th
                    current[i] = (1 - alpha) * current[i] + alpha * th
                    blended[i][k - 1] = current[i]

        for i in range(m):
            fm = self.fmaps[i]
            q = np.einsum("sad,kd->ksa", fm.phi, theta[i])
            v = self.weights @ np.einsum("ksa,ksa->ks", pis[i], q)
            if p.bonus == "tabular":
                A_sum = sum(game.action_counts)
                beta = tabular_bonus(K, H, p.delta, game.num_states, A_sum, p.c_b,
                                     policy_variance(pis[i], q), self.weights)
                self.bonus[i][h - 1] = beta
                v = v + beta
            self.V[i][h - 1] = np.minimum(v, H - h + 1)
            self.theta[i][h - 1] = theta[i]
            self.Q_coef[i][h - 1] = blended[i]
            self.policies[i][h - 1] = pis[i]

    def run(self):
        H, K = self.game.horizon, self.params.K
        for h in range(H, 0, -1):
            self.learn_step(h)
        mix = StepMixturePolicy(np.tile(self.weights, (H, 1)),
                                tuple(np.stack(self.policies[i]) for i in range(self.game.num_agents)))
        report = RunReport(total_samples=self.samples, phase_samples=Counter(learn=self.samples),
                           core_sizes=[[len(c) for c in self.cores]] * H)
        return mix, report


def run_random_access(sim: Simulator, fmaps: Sequence[FeatureMap], params: RAParams):
    """Single backward pass under random access; returns ``(policy, report)``."""
    return RandomAccessLearner(sim, fmaps, params).run()
