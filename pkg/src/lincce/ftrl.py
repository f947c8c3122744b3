"""Lin-Confident-FTRL: core-set based FTRL learning of a coarse correlated equilibrium
under local access, with rollout checks and restart-on-new-state.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .coreset import CoreSet, FeatureMap, c_max, confident_states, explore
from .game import MarkovGame, StepMixturePolicy
from .simulator import AccessProtocol, Opponents, Simulator

log = logging.getLogger(__name__)


class RestartBudgetExceeded(RuntimeError):
    pass


@dataclass
class LearnerParams:
    """Run parameters.  ``lam=None`` means ``1 / (K d H^2)`` per agent."""

    K: int
    N: int
    tau: float = 0.5
    lam: Optional[float] = None
    delta: float = 0.1
    epsilon: float = 0.25
    c_eta: float = 2.0
    gamma_hat: Optional[float] = None
    restart_budget: Optional[int] = None

    def __post_init__(self):
        if self.K < 1 or self.N < 1:
            raise ValueError("K and N must be positive")
        for name in ("tau", "delta", "epsilon", "c_eta"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lam is not None and self.lam <= 0:
            raise ValueError("lam must be positive")
        if self.restart_budget is not None and self.restart_budget < 1:
            raise ValueError("restart_budget must be >= 1")

    def lam_for(self, dim: int, horizon: int) -> float:
        return self.lam if self.lam is not None else 1.0 / (self.K * dim * horizon ** 2)

    @classmethod
    def for_accuracy(cls, epsilon: float, horizon: int, dim: int, num_states: int,
                     max_actions: int, c_K: float = 1.0, c_tau: float = 1.0, **kw) -> "LearnerParams":
        """Parameter regimes keyed on ``min(log S / d, A)`` versus ``epsilon^-2``."""
        H, d = horizon, dim
        richness = min(math.log(num_states) / d, max_actions)
        if richness <= epsilon ** -2:
            tau = 1.0
            K = c_K * H ** 4 * d * epsilon ** -2 * min(math.ceil(math.log(num_states) / d), max_actions)
        else:
            tau = c_tau * epsilon ** 2 / (H ** 4 * d)
            K = c_K * H ** 4 * d * epsilon ** -2
        N = math.ceil(H ** 2 / epsilon ** 2)
        return cls(K=max(1, math.ceil(K)), N=N, tau=tau, epsilon=epsilon, **kw)


def step_size_scale(params: LearnerParams, fmap: FeatureMap, num_states: int) -> float:
    if params.gamma_hat is not None:
        return params.gamma_hat
    d, A = fmap.dim, fmap.num_actions
    if fmap.nu is None:
        return math.sqrt(d)
    return min(1 + math.sqrt(params.tau * math.log(num_states * A / params.delta)) + fmap.nu * math.sqrt(d),
               math.sqrt(d))


def ftrl_step_size(k: int, params: LearnerParams, fmap: FeatureMap, horizon: int, num_states: int) -> float:
    """``eta_k = k sqrt(2 ln A_i / K) / (c_eta H gamma)``."""
    if k < 1:
        raise ValueError("iteration index starts at 1")
    gamma = step_size_scale(params, fmap, num_states)
    return k * math.sqrt(2 * math.log(fmap.num_actions) / params.K) / (params.c_eta * horizon * gamma)


def softmax_policy(values: np.ndarray, eta) -> np.ndarray:
    """``exp(eta * values)`` normalised over the last axis; ``eta`` broadcasts over the rest."""
    z = np.expand_dims(np.asarray(eta, dtype=float), -1) * values
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


def ftrl_policy(theta_bar: np.ndarray, eta: float, fmap: FeatureMap, s: int) -> np.ndarray:
    return softmax_policy(fmap.phi[s] @ theta_bar, eta)


def iterate_policies(fmap: FeatureMap, theta_bar_hist: np.ndarray, etas: np.ndarray) -> np.ndarray:
    """Tables ``pi^k(. | s)`` for ``k = 1..K`` on every state, shape ``(K, S, A)``.

    ``pi^1`` is uniform and ``pi^{k+1} = softmax(etas[k-1] * phi theta_bar^k)``.
    """
    K = theta_bar_hist.shape[0]
    prev = np.vstack([np.zeros((1, theta_bar_hist.shape[1])), theta_bar_hist[:K - 1]])
    eta_prev = np.concatenate([[0.0], etas[:K - 1]])
    values = np.einsum("sad,kd->ksa", fmap.phi, prev)
    return softmax_policy(values, eta_prev[:, None])


@dataclass
class EpochState:
    """Learner state for one restart epoch; reset wholesale on every restart."""

    horizon: int
    num_states: int
    dims: Sequence[int]
    K: int

    def __post_init__(self):
        H, S = self.horizon, self.num_states
        m = len(self.dims)
        # rows 0..H for h = 1..H+1; initialised to the clipping ceiling H - h + 1
        ceiling = (H - np.arange(H + 1)).astype(float)
        self.V = [np.repeat(ceiling[:, None], S, axis=1) for _ in range(m)]
        self.V_dag = [np.repeat(ceiling[:, None], S, axis=1) for _ in range(m)]
        for i in range(m):
            self.V[i][H] = 0.0
            self.V_dag[i][H] = 0.0
        self.theta = [[None] * H for _ in range(m)]
        self.theta_bar = [[None] * H for _ in range(m)]
        self.policies = [[None] * H for _ in range(m)]
        self.theta_dag = [[None] * H for _ in range(m)]
        self.pi_dag = [np.zeros((H, S), dtype=int) for _ in range(m)]


@dataclass
class RunReport:
    total_samples: int = 0
    phase_samples: Counter = field(default_factory=Counter)
    restarts: int = 0
    restart_budget: int = 0
    core_sizes: Optional[List[List[int]]] = None
    progress: List[dict] = field(default_factory=list)


class LinConfidentFTRL:
    """Orchestrates exploration, policy learning, rollout checks and restarts.

    Core sets ``cores[h][i]`` (0-based ``h``) persist across restarts; the
    learner state in :class:`EpochState` does not.
    """

    def __init__(self, sim: Simulator, fmaps: Sequence[FeatureMap], params: LearnerParams):
        game = sim.game
        if sim.protocol is AccessProtocol.ONLINE:
            raise ValueError("Lin-Confident-FTRL needs local (or stronger) access")
        if len(fmaps) != game.num_agents:
            raise ValueError("need one feature map per agent")
        for i, fm in enumerate(fmaps):
            if fm.phi.shape[:2] != (game.num_states, game.action_counts[i]):
                raise ValueError(f"agent {i} features do not match the game")
        self.sim = sim
        self.game = game
        self.fmaps = list(fmaps)
        self.params = params
        H = game.horizon
        self.dims = [fm.dim for fm in fmaps]
        self.cores = [[CoreSet(fm.dim, params.lam_for(fm.dim, H), params.tau) for fm in fmaps]
                      for _ in range(H)]
        self._confident = [None] * H
        self.etas = [np.array([ftrl_step_size(k, params, fm, H, game.num_states)
                               for k in range(1, params.K + 1)]) for fm in fmaps]
        bound = max(c_max(fm.dim, params.tau, params.lam_for(fm.dim, H)) for fm in fmaps)
        self.c_max = bound
        self.restart_budget = (params.restart_budget if params.restart_budget is not None
                               else math.ceil(game.num_agents * H * bound))
        self.samples = Counter()
        self.report = RunReport(restart_budget=self.restart_budget)
        self.state = EpochState(H, game.num_states, self.dims, params.K)

    # -- confident sets -------------------------------------------------
    def confident_mask(self, h: int) -> np.ndarray:
        """Mask of ``C_h`` over states (1-based ``h``; ``C_{H+1}`` is everything)."""
        if h == self.game.horizon + 1:
            return np.ones(self.game.num_states, dtype=bool)
        if self._confident[h - 1] is None:
            mask = np.ones(self.game.num_states, dtype=bool)
            for core, fm in zip(self.cores[h - 1], self.fmaps):
                mask &= confident_states(core, fm)
            self._confident[h - 1] = mask
        return self._confident[h - 1]

    def explore(self, s: int, h: int):
        if h > self.game.horizon:
            return
        added = explore(self.cores[h - 1], self.fmaps, s)
        if any(added):
            self._confident[h - 1] = None

    def _escaped(self, h_next: int):
        mask = self.confident_mask(h_next)
        return lambda nxt: ~mask[nxt]

    def _charge(self, phase: str, n: int):
        self.samples[phase] += n

    # -- subroutines ----------------------------------------------------
    def multi_agent_learning(self, h: int) -> bool:
        game, K, st = self.game, self.params.K, self.state
        m, H = game.num_agents, game.horizon
        cores = self.cores[h - 1]
        pairs = [np.array(c.pairs, dtype=int).reshape(-1, 2) for c in cores]
        M = [c.regression_matrix() for c in cores]
        theta = [np.zeros((K, d)) for d in self.dims]
        theta_bar = [np.zeros((K, d)) for d in self.dims]
        current = [np.zeros(d) for d in self.dims]
        uniform = [np.full((game.num_states, a), 1.0 / a) for a in game.action_counts]
        stop = self._escaped(h + 1)
        mask_next = self.confident_mask(h + 1)

        with self.sim.in_phase("learn"):
            for k in range(1, K + 1):
                if k == 1:
                    tables = uniform
                else:
                    tables = [softmax_policy(self.fmaps[j].phi @ current[j], self.etas[j][k - 2])
                              for j in range(m)]
                for i in range(m):
                    D = pairs[i]
                    if len(D) == 0:
                        continue
                    opp = Opponents.product([None if j == i else tables[j] for j in range(m)])
                    r, nxt = self.sim.local_sampling_batch(h, i, D[:, 0], D[:, 1], opp, stop=stop)
                    self._charge("learn", len(nxt))
                    if len(nxt) and not mask_next[nxt[-1]]:
                        self.explore(int(nxt[-1]), h + 1)
                        self._record("learn", h, k)
                        return False
                    q = r + st.V[i][h][nxt]
                    th = M[i] @ q
                    theta[i][k - 1] = th
                    current[i] = current[i] + (th - current[i]) / k
                    theta_bar[i][k - 1] = current[i]

        for i in range(m):
            fm = self.fmaps[i]
            pis = iterate_policies(fm, theta_bar[i], self.etas[i])
            Qk = np.einsum("sad,kd->ksa", fm.phi, theta[i])
            v = np.einsum("ksa,ksa->s", pis, Qk) / K
            st.V[i][h - 1] = np.minimum(v, H - h + 1)
            st.theta[i][h - 1] = theta[i]
            st.theta_bar[i][h - 1] = theta_bar[i]
            st.policies[i][h - 1] = pis
        return True

    def single_agent_learning(self, h: int, i: int, mix: StepMixturePolicy) -> bool:
        st, K = self.state, self.params.K
        core = self.cores[h - 1][i]
        fm = self.fmaps[i]
        opp = Opponents.from_mixture(mix, h, exclude=i)
        stop = self._escaped(h + 1)
        mask_next = self.confident_mask(h + 1)
        q_mean = np.zeros(len(core))
        with self.sim.in_phase("single_agent"):
            for p, (s_bar, a_bar) in enumerate(core.pairs):
                r, nxt = self.sim.local_sampling_batch(h, i, np.full(K, s_bar), np.full(K, a_bar),
                                                       opp, stop=stop)
                self._charge("single_agent", len(nxt))
                if len(nxt) and not mask_next[nxt[-1]]:
                    self.explore(int(nxt[-1]), h + 1)
                    self._record("single_agent", h, p)
                    return False
                q_mean[p] = np.mean(r + st.V_dag[i][h][nxt])
        theta = core.regression_matrix() @ q_mean if len(core) else np.zeros(fm.dim)
        Q = fm.phi @ theta
        st.theta_dag[i][h - 1] = theta
        st.pi_dag[i][h - 1] = np.argmax(Q, axis=1)
        st.V_dag[i][h - 1] = Q.max(axis=1)
        return True

    def policy_rollout(self, mix: StepMixturePolicy, N: int, phase: str = "rollout") -> bool:
        game = self.game
        with self.sim.in_phase(phase):
            for n in range(N):
                s = game.initial_state
                for h in range(1, game.horizon + 1):
                    _, _, s = self.sim.policy_step(h, s, mix)
                    self._charge(phase, 1)
                    if not self.confident_mask(h + 1)[s]:
                        self.explore(s, h + 1)
                        self._record(phase, h, n)
                        return False
        return True

    # -- orchestration --------------------------------------------------
    def _record(self, phase: str, h: int, where: int):
        self.report.progress.append({
            "restart": self.report.restarts + 1,
            "phase": phase,
            "h": h,
            "at": where,
            "samples": self.sim.ledger.total_queries,
            "core_pairs": sum(len(c) for row in self.cores for c in row),
        })

    def _restart(self):
        self.report.restarts += 1
        if self.report.restarts > self.restart_budget:
            raise RestartBudgetExceeded(
                f"{self.report.restarts} restarts exceed the budget of {self.restart_budget}")
        log.debug("restart %d after %d samples", self.report.restarts, self.sim.ledger.total_queries)
        self.state = EpochState(self.game.horizon, self.game.num_states, self.dims, self.params.K)

    def initialize(self):
        game = self.game
        uniform = StepMixturePolicy(
            np.ones((game.horizon, 1)),
            tuple(np.full((game.horizon, 1, game.num_states, a), 1.0 / a) for a in game.action_counts))
        s = game.initial_state
        with self.sim.in_phase("init"):
            for h in range(1, game.horizon + 1):
                self.explore(s, h)
                _, _, s = self.sim.policy_step(h, s, uniform)
                self._charge("init", 1)

    def output_policy(self) -> StepMixturePolicy:
        H, K = self.game.horizon, self.params.K
        comps = tuple(np.stack(self.state.policies[i]) for i in range(self.game.num_agents))
        return StepMixturePolicy(np.full((H, K), 1.0 / K), comps)

    def best_response_policy(self, i: int) -> np.ndarray:
        return np.eye(self.game.action_counts[i])[self.state.pi_dag[i]]

    def _epoch(self) -> Optional[StepMixturePolicy]:
        H = self.game.horizon
        for h in range(H, 0, -1):
            if not self.multi_agent_learning(h):
                return None
        mix = self.output_policy()
        if not self.policy_rollout(mix, self.params.N, "rollout"):
            return None
        for i in range(self.game.num_agents):
            for h in range(H, 0, -1):
                if not self.single_agent_learning(h, i, mix):
                    return None
        for i in range(self.game.num_agents):
            dev = mix.with_agent_policy(i, self.best_response_policy(i))
            if not self.policy_rollout(dev, self.params.N, "final_rollout"):
                return None
        return mix

    def run(self):
        self.initialize()
        while True:
            mix = self._epoch()
            if mix is not None:
                break
            self._restart()
        rep = self.report
        rep.total_samples = sum(self.samples.values())
        rep.phase_samples = Counter(self.samples)
        rep.core_sizes = [[len(c) for c in row] for row in self.cores]
        return mix, rep


def run_lin_confident_ftrl(sim: Simulator, fmaps: Sequence[FeatureMap], params: LearnerParams):
    """Run the full algorithm under local access; returns ``(policy, report)``."""
    if sim.protocol is not AccessProtocol.LOCAL:
        raise ValueError(f"Lin-Confident-FTRL runs under local access, got {sim.protocol.value}")
    return LinConfidentFTRL(sim, fmaps, params).run()
