"""Finite-horizon general-sum tabular Markov games and the policies played on them.

Steps are 1-based in the public API (``h`` in ``1..H``) and 0-based in the
stored arrays.  Joint actions are flattened row-major over ``(a_1, ..., a_m)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence

import numpy as np

PROB_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class MarkovGame:
    """Dense tabular game.

    ``P`` has shape ``(H, S, J, S)`` and ``r`` has shape ``(H, m, S, J)`` where
    ``J = prod(A)`` is the number of joint actions.
    """

    num_states: int
    horizon: int
    action_counts: tuple
    P: np.ndarray
    r: np.ndarray
    initial_state: int = 0

    def __post_init__(self):
        object.__setattr__(self, "action_counts", tuple(int(a) for a in self.action_counts))
        P = np.array(self.P, dtype=float)
        r = np.array(self.r, dtype=float)
        P.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "r", r)
        expected_P = (self.horizon, self.num_states, self.num_joint, self.num_states)
        expected_r = (self.horizon, self.num_agents, self.num_states, self.num_joint)
        if P.shape != expected_P:
            raise ValueError(f"transition tensor has shape {P.shape}, expected {expected_P}")
        if r.shape != expected_r:
            raise ValueError(f"reward tensor has shape {r.shape}, expected {expected_r}")

    @property
    def num_agents(self) -> int:
        return len(self.action_counts)

    @property
    def num_joint(self) -> int:
        return int(np.prod(self.action_counts))

    # shorthands used throughout the numerics
    S = property(lambda self: self.num_states)
    H = property(lambda self: self.horizon)
    m = property(lambda self: self.num_agents)
    A = property(lambda self: self.action_counts)

    def flatten_joint(self, joint_action) -> np.ndarray:
        """Row-major index of a joint action (or an ``(n, m)`` array of them)."""
        ja = np.asarray(joint_action)
        return np.ravel_multi_index(tuple(np.moveaxis(ja, -1, 0)), self.action_counts)

    def unflatten_joint(self, index) -> np.ndarray:
        return np.stack(np.unravel_index(index, self.action_counts), axis=-1)

    def to_dict(self) -> dict:
        return {
            "S": self.num_states,
            "m": self.num_agents,
            "H": self.horizon,
            "A": list(self.action_counts),
            "s1": self.initial_state,
            "P": self.P.tolist(),
            "r": self.r.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MarkovGame":
        A = tuple(data["A"])
        if len(A) != data["m"]:
            raise ValueError(f"m={data['m']} but A lists {len(A)} agents")
        return cls(
            num_states=int(data["S"]),
            horizon=int(data["H"]),
            action_counts=A,
            P=np.asarray(data["P"], dtype=float),
            r=np.asarray(data["r"], dtype=float),
            initial_state=int(data.get("s1", 0)),
        )


@dataclass(frozen=True)
class TrajectoryStep:
    h: int
    state: int
    joint_action: tuple
    rewards: tuple
    next_state: int


@dataclass
class Trajectory:
    steps: List[TrajectoryStep] = field(default_factory=list)

    def append(self, step: TrajectoryStep):
        if self.steps and step.h <= self.steps[-1].h:
            raise ValueError("trajectory step indices must increase")
        if not self.steps and step.h != 1:
            raise ValueError("trajectory must start at step 1")
        self.steps.append(step)

    def __len__(self):
        return len(self.steps)

    def states(self) -> list:
        return [st.state for st in self.steps]


def validate_game(game: MarkovGame) -> List[str]:
    """Return human-readable descriptions of every violated invariant."""
    problems = []
    if game.horizon < 1:
        problems.append(f"horizon H={game.horizon} must be >= 1")
    if game.num_agents < 1:
        problems.append("game needs at least one agent")
    for i, a in enumerate(game.action_counts):
        if a < 1:
            problems.append(f"agent {i} has A_i={a} < 1")
    if not 0 <= game.initial_state < game.num_states:
        problems.append(f"initial state {game.initial_state} outside [0, {game.num_states})")

    neg = np.argwhere(game.P < 0)
    for h, s, j, s2 in neg[:10]:
        problems.append(f"negative transition P[h={h + 1}, s={s}, a={j}, s'={s2}]={game.P[h, s, j, s2]}")
    sums = game.P.sum(axis=-1)
    bad = np.argwhere(np.abs(sums - 1.0) > PROB_TOL)
    for h, s, j in bad[:10]:
        problems.append(f"transition row (h={h + 1}, s={s}, a={j}) sums to {sums[h, s, j]:.12g}")
    if len(bad) > 10:
        problems.append(f"... and {len(bad) - 10} more transition rows")

    out = np.argwhere((game.r < 0) | (game.r > 1))
    for h, i, s, j in out[:10]:
        problems.append(f"reward r[h={h + 1}, i={i}, s={s}, a={j}]={game.r[h, i, s, j]} outside [0, 1]")
    if len(out) > 10:
        problems.append(f"... and {len(out) - 10} more reward entries")
    return problems


def _check_simplex(arr: np.ndarray, what: str):
    if np.any(arr < 0):
        raise ValueError(f"{what} has negative probabilities")
    if np.any(np.abs(arr.sum(axis=-1) - 1.0) > PROB_TOL):
        raise ValueError(f"{what} rows do not sum to 1")


@dataclass(frozen=True, eq=False)
class ProductPolicy:
    """Markov product policy: ``probs[i]`` has shape ``(H, S, A_i)``."""

    probs: tuple

    def __post_init__(self):
        arrs = []
        for i, p in enumerate(self.probs):
            p = np.array(p, dtype=float)
            _check_simplex(p, f"agent {i} policy")
            p.setflags(write=False)
            arrs.append(p)
        object.__setattr__(self, "probs", tuple(arrs))

    def as_mixture(self) -> "StepMixturePolicy":
        H = self.probs[0].shape[0]
        return StepMixturePolicy(np.ones((H, 1)), tuple(p[:, None] for p in self.probs))


@dataclass(frozen=True, eq=False)
class StepMixturePolicy:
    """Per-step mixture of product policies (a per-step correlation device).

    ``weights`` has shape ``(H, K)``; ``components[i]`` has shape ``(H, K, S, A_i)``.
    At every step a fresh component index ``k ~ weights[h]`` is drawn and each
    agent then samples from its own slice of component ``k``.
    """

    weights: np.ndarray
    components: tuple

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.ndim != 2 or w.shape[1] < 1:
            raise ValueError("weights must have shape (H, K) with K >= 1")
        _check_simplex(w, "mixture weights")
        comps = []
        for i, c in enumerate(self.components):
            c = np.array(c, dtype=float)
            if c.shape[:2] != w.shape:
                raise ValueError(f"agent {i} components have shape {c.shape}, weights {w.shape}")
            _check_simplex(c, f"agent {i} component policy")
            c.setflags(write=False)
            comps.append(c)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "components", tuple(comps))

    @property
    def horizon(self) -> int:
        return self.weights.shape[0]

    @property
    def num_components(self) -> int:
        return self.weights.shape[1]

    @property
    def num_states(self) -> int:
        return self.components[0].shape[2]

    @property
    def action_counts(self) -> tuple:
        return tuple(c.shape[3] for c in self.components)

    def with_agent_policy(self, i: int, probs: np.ndarray) -> "StepMixturePolicy":
        """Replace agent ``i`` by the independent Markov policy ``probs`` (``(H, S, A_i)``).

        The result is ``probs x (mixture marginal of the others)`` at every step.
        """
        comps = list(self.components)
        comps[i] = np.broadcast_to(np.asarray(probs, dtype=float)[:, None], comps[i].shape).copy()
        return StepMixturePolicy(self.weights, tuple(comps))

    def agent_marginal(self, h: int, s: int, i: int) -> np.ndarray:
        _check_index(self, h, s, i)
        return self.weights[h - 1] @ self.components[i][h - 1, :, s]

    def to_dict(self) -> dict:
        return {
            "H": self.horizon,
            "K": self.num_components,
            "weights": self.weights.tolist(),
            "components": [c.tolist() for c in self.components],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StepMixturePolicy":
        return cls(np.asarray(data["weights"], dtype=float),
                   tuple(np.asarray(c, dtype=float) for c in data["components"]))


def uniform_policy(game: MarkovGame) -> ProductPolicy:
    H, S = game.horizon, game.num_states
    return ProductPolicy(tuple(np.full((H, S, a), 1.0 / a) for a in game.action_counts))


def _check_index(mix: StepMixturePolicy, h: int, s: int, i: int = 0):
    if not 1 <= h <= mix.horizon:
        raise IndexError(f"step h={h} outside 1..{mix.horizon}")
    if not 0 <= s < mix.num_states:
        raise IndexError(f"state s={s} outside 0..{mix.num_states - 1}")
    if not 0 <= i < len(mix.components):
        raise IndexError(f"agent i={i} outside 0..{len(mix.components) - 1}")


def _weighted_product(weights: np.ndarray, factors: Sequence[np.ndarray]) -> np.ndarray:
    """``sum_k w_k prod_j f_j[k]`` flattened row-major; each factor is ``(K, A_j)``."""
    joint = weights
    for f in factors:
        joint = (joint[..., None] * f.reshape(f.shape[0], *([1] * (joint.ndim - 1)), f.shape[1]))
    return joint.sum(axis=0).ravel()


def joint_action_distribution(mix: StepMixturePolicy, h: int, s: int) -> np.ndarray:
    """Distribution over flattened joint actions at ``(h, s)``."""
    _check_index(mix, h, s)
    w = mix.weights[h - 1]
    return _weighted_product(w, [c[h - 1, :, s] for c in mix.components])


def opponent_marginal(mix: StepMixturePolicy, h: int, s: int, i: int) -> np.ndarray:
    """Distribution over the others' joint action ``a_{-i}`` (row-major, agent ``i`` removed).

    Not a product distribution in general.
    """
    _check_index(mix, h, s, i)
    w = mix.weights[h - 1]
    others = [c[h - 1, :, s] for j, c in enumerate(mix.components) if j != i]
    if not others:
        return np.ones(1)
    return _weighted_product(w, others)


def load_game(path) -> MarkovGame:
    return MarkovGame.from_dict(json.loads(Path(path).read_text()))


def save_game(game: MarkovGame, path):
    Path(path).write_text(json.dumps(game.to_dict()))


def load_policy(path) -> StepMixturePolicy:
    return StepMixturePolicy.from_dict(json.loads(Path(path).read_text()))


def save_policy(mix: StepMixturePolicy, path):
    Path(path).write_text(json.dumps(mix.to_dict()))
