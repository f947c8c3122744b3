"""Per-agent features, greedy core-set construction and ridge evaluation on the core set."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

NORM_TOL = 1e-12
RECOMPUTE_EVERY = 64


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """``phi[s, a]`` is a ``d``-vector with Euclidean norm at most 1.

    ``nu`` is a declared misspecification bound (``None`` when unknown); it is
    only ever read, never estimated.
    """

    phi: np.ndarray
    nu: Optional[float] = None

    def __post_init__(self):
        phi = np.array(self.phi, dtype=float)
        if phi.ndim != 3:
            raise ValueError(f"feature table must be (S, A, d), got shape {phi.shape}")
        norms = np.linalg.norm(phi, axis=-1)
        if norms.max(initial=0.0) > 1 + NORM_TOL:
            s, a = np.unravel_index(np.argmax(norms), norms.shape)
            raise ValueError(f"feature phi({s}, {a}) has norm {norms[s, a]:.6g} > 1")
        phi.setflags(write=False)
        object.__setattr__(self, "phi", phi)

    @property
    def dim(self) -> int:
        return self.phi.shape[2]

    @property
    def num_actions(self) -> int:
        return self.phi.shape[1]

    @classmethod
    def one_hot(cls, num_states: int, num_actions: int) -> "FeatureMap":
        d = num_states * num_actions
        return cls(np.eye(d).reshape(num_states, num_actions, d), nu=0.0)

    def to_dict(self) -> dict:
        out = {"d": self.dim, "phi": self.phi.tolist()}
        if self.nu is not None:
            out["nu"] = self.nu
        return out


def one_hot_features(action_counts: Sequence[int], num_states: int) -> List[FeatureMap]:
    return [FeatureMap.one_hot(num_states, a) for a in action_counts]


def load_features(spec, action_counts: Sequence[int], num_states: int) -> List[FeatureMap]:
    """Build per-agent features from ``{"kind": "one_hot"}`` or ``{"d": .., "phi": ..}``.

    ``phi`` may be a single ``[s][a][d]`` table (shared by agents with equal
    action counts) or a list of per-agent tables under ``"per_agent"``.
    """
    if isinstance(spec, (str, Path)):
        spec = json.loads(Path(spec).read_text())
    if spec.get("kind") == "one_hot":
        return one_hot_features(action_counts, num_states)
    nu = spec.get("nu")
    if "per_agent" in spec:
        maps = [FeatureMap(np.asarray(p, dtype=float), nu) for p in spec["per_agent"]]
    else:
        maps = [FeatureMap(np.asarray(spec["phi"], dtype=float), nu) for _ in action_counts]
    for i, (fm, a) in enumerate(zip(maps, action_counts)):
        if fm.phi.shape[:2] != (num_states, a):
            raise ValueError(f"agent {i} features have shape {fm.phi.shape}, need ({num_states}, {a}, d)")
        if "d" in spec and fm.dim != spec["d"]:
            raise ValueError(f"agent {i} features have d={fm.dim}, declared d={spec['d']}")
    return maps


def c_max(d: int, tau: float, lam: float) -> float:
    """Upper bound on the number of pairs greedy exploration can add to one core set."""
    if d < 1 or tau <= 0 or lam <= 0:
        raise ValueError("c_max needs d >= 1, tau > 0, lambda > 0")
    e = math.e
    return e / (e - 1) * (1 + tau) / tau * d * (math.log(1 + 1 / tau) + math.log(1 + 1 / lam))


@dataclass
class CoreSet:
    """Pairs ``D``, the design matrix ``lam*I + sum phi phi^T`` and its inverse."""

    dim: int
    lam: float
    tau: float
    pairs: List[Tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        if self.lam <= 0 or self.tau <= 0:
            raise ValueError("lambda and tau must be positive")
        self.Lambda = self.lam * np.eye(self.dim)
        self.Lambda_inv = np.eye(self.dim) / self.lam
        self._features: List[np.ndarray] = []
        self._since_recompute = 0
        self._cache = None

    def __len__(self):
        return len(self.pairs)

    def copy(self) -> "CoreSet":
        out = CoreSet(self.dim, self.lam, self.tau, list(self.pairs))
        out.Lambda = self.Lambda.copy()
        out.Lambda_inv = self.Lambda_inv.copy()
        out._features = list(self._features)
        out._since_recompute = self._since_recompute
        return out

    def add(self, s: int, a: int, x: np.ndarray):
        """Append ``(s, a)`` with feature ``x`` (rank-one Sherman-Morrison update)."""
        x = np.asarray(x, dtype=float)
        self.pairs.append((int(s), int(a)))
        self._features.append(x)
        self.Lambda += np.outer(x, x)
        Bx = self.Lambda_inv @ x
        self.Lambda_inv -= np.outer(Bx, Bx) / (1.0 + x @ Bx)
        self._since_recompute += 1
        if self._since_recompute >= RECOMPUTE_EVERY:
            self.recompute()
        self._cache = None

    def recompute(self):
        inv = np.linalg.inv(self.Lambda)
        self.Lambda_inv = 0.5 * (inv + inv.T)
        self._since_recompute = 0

    def inverse_error(self) -> float:
        return float(np.abs(self.Lambda @ self.Lambda_inv - np.eye(self.dim)).max())

    @property
    def features(self) -> np.ndarray:
        """``(|D|, d)`` matrix of core features in insertion order."""
        if not self._features:
            return np.zeros((0, self.dim))
        return np.stack(self._features)

    def regression_matrix(self) -> np.ndarray:
        """``Lambda^{-1} Phi_D^T``: maps core targets to ridge coefficients."""
        if self._cache is None:
            self._cache = self.Lambda_inv @ self.features.T
        return self._cache


def quadratic_forms(core: CoreSet, fmap: FeatureMap, states=None) -> np.ndarray:
    """``phi(s, a)^T Lambda^{-1} phi(s, a)`` for the given (or all) states, shape ``(n, A)``."""
    phi = fmap.phi if states is None else fmap.phi[np.atleast_1d(states)]
    return np.einsum("sad,de,sae->sa", phi, core.Lambda_inv, phi)


def uncertainty(core: CoreSet, fmap: FeatureMap, s: int) -> float:
    return float(quadratic_forms(core, fmap, s).max())


def confident_states(core: CoreSet, fmap: FeatureMap) -> np.ndarray:
    """Boolean mask of states whose every action is covered to within ``tau``."""
    return quadratic_forms(core, fmap).max(axis=1) <= core.tau


def add_pair(core: CoreSet, fmap: FeatureMap, s: int, a: int) -> CoreSet:
    core.add(s, a, fmap.phi[s, a])
    return core


def explore(cores: Sequence[CoreSet], fmaps: Sequence[FeatureMap], s: int) -> List[int]:
    """Grow each agent's core set at state ``s`` until ``s`` is confident for all of them.

    Returns the number of pairs added per agent.
    """
    added = []
    for core, fmap in zip(cores, fmaps):
        n = 0
        while True:
            qf = quadratic_forms(core, fmap, s)[0]
            a_hat = int(np.argmax(qf))
            if qf[a_hat] <= core.tau:
                break
            core.add(s, a_hat, fmap.phi[s, a_hat])
            n += 1
        added.append(n)
    return added


def ridge_coefficients(core: CoreSet, targets) -> np.ndarray:
    targets = np.asarray(targets, dtype=float)
    if targets.shape[0] != len(core):
        raise ValueError(f"{targets.shape[0]} targets for a core set of {len(core)} pairs")
    if len(core) == 0:
        return np.zeros(core.dim)
    return core.regression_matrix() @ targets


def ridge_evaluate(core: CoreSet, fmap: FeatureMap, targets, s: int, a: int) -> float:
    """Ridge prediction at ``(s, a)`` from per-pair targets aligned with ``core.pairs``."""
    return float(fmap.phi[s, a] @ ridge_coefficients(core, targets))
