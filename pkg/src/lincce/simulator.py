"""Sampling access to a :class:`MarkovGame` under random, local or online access.

Every query owns a fixed block of uniforms derived from ``(seed, query_index)``,
so a run is a pure function of the seed and the order of queries.  Batched
queries keep sequential semantics: a batch is truncated at the first ``stop``
outcome and only the queries up to it are charged to the ledger.
"""

from __future__ import annotations

import csv
import enum
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .game import MarkovGame, StepMixturePolicy

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    z = x + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def counter_uniforms(seed: int, counters) -> np.ndarray:
    """Stateless uniforms in ``[0, 1)`` keyed by ``(seed, counter)``."""
    with np.errstate(over="ignore"):
        key = _splitmix64(np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))[0]
        z = _splitmix64(np.asarray(counters, dtype=np.uint64) ^ key)
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def sample_rows(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw, one per row of ``probs``."""
    cdf = np.cumsum(probs, axis=-1)
    idx = (u[:, None] >= cdf).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


class AccessProtocol(enum.Enum):
    RANDOM = "random"
    LOCAL = "local"
    ONLINE = "online"


class ProtocolViolation(RuntimeError):
    def __init__(self, protocol: AccessProtocol, h: int, s: int):
        super().__init__(f"{protocol.value} access forbids querying state {s} at step {h}")
        self.protocol = protocol
        self.h = h
        self.s = s


@dataclass
class SampleLedger:
    num_states: int
    initial_state: int
    total_queries: int = 0
    phase_counts: Counter = field(default_factory=Counter)
    violation_count: int = 0
    records: Optional[list] = None

    def __post_init__(self):
        self.visited = np.zeros(self.num_states, dtype=bool)
        self.visited[self.initial_state] = True

    @property
    def visited_states(self) -> set:
        return set(np.flatnonzero(self.visited).tolist())

    def dump_csv(self, path):
        if self.records is None:
            raise RuntimeError("ledger was created without record=True")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["query_index", "phase", "h", "s", "joint_a", "s_next", "protocol_ok"])
            for row in self.records:
                w.writerow(row)


@dataclass
class Opponents:
    """Sampling rule for the other agents: a mixture over ``K`` product components.

    ``tables[j]`` has shape ``(K, S, A_j)`` (``None`` for the sampling agent).
    A plain product policy is the case ``K = 1``.
    """

    weights: np.ndarray
    tables: list

    @classmethod
    def product(cls, tables: Sequence[Optional[np.ndarray]]) -> "Opponents":
        return cls(np.ones(1), [None if t is None else np.asarray(t)[None] for t in tables])

    @classmethod
    def from_mixture(cls, mix: StepMixturePolicy, h: int, exclude: Optional[int] = None) -> "Opponents":
        tabs = [None if j == exclude else c[h - 1] for j, c in enumerate(mix.components)]
        return cls(mix.weights[h - 1], tabs)

    def sample(self, states: np.ndarray, u: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Fill the columns of ``actions`` owned by the opponents; ``u`` are per-query lanes."""
        n = len(states)
        K = len(self.weights)
        if K == 1:
            k = np.zeros(n, dtype=int)
        else:
            k = sample_rows(np.broadcast_to(self.weights, (n, K)), u[:, 1])
        for j, tab in enumerate(self.tables):
            if tab is not None:
                actions[:, j] = sample_rows(tab[k, states], u[:, 2 + j])
        return actions


class Simulator:
    def __init__(self, game: MarkovGame, protocol: AccessProtocol, seed: int = 0, record: bool = False):
        self.game = game
        self.protocol = AccessProtocol(protocol)
        self.seed = int(seed)
        self.lanes = game.num_agents + 2
        self.ledger = SampleLedger(game.num_states, game.initial_state,
                                   records=[] if record else None)
        self.phase = "default"
        self._cursor = game.initial_state

    @contextmanager
    def in_phase(self, name: str):
        old, self.phase = self.phase, name
        try:
            yield
        finally:
            self.phase = old

    @property
    def next_index(self) -> int:
        return self.ledger.total_queries

    def uniforms(self, count: int) -> np.ndarray:
        """Uniform lanes ``(count, lanes)`` owned by the next ``count`` query indices."""
        start = self.next_index * self.lanes
        ctr = np.arange(start, start + count * self.lanes, dtype=np.uint64)
        return counter_uniforms(self.seed, ctr).reshape(count, self.lanes)

    def reset_cursor(self) -> int:
        if self.protocol is not AccessProtocol.ONLINE:
            raise RuntimeError(f"reset is only defined under online access, not {self.protocol.value}")
        self._cursor = self.game.initial_state
        return self._cursor

    def _first_illegal(self, h: int, states: np.ndarray, nxt: np.ndarray) -> int:
        n = len(states)
        if self.protocol is AccessProtocol.RANDOM:
            return n
        if self.protocol is AccessProtocol.ONLINE:
            prev = np.concatenate([[self._cursor], nxt[:-1]])
            bad = np.flatnonzero(states != prev)
            return int(bad[0]) if len(bad) else n
        # local: visited before the batch, or produced by an earlier query in it
        first_seen = np.full(self.game.num_states, n + 1)
        uniq, idx = np.unique(nxt, return_index=True)
        first_seen[uniq] = idx
        legal = self.ledger.visited[states] | (first_seen[states] < np.arange(n))
        bad = np.flatnonzero(~legal)
        return int(bad[0]) if len(bad) else n

    def query_batch(self, h: int, states, joint_actions, stop=None, u: Optional[np.ndarray] = None):
        """Issue queries in order at step ``h``.

        ``joint_actions`` is an ``(n, m)`` integer array.  ``stop`` maps the array of
        next states to a boolean mask; the batch ends after the first ``True``.
        Returns ``(rewards (n', m), next_states (n',))`` for the committed prefix.
        """
        game = self.game
        states = np.asarray(states, dtype=int)
        acts = np.asarray(joint_actions, dtype=int).reshape(len(states), game.num_agents)
        n = len(states)
        if not 1 <= h <= game.horizon:
            raise IndexError(f"step h={h} outside 1..{game.horizon}")
        if u is None:
            u = self.uniforms(n)
        j = game.flatten_joint(acts) if n else np.zeros(0, dtype=int)
        nxt = sample_rows(game.P[h - 1, states, j], u[:, 0]) if n else np.zeros(0, dtype=int)

        n_ok = self._first_illegal(h, states, nxt)
        n_commit = n_ok
        if stop is not None and n_ok:
            hit = np.flatnonzero(np.asarray(stop(nxt[:n_ok])))
            if len(hit):
                n_commit = int(hit[0]) + 1

        rewards = game.r[h - 1][:, states[:n_commit], j[:n_commit]].T
        self._commit(h, states[:n_commit], acts[:n_commit], nxt[:n_commit])
        if n_commit == n_ok and n_ok < n:
            self.ledger.violation_count += 1
            if self.ledger.records is not None:
                self.ledger.records.append([self.next_index, self.phase, h, int(states[n_ok]),
                                            ";".join(map(str, acts[n_ok])), -1, False])
            raise ProtocolViolation(self.protocol, h, int(states[n_ok]))
        return rewards, nxt[:n_commit]

    def _commit(self, h, states, acts, nxt):
        led = self.ledger
        n = len(states)
        if led.records is not None:
            for q in range(n):
                led.records.append([led.total_queries + q, self.phase, h, int(states[q]),
                                    ";".join(map(str, acts[q])), int(nxt[q]), True])
        if n:
            led.total_queries += n
            led.phase_counts[self.phase] += n
        led.visited[nxt] = True
        if n and self.protocol is AccessProtocol.ONLINE:
            self._cursor = int(nxt[-1])

    def query(self, h: int, s: int, joint_action):
        """Single query; returns ``(rewards (m,), next_state)``."""
        r, nxt = self.query_batch(h, [s], np.asarray(joint_action)[None])
        return r[0], int(nxt[0])

    def local_sampling_batch(self, h: int, i: int, states, actions, opponents: Opponents, stop=None):
        """Agent ``i`` plays ``actions`` at ``states``; the others are drawn from ``opponents``.

        Returns agent ``i``'s rewards and the next states for the committed prefix.
        """
        states = np.asarray(states, dtype=int)
        n = len(states)
        u = self.uniforms(n)
        joint = np.zeros((n, self.game.num_agents), dtype=int)
        joint[:, i] = actions
        opponents.sample(states, u, joint)
        r, nxt = self.query_batch(h, states, joint, stop=stop, u=u)
        return r[:, i], nxt

    def local_sampling(self, h: int, i: int, s: int, a: int, opponents: Opponents):
        r, nxt = self.local_sampling_batch(h, i, [s], [a], opponents)
        return float(r[0]), int(nxt[0])

    def policy_step(self, h: int, s: int, mix: StepMixturePolicy):
        """Draw a joint action from the per-step correlation device of ``mix`` and query."""
        u = self.uniforms(1)
        joint = np.zeros((1, self.game.num_agents), dtype=int)
        Opponents.from_mixture(mix, h).sample(np.array([s]), u, joint)
        r, nxt = self.query_batch(h, [s], joint, u=u)
        return joint[0], r[0], int(nxt[0])
