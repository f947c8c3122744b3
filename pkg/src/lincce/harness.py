"""Experiment plumbing: JSON configs, game generators, seeded runs and sweeps."""

from __future__ import annotations

import copy
import csv
import json
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .coreset import FeatureMap, load_features, one_hot_features
from .ftrl import LearnerParams, run_lin_confident_ftrl
from .game import MarkovGame, validate_game
from .oracle import cce_gap
from .random_access import RAParams, harmonic_rates, rescaled_rates, run_random_access
from .simulator import AccessProtocol, Simulator

log = logging.getLogger(__name__)

PHASES = ("init", "learn", "rollout", "single_agent", "final_rollout")
ALGORITHMS = {"lin_confident_ftrl": AccessProtocol.LOCAL, "random_access": AccessProtocol.RANDOM}
SWEEP_PARAMS = ("K", "N", "tau", "lambda", "seeds")


class ConfigError(ValueError):
    pass


class InvariantViolation(RuntimeError):
    pass


# -- generators ---------------------------------------------------------

def generate_random_tabular(S: int, m: int, A, H: int, seed: int = 0) -> MarkovGame:
    """Positive random transition rows normalised to sum 1, rewards uniform on [0, 1]."""
    A = (A,) * m if np.isscalar(A) else tuple(A)
    if S < 1 or m < 1 or H < 1 or len(A) != m or min(A) < 1:
        raise ConfigError("random_tabular needs positive S, m, H and one positive A_i per agent")
    rng = np.random.default_rng(seed)
    J = int(np.prod(A))
    P = rng.random((H, S, J, S)) + 1e-3
    P /= P.sum(axis=-1, keepdims=True)
    r = rng.random((H, m, S, J))
    return MarkovGame(S, H, A, P, r)


def matrix_game(payoffs) -> MarkovGame:
    """One-state, one-step game; ``payoffs[i]`` is agent ``i``'s ``A_1 x ... x A_m`` table."""
    pay = np.asarray(payoffs, dtype=float)
    m = pay.shape[0]
    if pay.ndim != m + 1:
        raise ConfigError(f"payoffs for {m} agents need {m} action axes, got shape {pay.shape[1:]}")
    A = pay.shape[1:]
    J = int(np.prod(A))
    P = np.ones((1, 1, J, 1))
    r = pay.reshape(1, m, 1, J)
    return MarkovGame(1, 1, A, P, r)


def matching_pennies() -> MarkovGame:
    win = np.array([[1.0, 0.0], [0.0, 1.0]])
    return matrix_game([win, 1.0 - win])


def chain(S: int, H: int, A=1, m: int = 1) -> MarkovGame:
    """Line of states; a joint action of all zeros moves right, anything else stays.

    Every agent earns 1 per step spent in the last state.
    """
    if S < 1 or H < 1 or m < 1:
        raise ConfigError("chain needs positive S, H and m")
    A = (A,) * m if np.isscalar(A) else tuple(A)
    J = int(np.prod(A))
    P = np.zeros((H, S, J, S))
    for s in range(S):
        P[:, s, :, s] = 1.0
        P[:, s, 0, s] = 0.0
        P[:, s, 0, min(s + 1, S - 1)] = 1.0
    r = np.zeros((H, m, S, J))
    r[:, :, S - 1, :] = 1.0
    return MarkovGame(S, H, A, P, r)


GENERATORS = {"random_tabular", "matrix_game", "matching_pennies", "chain"}


def generate(spec: dict, seed: int = 0) -> MarkovGame:
    kind = spec.get("generator") or spec.get("kind")
    try:
        if kind == "random_tabular":
            return generate_random_tabular(spec["S"], spec["m"], spec["A"], spec["H"], spec.get("seed", seed))
        if kind == "matrix_game":
            return matrix_game(spec["payoffs"])
        if kind == "matching_pennies":
            return matching_pennies()
        if kind == "chain":
            return chain(spec["S"], spec["H"], spec.get("A", 1), spec.get("m", 1))
    except KeyError as exc:
        raise ConfigError(f"generator {kind!r} is missing field {exc}") from None
    raise ConfigError(f"unknown generator {kind!r}; choose from {sorted(GENERATORS)}")


# -- config -------------------------------------------------------------

@dataclass
class ExperimentConfig:
    """``game`` is ``{"generator": ..}``, ``{"file": ..}`` or ``{"inline": <game json>}``.

    A random generator without its own ``seed`` draws a fresh game per run seed.
    """

    game: dict
    algorithm: str = "lin_confident_ftrl"
    features: dict = field(default_factory=lambda: {"kind": "one_hot"})
    params: dict = field(default_factory=dict)
    seeds: List[int] = field(default_factory=lambda: [0])
    protocol: Optional[str] = None
    outputs: dict = field(default_factory=dict)
    base_dir: Path = field(default=Path("."), repr=False)

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; choose from {sorted(ALGORITHMS)}")
        if self.protocol is not None:
            try:
                proto = AccessProtocol(self.protocol)
            except ValueError:
                raise ConfigError(f"unknown protocol {self.protocol!r}") from None
            if proto is not ALGORITHMS[self.algorithm]:
                raise ConfigError(f"{self.algorithm} must run under {ALGORITHMS[self.algorithm].value} "
                                  f"access, not {proto.value}")
        if not isinstance(self.game, dict) or not ({"generator", "file", "inline"} & set(self.game)):
            raise ConfigError("game must give one of 'generator', 'file' or 'inline'")
        if "file" in self.game and not self._path(self.game["file"]).exists():
            raise ConfigError(f"game file {self.game['file']} does not exist")
        if "file" in self.features and not self._path(self.features["file"]).exists():
            raise ConfigError(f"feature file {self.features['file']} does not exist")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        self.seeds = [int(s) for s in self.seeds]
        self.learner_params()   # validate early

    def _path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @classmethod
    def from_dict(cls, data: dict, base_dir=".") -> "ExperimentConfig":
        known = {"game", "algorithm", "features", "params", "seeds", "protocol", "outputs"}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        if "game" not in data:
            raise ConfigError("config needs a 'game' entry")
        return cls(**data, base_dir=Path(base_dir))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        return cls.from_dict(data, base_dir=path.parent)

    def to_dict(self) -> dict:
        return {"game": self.game, "algorithm": self.algorithm, "features": self.features,
                "params": self.params, "seeds": self.seeds, "protocol": self.protocol,
                "outputs": self.outputs}

    def with_param(self, name: str, value) -> "ExperimentConfig":
        data = copy.deepcopy(self.to_dict())
        if name == "seeds":
            data["seeds"] = [int(value)]
        else:
            data["params"][name] = value
        return ExperimentConfig(**data, base_dir=self.base_dir)

    # builders
    def build_game(self, seed: int) -> MarkovGame:
        g = self.game
        try:
            if "file" in g:
                game = MarkovGame.from_dict(json.loads(self._path(g["file"]).read_text()))
            elif "inline" in g:
                game = MarkovGame.from_dict(g["inline"])
            else:
                game = generate(g, seed)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed game: {exc}") from None
        problems = validate_game(game)
        if problems:
            raise ConfigError("invalid game: " + "; ".join(problems))
        return game

    def build_features(self, game: MarkovGame) -> List[FeatureMap]:
        f = self.features
        try:
            if f.get("kind") == "one_hot":
                return one_hot_features(game.action_counts, game.num_states)
            spec = json.loads(self._path(f["file"]).read_text()) if "file" in f else f
            return load_features(spec, game.action_counts, game.num_states)
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad features: {exc}") from None

    def learner_params(self):
        p = dict(self.params)
        K = int(p.pop("K", 1))
        lam = p.pop("lambda", None)
        try:
            if self.algorithm == "lin_confident_ftrl":
                N = int(p.pop("N", 1))
                allowed = {"tau", "delta", "epsilon", "c_eta", "gamma_hat", "restart_budget"}
                self._reject(p, allowed)
                return LearnerParams(K=K, N=N, lam=lam, **p)
            p.pop("N", None)
            schedule = p.pop("alpha", "harmonic")
            c_alpha = p.pop("c_alpha", 1.0)
            if schedule == "harmonic":
                alphas = harmonic_rates(K)
            elif schedule == "rescaled":
                alphas = rescaled_rates(K, c_alpha)
            else:
                raise ConfigError(f"unknown alpha schedule {schedule!r}")
            self._reject(p, {"tau", "delta", "c_eta", "bonus", "c_b"})
            return RAParams(K=K, lam=lam, alphas=alphas, **p)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad params: {exc}") from None

    @staticmethod
    def _reject(p: dict, allowed: set):
        extra = set(p) - allowed
        if extra:
            raise ConfigError(f"unknown params {sorted(extra)}")


# -- runs -----------------------------------------------------------------

@dataclass
class RunRecord:
    seed: int
    algorithm: str
    K: int
    N: int
    tau: float
    lam: float
    total_samples: int
    phase_samples: dict
    restarts: int
    gaps: List[float]
    wall_ms: float = 0.0
    violation_count: int = 0

    @property
    def max_gap(self) -> float:
        return max(self.gaps)

    def header(self) -> List[str]:
        return csv_columns(len(self.gaps))

    def row(self) -> list:
        return ([self.seed, self.algorithm, self.K, self.N, self.tau, self.lam, self.total_samples]
                + [self.phase_samples.get(p, 0) for p in PHASES]
                + [self.restarts] + list(self.gaps) + [self.max_gap, round(self.wall_ms, 3)])


def csv_columns(m: int) -> List[str]:
    return (["seed", "algorithm", "K", "N", "tau", "lambda", "total_samples"]
            + [f"{p}_samples" for p in PHASES] + ["restarts"]
            + [f"gap_agent_{i}" for i in range(m)] + ["max_gap", "wall_ms"])


def write_records(records: List[RunRecord], path):
    m = len(records[0].gaps) if records else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(csv_columns(m))
        for rec in records:
            w.writerow(rec.row())


def run_experiment(config: ExperimentConfig, seed: int, return_policy: bool = False):
    """Build everything for ``seed``, run the configured learner and score its output."""
    game = config.build_game(seed)
    fmaps = config.build_features(game)
    params = config.learner_params()
    sim = Simulator(game, ALGORITHMS[config.algorithm], seed=seed)
    start = time.perf_counter()
    if config.algorithm == "lin_confident_ftrl":
        mix, report = run_lin_confident_ftrl(sim, fmaps, params)
        N = params.N
    else:
        mix, report = run_random_access(sim, fmaps, params)
        N = 0
    wall = (time.perf_counter() - start) * 1000
    if report.total_samples != sim.ledger.total_queries:
        raise InvariantViolation(f"learner counted {report.total_samples} samples, "
                                 f"simulator ledger has {sim.ledger.total_queries}")
    if sim.ledger.violation_count:
        raise InvariantViolation(f"{sim.ledger.violation_count} protocol violations")
    gap = cce_gap(game, mix)
    lam = params.lam_for(max(fm.dim for fm in fmaps), game.horizon)
    rec = RunRecord(seed=seed, algorithm=config.algorithm, K=params.K, N=N, tau=params.tau, lam=lam,
                    total_samples=report.total_samples, phase_samples=dict(report.phase_samples),
                    restarts=report.restarts, gaps=gap.gaps, wall_ms=wall,
                    violation_count=sim.ledger.violation_count)
    log.info("seed %d: max_gap=%.4f samples=%d restarts=%d", seed, rec.max_gap,
             rec.total_samples, rec.restarts)
    return (rec, mix) if return_policy else rec


def run_all(config: ExperimentConfig) -> List[RunRecord]:
    return [run_experiment(config, s) for s in sorted(config.seeds)]


@dataclass
class SweepResult:
    param: str
    records: List[tuple]    # (value, RunRecord)

    def summary(self) -> List[dict]:
        out = []
        for value in dict.fromkeys(v for v, _ in self.records):
            recs = [r for v, r in self.records if v == value]
            out.append({
                "param": self.param,
                "value": value,
                "runs": len(recs),
                "median_max_gap": statistics.median(r.max_gap for r in recs),
                "median_total_samples": statistics.median(r.total_samples for r in recs),
                "median_restarts": statistics.median(r.restarts for r in recs),
                "max_gap_stdev": statistics.stdev([r.max_gap for r in recs]) if len(recs) > 1 else 0.0,
            })
        return out


def parse_sweep_value(param: str, raw):
    if param in ("K", "N", "seeds"):
        return int(raw)
    return float(raw)


def sweep(config: ExperimentConfig, param: str, values) -> SweepResult:
    """One run per (value, seed); medians per value via :meth:`SweepResult.summary`."""
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"cannot sweep {param!r}; choose from {list(SWEEP_PARAMS)}")
    records = []
    for raw in values:
        value = parse_sweep_value(param, raw)
        cfg = config.with_param(param, value)
        for seed in sorted(cfg.seeds):
            records.append((value, run_experiment(cfg, seed)))
    return SweepResult(param, records)


def write_summary(result: SweepResult, path):
    rows = result.summary()
    cols = ["param", "value", "runs", "median_max_gap", "median_total_samples", "median_restarts",
            "max_gap_stdev"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)
