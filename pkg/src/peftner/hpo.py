"""Tree-structured Parzen Estimator search with deterministic studies and an
append-only, resumable trial journal."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import make_rng

N_STARTUP = 10
GAMMA = 0.25
N_CANDIDATES = 24


@dataclass
class Continuous:
    lo: float
    hi: float
    log: bool = False

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"continuous dimension needs lo < hi, got [{self.lo}, {self.hi}]")
        if self.log and self.lo <= 0:
            raise ValueError("log-scale dimension needs a positive lower bound")

    def to_unit(self, x: float) -> float:
        if self.log:
            return (math.log(x) - math.log(self.lo)) / (math.log(self.hi) - math.log(self.lo))
        return (x - self.lo) / (self.hi - self.lo)

    def from_unit(self, u: float) -> float:
        u = min(1.0, max(0.0, u))
        if self.log:
            return math.exp(math.log(self.lo) + u * (math.log(self.hi) - math.log(self.lo)))
        return self.lo + u * (self.hi - self.lo)

    def sample(self, rng: np.random.Generator) -> float:
        return self.from_unit(rng.random())


@dataclass
class Categorical:
    choices: tuple

    def __post_init__(self):
        self.choices = tuple(self.choices)
        if not self.choices:
            raise ValueError("categorical dimension needs at least one choice")
        if len(set(self.choices)) != len(self.choices):
            raise ValueError("categorical choices must be distinct")

    def sample(self, rng: np.random.Generator):
        return self.choices[rng.integers(0, len(self.choices))]


@dataclass
class SearchSpace:
    dimensions: dict[str, Continuous | Categorical]

    def sample(self, rng: np.random.Generator) -> dict:
        return {name: dim.sample(rng) for name, dim in self.dimensions.items()}

    def contains(self, config: dict) -> bool:
        for name, dim in self.dimensions.items():
            v = config[name]
            if isinstance(dim, Continuous):
                if not dim.lo <= v <= dim.hi:
                    return False
            elif v not in dim.choices:
                return False
        return True


def default_space() -> SearchSpace:
    """The fine-tuning search space: lr log-uniform [1e-5, 5e-5], batch size
    {8, 16, 32}, weight decay {0, 0.01}, warmup ratio {0.06, 0.10}."""
    return SearchSpace({
        "lr": Continuous(1e-5, 5e-5, log=True),
        "batch_size": Categorical((8, 16, 32)),
        "weight_decay": Categorical((0.0, 0.01)),
        "warmup_ratio": Categorical((0.06, 0.10)),
    })


@dataclass
class Trial:
    trial_id: int
    config: dict
    value: float | None
    status: str  # complete | failed
    error: str | None = None


def _kde_bandwidth(points: np.ndarray) -> float:
    # Scott's rule in the unit interval, with a magic-clip floor so a tight
    # cluster still proposes nearby-but-new candidates
    m = len(points)
    scott = points.std() * m ** (-0.2) if m > 1 else 0.0
    floor = 1.0 / min(100.0, 1.0 + m)
    return max(scott, floor)


def _kde_logpdf(x: np.ndarray, points: np.ndarray, bw: float) -> np.ndarray:
    """Mixture of Gaussians at `points` plus one uniform prior component."""
    if len(points) == 0:
        return np.zeros(len(x))
    z = (x[:, None] - points[None, :]) / bw
    comp = np.exp(-0.5 * z * z) / (bw * math.sqrt(2 * math.pi))
    pdf = (comp.sum(axis=1) + 1.0) / (len(points) + 1.0)  # uniform(0,1) pdf == 1
    return np.log(np.maximum(pdf, 1e-300))


def _categorical_weights(values: list, choices: tuple) -> np.ndarray:
    counts = np.array([sum(1 for v in values if v == c) for c in choices], dtype=float)
    return (counts + 1.0) / (counts.sum() + len(choices))


def suggest(
    space: SearchSpace,
    history: list[Trial],
    rng: np.random.Generator,
    n_startup: int = N_STARTUP,
    gamma: float = GAMMA,
    n_candidates: int = N_CANDIDATES,
) -> dict:
    """Propose a configuration.

    During startup the space is sampled uniformly. Afterwards the completed
    trials split at the gamma-quantile of the objective into good/bad sets;
    per dimension, candidates drawn from the good-set density l are scored by
    l/g and the best one wins.
    """
    completed = [t for t in history if t.status == "complete" and t.value is not None]
    if len(history) < n_startup or len(completed) < 2:
        return space.sample(rng)

    ranked = sorted(completed, key=lambda t: (-t.value, t.trial_id))
    n_good = max(1, math.ceil(gamma * len(ranked)))
    good, bad = ranked[:n_good], ranked[n_good:]

    config: dict = {}
    for name, dim in space.dimensions.items():
        good_vals = [t.config[name] for t in good]
        bad_vals = [t.config[name] for t in bad]
        if isinstance(dim, Continuous):
            g_pts = np.array([dim.to_unit(v) for v in good_vals])
            b_pts = np.array([dim.to_unit(v) for v in bad_vals])
            bw_g = _kde_bandwidth(g_pts)
            picks = rng.integers(0, len(g_pts) + 1, size=n_candidates)
            draws = np.where(
                picks < len(g_pts),
                g_pts[np.minimum(picks, len(g_pts) - 1)] + bw_g * rng.standard_normal(n_candidates),
                rng.random(n_candidates),
            )
            draws = np.clip(draws, 0.0, 1.0)
            score = _kde_logpdf(draws, g_pts, bw_g) - _kde_logpdf(draws, b_pts, _kde_bandwidth(b_pts) if len(b_pts) else 1.0)
            config[name] = dim.from_unit(float(draws[int(np.argmax(score))]))
        else:
            w_good = _categorical_weights(good_vals, dim.choices)
            w_bad = _categorical_weights(bad_vals, dim.choices)
            cand = rng.choice(len(dim.choices), size=n_candidates, p=w_good)
            score = np.log(w_good[cand]) - np.log(w_bad[cand])
            config[name] = dim.choices[int(cand[int(np.argmax(score))])]
    return config


def append_journal(path: str | Path, trial: Trial) -> None:
    line = json.dumps(
        {"id": trial.trial_id, "config": trial.config, "value": trial.value,
         "status": trial.status, "error": trial.error},
        sort_keys=True,
    )
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(line + "\n")


def read_journal(path: str | Path) -> list[Trial]:
    trials = []
    p = Path(path)
    if not p.exists():
        return trials
    for line in p.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        trials.append(Trial(d["id"], d["config"], d["value"], d["status"], d.get("error")))
    return trials


def run_study(
    objective: Callable[[dict], float],
    space: SearchSpace,
    n_trials: int = 40,
    seed: int = 0,
    journal_path: str | Path | None = None,
) -> tuple[Trial, list[Trial]]:
    """Run (or resume) a deterministic sequential study; best trial wins by value.

    Objective failures are recorded as failed trials and the study continues.
    With a journal path, finished trials are appended one line each and an
    existing journal is picked up where it left off.
    """
    history: list[Trial] = []
    if journal_path is not None:
        history = read_journal(journal_path)
    rng = make_rng(seed)
    # replay the sampler state consumed by already-journaled trials
    for t in history:
        suggest(space, history[: t.trial_id], rng)
    for trial_id in range(len(history), n_trials):
        config = suggest(space, history, rng)
        try:
            value = float(objective(config))
            trial = Trial(trial_id, config, value, "complete")
        except Exception as exc:  # objective failure: record and continue
            trial = Trial(trial_id, config, None, "failed", error=str(exc))
        history.append(trial)
        if journal_path is not None:
            append_journal(journal_path, trial)
    completed = [t for t in history if t.status == "complete"]
    if not completed:
        raise RuntimeError("no trial completed successfully")
    best = max(completed, key=lambda t: (t.value, -t.trial_id))
    return best, history
