"""Simulation study: known parameter surfaces, replicated fits, KL maps."""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .forecast import predictive_parameters, regular_grid, weibull_kl_arrays
from .model import DEFAULT_N_TRIALS, ObservedData, simulate_observations
from .sampler import SamplerConfig, run_chain
from .seeds import derive_seed

KINDS = ("nonlinear", "linear")
MODELS = ("semiparametric", "parametric")
LAYOUT_SEED = 31064
SUMMARY_COLUMNS = ("scenario", "model", "M", "pixel_x", "pixel_y",
                   "mean_of_medians", "log10_mean_of_medians")


@dataclass(frozen=True)
class Scenario:
    """Study design. Defaults are desk scale; see :meth:`paper_scale`."""

    kind: str = "nonlinear"
    M: int = 31
    T: int = 4
    events_per_cell: int = 134
    replicates: int = 8
    grid_resolution: int = 16

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"scenario kind must be one of {KINDS}, got {self.kind!r}")
        for name in ("M", "T", "events_per_cell", "replicates", "grid_resolution"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def paper_scale(cls, kind: str, M: int = 31) -> "Scenario":
        return cls(kind=kind, M=M, replicates=128, grid_resolution=32)

    def as_dict(self) -> dict:
        return dict(kind=self.kind, M=self.M, T=self.T, events_per_cell=self.events_per_cell,
                    replicates=self.replicates, grid_resolution=self.grid_resolution)


def _coords(s):
    s = np.asarray(s, dtype=float)
    return s[..., 0], s[..., 1]


def _scalar_or_array(x):
    return float(x) if np.ndim(x) == 0 else x


def true_gamma(s, kind: str):
    """True log-shape surface. ``s`` is one point or an ``(n, 2)`` array."""
    s1, s2 = _coords(s)
    if kind == "linear":
        return _scalar_or_array(17 / 25 + 29 / 100 * s1 + 7 / 10 * s2)
    if kind == "nonlinear":
        a = 2.0 * s1 - 1.0
        bump = 2.0 * np.exp(a - np.abs(2.0 * s2 - 1.0)) / (1.0 + np.exp(a)) ** 2
        dip = math.sqrt(8.0 / math.pi) * np.exp(-(2.0 * s2 + 1.0) ** 2) / (1.0 + (2.0 * s1 + 1.0) ** 2)
        return _scalar_or_array(69 / 100 + 52 / 25 * (bump - dip))
    raise ValueError(f"unknown scenario kind {kind!r}")


def true_delta(s, kind: str):
    """True log-scale surface."""
    s1, s2 = _coords(s)
    if kind == "linear":
        return _scalar_or_array(7 / 5 * s1 + 58 / 100 * s2)
    if kind == "nonlinear":
        return _scalar_or_array(np.sin(math.pi * s1) + np.sin(math.pi * s2))
    raise ValueError(f"unknown scenario kind {kind!r}")


def station_layouts(M: int, seed: int = LAYOUT_SEED) -> np.ndarray:
    """Stratified jittered layout of ``M`` points over ``[-1, 1]^2``.

    The square is cut into ``n x n`` cells with ``n = ceil(sqrt(M))``; ``M``
    cells are picked at random and each gets one point jittered around its
    centre by at most 30% of the cell width, so neighbours stay at least 40%
    of a cell width apart.
    """
    if M <= 0:
        raise ValueError("M must be positive")
    rng = np.random.default_rng(seed)
    n = math.ceil(math.sqrt(M))
    width = 2.0 / n
    cells = np.sort(rng.choice(n * n, size=M, replace=False))
    ix, iy = cells % n, cells // n
    centres = np.column_stack([-1.0 + width * (ix + 0.5), -1.0 + width * (iy + 0.5)])
    return centres + rng.uniform(-0.3 * width, 0.3 * width, size=(M, 2))


def generate_replicate(scenario: Scenario, station_layout, seed: int) -> ObservedData:
    points = np.asarray(station_layout, dtype=float)
    rng = np.random.default_rng(seed)
    counts = np.full((points.shape[0], scenario.T), scenario.events_per_cell, dtype=np.int64)
    g = np.repeat(np.asarray(true_gamma(points, scenario.kind)).reshape(-1, 1), scenario.T, axis=1)
    d = np.repeat(np.asarray(true_delta(points, scenario.kind)).reshape(-1, 1), scenario.T, axis=1)
    return simulate_observations(points, np.zeros_like(g), g, d, rng,
                                 n_trials=DEFAULT_N_TRIALS, counts=counts)


def study_config(base: SamplerConfig, seed: int) -> SamplerConfig:
    # counts are fixed constants in the study, so the binomial block is frozen
    return replace(base, seed=seed, update_counts=False)


def fit_and_score(data: ObservedData, model: str, scenario: Scenario, config: SamplerConfig,
                  seed: int) -> np.ndarray:
    """Per-pixel posterior median of KL(truth || predictive Weibull)."""
    result = run_chain(model, data, study_config(config, derive_seed(seed, 0)))
    grid = regular_grid(scenario.grid_resolution)
    _, gamma, delta, _ = predictive_parameters(result.draws, model, data.points, data.M, data.T,
                                               grid, derive_seed(seed, 1))
    kl = weibull_kl_arrays(true_gamma(grid, scenario.kind), true_delta(grid, scenario.kind),
                           gamma, delta)
    return np.median(kl, axis=0)


def _replicate_task(args) -> tuple:
    scenario, layout, model, config, rep_seed = args
    data = generate_replicate(scenario, layout, derive_seed(rep_seed, 0))
    fit_seed = derive_seed(rep_seed, 1 + MODELS.index(model))
    return fit_and_score(data, model, scenario, config, fit_seed)


@dataclass
class StudyResult:
    scenario: Scenario
    models: tuple
    grid: np.ndarray
    medians: dict  # model -> (replicates, pixels)

    def mean_of_medians(self, model: str) -> np.ndarray:
        return self.medians[model].mean(axis=0)

    def aggregate(self, model: str) -> float:
        """Grid average of the per-pixel mean-of-medians."""
        return float(self.mean_of_medians(model).mean())

    def rows(self) -> list:
        out = []
        for model in self.models:
            mom = self.mean_of_medians(model)
            with np.errstate(divide="ignore"):
                logs = np.where(mom > 0, np.log10(np.where(mom > 0, mom, 1.0)), -np.inf)
            for (x, y), v, lv in zip(self.grid, mom, logs):
                out.append((self.scenario.kind, model, self.scenario.M, x, y, v, lv))
        return out


def run_study(scenario: Scenario, models: Sequence[str] = MODELS,
              config: SamplerConfig = SamplerConfig(n_iterations=2000, burn_in=500),
              seed: int = 0, layout=None, threads: Optional[int] = None) -> StudyResult:
    """Fit every model to every replicate and average per-pixel KL medians.

    Work items run in a process pool; results are collected in a fixed order so
    the output does not depend on ``threads``.
    """
    models = tuple(models)
    for m in models:
        if m not in MODELS:
            raise ValueError(f"unknown model {m!r}")
    layout = station_layouts(scenario.M) if layout is None else np.asarray(layout, dtype=float)
    if layout.shape != (scenario.M, 2):
        raise ValueError(f"layout must have shape ({scenario.M}, 2), got {layout.shape}")
    tasks = [(scenario, layout, m, config, derive_seed(seed, r))
             for r in range(scenario.replicates) for m in models]
    threads = threads or os.cpu_count() or 1
    if threads == 1:
        scores = [_replicate_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            scores = list(pool.map(_replicate_task, tasks))
    medians = {m: np.empty((scenario.replicates, scenario.grid_resolution ** 2)) for m in models}
    for (_, _, m, _, _), r_score, idx in zip(tasks, scores, range(len(tasks))):
        medians[m][idx // len(models)] = r_score
    return StudyResult(scenario, models, regular_grid(scenario.grid_resolution), medians)
