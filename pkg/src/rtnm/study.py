"""Replicated simulation studies: bias, interval coverage, test size and power."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .bootstrap import bootstrap_covariance
from .distance import DistanceSpec
from .estimate import GtIndex, estimate_att, naive_att
from .homogeneity import standard_hypotheses, wald_test
from .matching import MatchBounds
from .nested import run_rtnm
from .simulate import DgpConfig, simulate

Z95 = 1.959963984540054


@dataclass(frozen=True)
class StudySettings:
    spec: DistanceSpec = DistanceSpec()
    bounds: MatchBounds = MatchBounds()
    adjust: str = "none"
    B_cov: int = 1000
    B_test: int = 1000
    tests: bool = True
    alpha: float = 0.05

    def to_dict(self) -> dict:
        return {
            "metric": self.spec.metric,
            "ridge": self.spec.ridge,
            "bounds": self.bounds.to_dict(),
            "adjust": self.adjust,
            "B_cov": self.B_cov,
            "B_test": self.B_test,
            "tests": self.tests,
            "alpha": self.alpha,
        }


@dataclass(frozen=True, eq=False)
class Replicate:
    seed: int
    index: GtIndex
    truth: np.ndarray
    estimate: np.ndarray
    naive: np.ndarray
    se: np.ndarray
    hypotheses: tuple[str, ...] = ()
    p_values: np.ndarray = field(default_factory=lambda: np.zeros(0))


def replicate_seed(base: int, r: int) -> int:
    return int(np.random.SeedSequence([base, r]).generate_state(1)[0])


def run_replicate(config: DgpConfig, settings: StudySettings, r: int) -> Replicate:
    seed = replicate_seed(config.seed, r)
    sim = simulate(config.replace(seed=seed))
    cohorts = list(range(1, config.last_adoption + 1))
    design = run_rtnm(sim.data.without_outcomes(), cohorts, settings.spec, settings.bounds, seed=seed)
    att = estimate_att(sim.data, design, adjust=settings.adjust)
    truth = np.array([sim.truth.value(g, t) for g, t in att.index])
    naive = naive_att(sim.data, att.index).values
    sigma = bootstrap_covariance(att, settings.B_cov, seed)
    labels, pvals = (), np.zeros(0)
    if settings.tests:
        hyps = standard_hypotheses(att.index)
        labels = tuple(h.label for h in hyps)
        pvals = np.array([wald_test(att, sigma, h, settings.B_test, seed).p_value for h in hyps])
    return Replicate(seed, att.index, truth, att.values, naive, sigma.se, labels, pvals)


@dataclass(frozen=True, eq=False)
class StudyResult:
    config: DgpConfig
    settings: StudySettings
    replicates: tuple[Replicate, ...]

    @property
    def index(self) -> GtIndex:
        return self.replicates[0].index

    def _stack(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.replicates])

    def cells(self) -> pd.DataFrame:
        """Per-cell bias, mean absolute error, naive bias and 95% coverage."""
        truth, est, naive, se = (self._stack(n) for n in ("truth", "estimate", "naive", "se"))
        err = est - truth
        return pd.DataFrame({
            "g": [g for g, _ in self.index],
            "t": [t for _, t in self.index],
            "truth": truth.mean(axis=0),
            "bias": err.mean(axis=0),
            "naive_bias": (naive - truth).mean(axis=0),
            "sd": err.std(axis=0, ddof=1),
            "mean_se": se.mean(axis=0),
            "coverage": (np.abs(err) <= Z95 * se).mean(axis=0),
        })

    def rejection(self) -> pd.DataFrame:
        p = self._stack("p_values")
        return pd.DataFrame({
            "hypothesis": list(self.replicates[0].hypotheses),
            "rejection_rate": (p < self.settings.alpha).mean(axis=0),
        })

    def bias_ratio(self) -> float:
        """Mean |bias| of the matched estimate over mean |bias| of the naive one."""
        cells = self.cells()
        return float(cells["bias"].abs().mean() / cells["naive_bias"].abs().mean())

    def report(self) -> pd.DataFrame:
        cells = self.cells()
        cells.insert(0, "kind", "cell")
        cells.insert(1, "label", [f"({g},{t})" for g, t in zip(cells["g"], cells["t"])])
        if not self.settings.tests:
            return cells
        rej = self.rejection().rename(columns={"hypothesis": "label"})
        rej.insert(0, "kind", "test")
        return pd.concat([cells, rej], ignore_index=True)


def run_study(config: DgpConfig, reps: int, settings: StudySettings | None = None, workers: int = 1) -> StudyResult:
    """Replicate ``r`` simulates with a seed derived from ``(config.seed, r)``."""
    settings = settings or StudySettings()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reps_out = list(pool.map(run_replicate, [config] * reps, [settings] * reps, range(reps)))
    else:
        reps_out = [run_replicate(config, settings, r) for r in range(reps)]
    return StudyResult(config, settings, tuple(reps_out))
