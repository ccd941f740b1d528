"""Synthetic staggered-adoption panels with known group-time effects.

Untreated potential outcomes follow a unit effect plus a trend plus a linear
function of autoregressive covariates.  The first covariate reported in the
panel is the observed outcome itself, so lagged outcomes enter every matching
window.  Adoption in period ``t`` is drawn from a logistic hazard of the
period ``t - 1`` history only, bounded away from 0 and 1, so adoption is
unconfounded given the observed history.  Treated potential outcomes add the
configured effect from the adoption period on.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np
from scipy.special import expit

from .errors import DegenerateCohort
from .estimate import AttVector, GtIndex
from .panel import NEVER, PanelDataset

EFFECT_KINDS = ("constant", "cohort", "lag", "table")


@dataclass(frozen=True)
class EffectMap:
    """True effect surface ``effect(g, t)`` for ``t >= g``.

    ``cohort`` and ``lag`` add ``values[g]`` / ``values[t - g]`` to ``base``;
    ``table`` looks up ``values["g,t"]`` (missing cells are ``base``).
    """

    kind: str = "constant"
    base: float = 0.0
    values: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in EFFECT_KINDS:
            raise ValueError(f"effect kind must be one of {EFFECT_KINDS}")
        object.__setattr__(self, "values", {str(k): float(v) for k, v in dict(self.values).items()})

    def __call__(self, g: int, t: int) -> float:
        if t < g:
            return 0.0
        if self.kind == "constant":
            return self.base
        if self.kind == "cohort":
            return self.base + self.values.get(str(g), 0.0)
        if self.kind == "lag":
            return self.base + self.values.get(str(t - g), 0.0)
        return self.values.get(f"{g},{t}", self.base)

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "EffectMap":
        if not d:
            return cls()
        d = dict(d)
        if "value" in d and "base" not in d:
            d["base"] = d.pop("value")
        return cls(kind=d.get("kind", "constant"), base=float(d.get("base", 0.0)), values=d.get("values", {}))


@dataclass(frozen=True)
class DgpConfig:
    """Data-generating process knobs.

    ``base_hazard`` is the adoption logit in each period 1..T (a scalar
    applies to all periods); ``confounding`` loads the standardized lagged
    outcome and ``covariate_hazard`` the mean standardized lagged auxiliary
    covariate onto that logit.  ``cohort_sizes`` pins the number of adopters
    per period by weighted sampling without replacement on the same hazards;
    everyone else is never treated.  Adoption happens only in periods
    ``1..n_cohorts`` (all periods when ``None``).  ``min_cohorts`` lists the cohorts that
    must be nonempty; a draw that leaves one empty is redrawn (up to
    ``max_redraws`` times) or rejected.
    """

    n_units: int = 2000
    t0: int = -2
    t_max: int = 6
    n_covariates: int = 2
    base_hazard: float | tuple[float, ...] = (-2.7, -2.55, -2.4, -2.25)
    confounding: float = 0.0
    covariate_hazard: float = 0.0
    n_cohorts: int | None = 4
    hazard_bounds: tuple[float, float] = (0.01, 0.95)
    effect: EffectMap = EffectMap()
    unit_sd: float = 1.0
    noise_sd: float = 1.0
    trend: float = 0.1
    ar: float = 0.6
    cross_loading: float = 0.3
    covariate_effect: float = 0.5
    outcome_type: str = "continuous"
    cohort_sizes: Mapping[int, int] | None = None
    min_cohorts: tuple[int, ...] = (1, 2, 3, 4)
    max_redraws: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.n_covariates < 1:
            raise ValueError("need at least one covariate (the outcome history)")
        if not self.t0 <= 0 < 1 <= self.t_max:
            raise ValueError("need t0 <= 0 < 1 <= T")
        lo, hi = self.hazard_bounds
        if not 0 < lo <= hi < 1:
            raise ValueError("hazard bounds must lie strictly inside (0, 1)")
        if self.outcome_type not in ("continuous", "binary"):
            raise ValueError("outcome_type is 'continuous' or 'binary'")
        if not isinstance(self.effect, EffectMap):
            object.__setattr__(self, "effect", EffectMap.from_dict(self.effect))
        if isinstance(self.base_hazard, list):
            object.__setattr__(self, "base_hazard", tuple(self.base_hazard))
        if isinstance(self.base_hazard, tuple) and len(self.base_hazard) < self.last_adoption:
            raise ValueError(f"base_hazard needs a logit for each period 1..{self.last_adoption}")
        if self.cohort_sizes is not None:
            sizes = {int(g): int(n) for g, n in dict(self.cohort_sizes).items()}
            if any(g < 1 or g > self.t_max for g in sizes) or sum(sizes.values()) > self.n_units:
                raise ValueError("cohort_sizes must use periods 1..T and fit in n_units")
            object.__setattr__(self, "cohort_sizes", sizes)
        object.__setattr__(self, "hazard_bounds", tuple(self.hazard_bounds))
        object.__setattr__(self, "min_cohorts", tuple(int(g) for g in self.min_cohorts))

    @property
    def last_adoption(self) -> int:
        return self.t_max if self.n_cohorts is None else min(self.n_cohorts, self.t_max)

    def replace(self, **changes) -> "DgpConfig":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(changes)
        return DgpConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["effect"] = {"kind": self.effect.kind, "base": self.effect.base, "values": dict(self.effect.values)}
        if self.cohort_sizes is not None:
            d["cohort_sizes"] = {str(g): n for g, n in self.cohort_sizes.items()}
        d["hazard_bounds"] = list(self.hazard_bounds)
        d["min_cohorts"] = list(self.min_cohorts)
        if isinstance(self.base_hazard, tuple):
            d["base_hazard"] = list(self.base_hazard)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "DgpConfig":
        d = dict(d)
        d.pop("schema_version", None)
        if "effect" in d:
            d["effect"] = EffectMap.from_dict(d["effect"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown DGP settings: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DgpConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True, eq=False)
class SimulatedPanel:
    data: PanelDataset
    truth: AttVector
    y_untreated: np.ndarray
    y_treated: np.ndarray


def _standardize(x: np.ndarray) -> np.ndarray:
    sd = x.std()
    return (x - x.mean()) / sd if sd > 0 else np.zeros_like(x)


def _base_logit(config: DgpConfig, t: int) -> float:
    if isinstance(config.base_hazard, tuple):
        return float(config.base_hazard[t - 1])
    return float(config.base_hazard)


def _draw(config: DgpConfig, rng: np.random.Generator) -> SimulatedPanel:
    n, p_aux = config.n_units, config.n_covariates - 1
    periods = np.arange(config.t0, config.t_max + 1)
    n_per = len(periods)

    alpha = rng.normal(0.0, config.unit_sd, n)
    aux = np.zeros((n, n_per, p_aux))
    index = np.zeros((n, n_per))  # linear predictor of the untreated outcome
    y0 = np.zeros((n, n_per))
    innov = np.sqrt(1 - config.ar**2)
    uniforms = rng.random((n, n_per))
    for k, t in enumerate(periods):
        if k == 0:
            aux[:, k] = rng.normal(size=(n, p_aux))
        else:
            lagged = _standardize(y0[:, k - 1])
            aux[:, k] = (config.ar * aux[:, k - 1] + config.cross_loading * lagged[:, None]
                         + innov * rng.normal(size=(n, p_aux)))
        drift = config.covariate_effect * aux[:, k].mean(axis=1) if p_aux else 0.0
        index[:, k] = alpha + config.trend * t + drift
        if config.outcome_type == "continuous":
            y0[:, k] = index[:, k] + rng.normal(0.0, config.noise_sd, n)
        else:
            y0[:, k] = (uniforms[:, k] < expit(index[:, k])).astype(float)

    adoption = np.full(n, NEVER)
    lo, hi = config.hazard_bounds
    at_risk = np.ones(n, dtype=bool)
    for t in range(1, config.last_adoption + 1):
        k = t - config.t0
        logit = _base_logit(config, t) + config.confounding * _standardize(y0[:, k - 1])
        if p_aux:
            logit = logit + config.covariate_hazard * _standardize(aux[:, k - 1].mean(axis=1))
        hazard = np.clip(expit(logit), lo, hi)
        risk = np.flatnonzero(at_risk)
        if config.cohort_sizes is None:
            adopt = risk[rng.random(risk.size) < hazard[risk]]
        else:
            quota = config.cohort_sizes.get(t, 0)
            keys = np.log(rng.random(risk.size)) / hazard[risk]
            adopt = risk[np.argsort(-keys, kind="stable")[:quota]]
        adoption[adopt] = t
        at_risk[adopt] = False

    effects = np.zeros((n, n_per))
    for g in np.unique(adoption[np.isfinite(adoption)]).astype(int):
        rows = adoption == g
        for k, t in enumerate(periods):
            effects[rows, k] = config.effect(g, int(t))
    if config.outcome_type == "continuous":
        y1 = y0 + effects
    else:
        y1 = (uniforms < expit(index + effects)).astype(float)
    observed = np.where(periods[None, :] >= adoption[:, None], y1, y0)

    covariates = np.concatenate([observed[:, :, None], aux], axis=2)
    names = ("y_hist",) + tuple(f"x{j}" for j in range(1, p_aux + 1))
    width = len(str(n))
    data = PanelDataset(
        unit_ids=tuple(f"u{i:0{width}d}" for i in range(n)),
        t0=config.t0,
        t_max=config.t_max,
        covariates=covariates,
        adoption=adoption,
        covariate_names=names,
        outcomes=observed,
    )

    cohorts = data.cohorts()
    gt = GtIndex.full(cohorts, config.t_max)
    truth = np.array([
        (y1[adoption == g, t - config.t0] - y0[adoption == g, t - config.t0]).mean() for g, t in gt
    ])
    truth_vec = AttVector(index=gt, values=truth, block_contributions=np.zeros((0, gt.K)))
    return SimulatedPanel(data, truth_vec, y0, y1)


def simulate(config: DgpConfig) -> SimulatedPanel:
    """Draw a panel, redrawing while any of ``config.min_cohorts`` is empty."""
    rng = np.random.default_rng(config.seed)
    for _ in range(config.max_redraws + 1):
        sim = _draw(config, rng)
        present = set(sim.data.cohorts())
        empty = [g for g in config.min_cohorts if g not in present]
        if not empty:
            return sim
    raise DegenerateCohort(f"cohort(s) {empty} stayed empty after {config.max_redraws} redraws")


def generate_panel(config: DgpConfig) -> tuple[PanelDataset, AttVector]:
    """Simulated panel and its exact finite-population ATT(g, t) for every cell."""
    sim = simulate(config)
    return sim.data, sim.truth


def applied_scale_config(**overrides) -> DgpConfig:
    """Nine covariates, periods -2..6 and cohort sizes 237/360/302/838 with
    7,890 never-treated units (9,627 in total)."""
    base = dict(
        n_units=9627, t0=-2, t_max=6, n_covariates=9,
        cohort_sizes={1: 237, 2: 360, 3: 302, 4: 838},
        confounding=0.5, covariate_hazard=0.3,
    )
    base.update(overrides)
    return DgpConfig(**base)
