"""Mahalanobis-type distances over cohort-specific covariate histories.

A fitted metric stores whitened coordinates ``w = L^{-1} v`` where ``L`` is
the Cholesky factor of the (possibly rank-based) covariance plus a ridge, so
the distance between two units is the Euclidean norm ``||w_i - w_j||``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import linalg, sparse
from scipy.spatial.distance import cdist
from scipy.stats import rankdata

from .errors import EmptyStratum, SingularCovariance, UnknownUnit
from .panel import PanelDataset

METRICS = ("mahalanobis", "rank_mahalanobis")

_METRIC_ALIASES = {"rank": "rank_mahalanobis", "mahal": "mahalanobis"}


@dataclass(frozen=True)
class DistanceSpec:
    """Metric choice and covariance ridge.

    ``ridge=None`` uses ``1e-6 * trace(S) / dim``; an explicit ``0.0`` forces
    an unregularized factorization.
    """

    metric: str = "rank_mahalanobis"
    ridge: float | None = None

    def __post_init__(self):
        metric = _METRIC_ALIASES.get(self.metric, self.metric)
        if metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}; choose from {METRICS}")
        if self.ridge is not None and self.ridge < 0:
            raise ValueError("ridge must be nonnegative")
        object.__setattr__(self, "metric", metric)


def rank_transform(values: np.ndarray) -> np.ndarray:
    """Column-wise average ranks (ties share the mean rank), starting at 1."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        return rankdata(values, method="average")
    return rankdata(values, method="average", axis=0)


def _rank_covariance(ranks: np.ndarray) -> np.ndarray:
    # rescale so every coordinate carries the variance of untied ranks while
    # keeping the rank correlations; ties therefore cannot inflate influence
    n = ranks.shape[0]
    cov = np.atleast_2d(np.cov(ranks, rowvar=False, ddof=0))
    untied = (n * n - 1) / 12.0  # population variance of the ranks 1..n
    scale = np.sqrt(untied / np.diag(cov))
    return cov * np.outer(scale, scale)


@dataclass(frozen=True, eq=False)
class FittedMetric:
    """Immutable state of a metric fitted on one pool for one cohort period."""

    g: int
    spec: DistanceSpec
    unit_ids: tuple[str, ...]
    whitened: np.ndarray = field(repr=False)
    ridge: float = 0.0
    dropped_coordinates: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "_pos", {u: i for i, u in enumerate(self.unit_ids)})
        self.whitened.flags.writeable = False

    def __contains__(self, unit) -> bool:
        return str(unit) in self._pos

    def index_of(self, units: Iterable) -> np.ndarray:
        try:
            return np.fromiter((self._pos[str(u)] for u in units), dtype=np.intp)
        except KeyError as exc:
            raise UnknownUnit(f"unit {exc.args[0]!r} is not in the fitted pool for g={self.g}") from None

    def unit_distance(self, i, j) -> float:
        """d_g(i, j) = sqrt((v_i - v_j)' M (v_i - v_j))."""
        a, b = self.index_of((i, j))
        return float(np.linalg.norm(self.whitened[a] - self.whitened[b]))

    def unit_distances(self, rows: Sequence, cols: Sequence | None = None) -> np.ndarray:
        """Dense unit-to-unit distance block (all pool units if ``cols`` is None)."""
        w_rows = self.whitened[self.index_of(rows)]
        w_cols = self.whitened if cols is None else self.whitened[self.index_of(cols)]
        if w_rows.shape[1] == 0:
            return np.zeros((len(w_rows), len(w_cols)))
        return cdist(w_rows, w_cols)

    def unit_to_set_distance(self, i, stratum: Iterable) -> float:
        """Average distance from unit ``i`` to the members of ``stratum``."""
        members = list(stratum)
        if not members:
            raise EmptyStratum("distance to an empty stratum is undefined")
        return float(self.unit_distances([i], members).mean())


def fit_metric(
    data: PanelDataset,
    g: int,
    pool: Iterable,
    spec: DistanceSpec | None = None,
) -> FittedMetric:
    """Fit the distance for cohort period ``g`` on the units in ``pool``.

    The pool is normally the treated cohort plus everyone not yet treated at
    ``g``.  Coordinates that are constant over the pool carry no information
    and are dropped before the covariance is formed.
    """
    spec = spec or DistanceSpec()
    unit_ids = tuple(str(u) for u in pool)
    if len(set(unit_ids)) != len(unit_ids):
        raise ValueError("pool contains duplicate units")
    v = data.windows(g, data.positions(unit_ids))
    if v.shape[1] == 0:
        raise ValueError("covariate window is empty")

    if spec.metric == "rank_mahalanobis":
        v = rank_transform(v)
    spread = np.ptp(v, axis=0) if len(v) else np.zeros(v.shape[1])
    keep = np.flatnonzero(spread > 0)
    dropped = tuple(int(k) for k in np.flatnonzero(spread == 0))
    v = v[:, keep]
    if v.shape[1] == 0 or len(unit_ids) < 2:
        return FittedMetric(g, spec, unit_ids, np.zeros((len(unit_ids), 0)), 0.0, dropped)

    if spec.metric == "rank_mahalanobis":
        cov = _rank_covariance(v)
    else:
        cov = np.atleast_2d(np.cov(v, rowvar=False))
    ridge = 1e-6 * np.trace(cov) / cov.shape[0] if spec.ridge is None else float(spec.ridge)
    cov = cov + ridge * np.eye(cov.shape[0])
    try:
        chol = linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError:
        raise SingularCovariance(
            f"covariance of the g={g} window is singular; use a positive ridge"
        ) from None
    centered = v - v.mean(axis=0)
    whitened = linalg.solve_triangular(chol, centered.T, lower=True).T
    return FittedMetric(g, spec, unit_ids, np.ascontiguousarray(whitened), ridge, dropped)


def unit_distance(metric: FittedMetric, i, j) -> float:
    return metric.unit_distance(i, j)


def unit_to_set_distance(metric: FittedMetric, i, stratum: Iterable) -> float:
    return metric.unit_to_set_distance(i, stratum)


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    """Treated rows against comparison entities (units or strata) for cohort ``g``."""

    rows: tuple
    cols: tuple
    values: np.ndarray = field(repr=False)
    g: int | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (len(self.rows), len(self.cols)):
            raise ValueError(f"values shape {values.shape} does not match labels")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ValueError("distances must be finite and nonnegative")
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def membership_matrix(metric: FittedMetric, comparisons: Sequence) -> sparse.csc_matrix:
    """Sparse pool-units x entities matrix whose columns average over each entity."""
    rows, cols, vals = [], [], []
    for c, entity in enumerate(comparisons):
        members = [entity] if isinstance(entity, str) else list(entity)
        if not members:
            raise EmptyStratum(f"comparison entity {c} is empty")
        idx = metric.index_of(members)
        rows.append(idx)
        cols.append(np.full(len(idx), c))
        vals.append(np.full(len(idx), 1.0 / len(idx)))
    shape = (len(metric.unit_ids), len(comparisons))
    return sparse.csc_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=shape
    )


def build_distance_matrix(
    metric: FittedMetric,
    treated: Sequence,
    comparisons: Sequence,
    labels: Sequence | None = None,
) -> DistanceMatrix:
    """Distances from each treated unit to each comparison entity.

    A comparison entity is either a unit id or a collection of unit ids; sets
    are scored by the average member distance.  Row and column order follow
    the inputs.
    """
    treated = tuple(str(u) for u in treated)
    if not treated or not len(comparisons):
        raise ValueError("need at least one treated unit and one comparison")
    unit_cols = all(isinstance(c, str) for c in comparisons)
    if unit_cols:
        values = metric.unit_distances(treated, comparisons)
    else:
        values = np.asarray((membership_matrix(metric, comparisons).T @ metric.unit_distances(treated).T).T)
    if labels is None:
        labels = tuple(c if isinstance(c, str) else tuple(c) for c in comparisons)
    return DistanceMatrix(treated, tuple(labels), values, metric.g)
