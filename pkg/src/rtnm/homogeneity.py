"""Equality hypotheses over group-time cells and their bootstrap Wald test.

A null ``R tau = 0`` is tested by comparing the observed Wald statistic with
its distribution over block-bootstrap replicates recentred on the projection
of the estimate onto the null space.  The covariance in the quadratic form is
the one estimated beforehand; the replicates here come from a separate stream.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .bootstrap import TEST_STREAM, CovarianceEstimate, bootstrap_replicates
from .errors import IndexMismatch, SingularContrastCovariance, TooFewCells
from .estimate import AttVector, GtIndex

KINDS = ("fixed_cohort", "fixed_time", "fixed_lag", "custom")

_RANK_TOL = 1e-10


class SingularContrastWarning(RuntimeWarning):
    pass


@dataclass(frozen=True, eq=False)
class HypothesisSpec:
    kind: str
    R: np.ndarray = field(repr=False)
    index: GtIndex
    description: str
    param: int | None = None

    @property
    def q(self) -> int:
        return self.R.shape[0]

    @property
    def label(self) -> str:
        symbol = {"fixed_cohort": "g", "fixed_time": "t", "fixed_lag": "e"}.get(self.kind)
        return f"H0,{symbol}={self.param}" if symbol else "H0,custom"


def select_cells(index: GtIndex, kind: str, param: int) -> list[int]:
    if kind == "fixed_cohort":
        return [k for k, (g, t) in enumerate(index) if g == param and t >= param]
    if kind == "fixed_time":
        return [k for k, (g, t) in enumerate(index) if t == param and g <= param]
    if kind == "fixed_lag":
        return [k for k, (g, t) in enumerate(index) if t - g == param]
    raise ValueError(f"unknown hypothesis family {kind!r}; choose from {KINDS[:3]}")


def adjacent_differences(index: GtIndex, cells: list[int]) -> np.ndarray:
    R = np.zeros((len(cells) - 1, index.K))
    for row, (a, b) in enumerate(zip(cells, cells[1:])):
        R[row, a] = 1.0
        R[row, b] = -1.0
    return R


def build_hypothesis(index: GtIndex, kind: str, param=None) -> HypothesisSpec:
    """Equality of all cells picked by the selector, as adjacent differences.

    For ``kind="custom"`` ``param`` is the q x K contrast matrix itself.
    """
    if kind == "custom":
        R = np.atleast_2d(np.asarray(param, dtype=float))
        validate_contrast(index, R)
        return HypothesisSpec("custom", R, index, f"custom contrast with {R.shape[0]} rows")
    kind = kind.replace("-", "_")
    param = int(param)
    cells = select_cells(index, kind, param)
    if len(cells) < 2:
        raise TooFewCells(f"{kind}={param} selects {len(cells)} cell(s); need at least 2")
    names = " = ".join(f"tau{index.pairs[k]}".replace(" ", "") for k in cells)
    return HypothesisSpec(kind, adjacent_differences(index, cells), index, names, param)


def validate_contrast(index: GtIndex, R: np.ndarray) -> None:
    if R.ndim != 2 or R.shape[1] != index.K or R.shape[0] < 1:
        raise IndexMismatch(f"contrast has shape {R.shape}; expected (q, {index.K})")
    if not np.all(np.isfinite(R)):
        raise ValueError("contrast entries must be finite")
    if np.any(np.abs(R.sum(axis=1)) > _RANK_TOL * np.maximum(1.0, np.abs(R).sum(axis=1))):
        raise ValueError("every contrast row must sum to zero")
    if np.linalg.matrix_rank(R) < R.shape[0]:
        raise ValueError("contrast rows must be linearly independent")


def standard_hypotheses(index: GtIndex) -> list[HypothesisSpec]:
    """Cohort families g = 1..4, time families t = 4..6 and lag families e = 0..2."""
    specs = [("fixed_cohort", g) for g in (1, 2, 3, 4)]
    specs += [("fixed_time", t) for t in (4, 5, 6)]
    specs += [("fixed_lag", e) for e in (0, 1, 2)]
    return [build_hypothesis(index, kind, p) for kind, p in specs]


@dataclass(frozen=True, eq=False)
class TestResult:
    __test__ = False  # keep pytest from collecting this class

    W_obs: float
    p_value: float
    q: int
    B: int
    tau_null: np.ndarray
    F: float
    label: str = ""
    description: str = ""
    seed: int = 0
    pseudo_inverse: bool = False
    W_star: np.ndarray | None = field(default=None, repr=False)

    @property
    def stars(self) -> str:
        return significance_stars(self.p_value)

    def to_dict(self) -> dict:
        return {
            "hypothesis": self.label,
            "description": self.description,
            "W_obs": self.W_obs,
            "F": self.F,
            "q": self.q,
            "p_value": self.p_value,
            "stars": self.stars,
            "B": self.B,
            "seed": self.seed,
            "pseudo_inverse": self.pseudo_inverse,
            "tau_null": self.tau_null.tolist(),
        }


def significance_stars(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


def project_null(tau: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Orthogonal projection of ``tau`` onto ``{x : R x = 0}``."""
    return tau - R.T @ np.linalg.solve(R @ R.T, R @ tau)


def contrast_inverse(R: np.ndarray, sigma: np.ndarray, strict: bool = False) -> tuple[np.ndarray, bool]:
    A = R @ sigma @ R.T
    A = (A + A.T) / 2
    scale = max(np.abs(A).max(initial=0.0), np.finfo(float).tiny)
    if np.linalg.matrix_rank(A, tol=_RANK_TOL * scale * A.shape[0]) < A.shape[0]:
        if strict:
            raise SingularContrastCovariance("R Sigma R' is singular")
        warnings.warn("R Sigma R' is singular; using the pseudo-inverse", SingularContrastWarning, stacklevel=3)
        return np.linalg.pinv(A, hermitian=True), True
    return np.linalg.inv(A), False


def wald_statistic(diff: np.ndarray, A_inv: np.ndarray) -> np.ndarray:
    """Quadratic forms ``d' A_inv d`` for a vector or each row of a matrix."""
    diff = np.asarray(diff, dtype=float)
    if diff.ndim == 1:
        return float(diff @ A_inv @ diff)
    return np.einsum("bi,ij,bj->b", diff, A_inv, diff)


def wald_test(
    att: AttVector,
    sigma: CovarianceEstimate,
    spec: HypothesisSpec,
    B: int,
    seed: int,
    threads: int = 1,
    strict: bool = False,
    keep_replicates: bool = False,
) -> TestResult:
    """Null-restricted bootstrap Wald test of ``spec.R tau = 0``."""
    if sigma.index.pairs != att.index.pairs or spec.index.pairs != att.index.pairs:
        raise IndexMismatch("estimate, covariance and hypothesis use different cell indexes")
    R = spec.R
    tau = att.values
    A_inv, pinv_used = contrast_inverse(R, sigma.sigma, strict)
    tau_null = project_null(tau, R)
    W_obs = wald_statistic(R @ tau, A_inv)

    reps = bootstrap_replicates(att.block_contributions, B, seed, TEST_STREAM, threads)
    W_star = wald_statistic((tau_null + (reps - tau)) @ R.T, A_inv)
    p = float(np.mean(W_star >= W_obs))
    return TestResult(
        W_obs=W_obs,
        p_value=p,
        q=spec.q,
        B=int(B),
        tau_null=tau_null,
        F=W_obs / spec.q,
        label=spec.label,
        description=spec.description,
        seed=int(seed),
        pseudo_inverse=pinv_used,
        W_star=W_star if keep_replicates else None,
    )
