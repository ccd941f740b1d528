"""Block bootstrap covariance of group-time estimates.

Outermost nested blocks are resampled with replacement.  Because every
outermost block spans all cohorts, every cell stays estimable in every
resample, and a replicate is just the mean of the resampled contribution rows.

Replicate ``r`` draws from ``Philox(SeedSequence([seed, stream, r]))`` so that
each replicate is reproducible on its own and the result does not depend on
how replicates are split across workers.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import NoBlockContributions
from .estimate import AttVector, GtIndex

GENERATOR = "numpy.random.Philox"
COVARIANCE_STREAM = 0xC0
TEST_STREAM = 0x7E57
PSD_TOL = 1e-8
_CHUNK = 256


class CovarianceRepairWarning(RuntimeWarning):
    pass


@dataclass(frozen=True, eq=False)
class CovarianceEstimate:
    index: GtIndex
    sigma: np.ndarray
    B: int
    seed: int
    replicates: np.ndarray | None = field(default=None, repr=False)
    rng: dict = field(default_factory=dict)
    repaired: bool = False

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.sigma))

    def to_dict(self) -> dict:
        return {
            "index": self.index.to_list(),
            "labels": self.index.labels(),
            "sigma": self.sigma.tolist(),
            "B": self.B,
            "seed": self.seed,
            "rng": dict(self.rng),
            "repaired": self.repaired,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CovarianceEstimate":
        index = GtIndex(tuple(tuple(p) for p in d["index"]))
        return cls(
            index=index,
            sigma=np.asarray(d["sigma"], dtype=float).reshape(index.K, index.K),
            B=int(d["B"]),
            seed=int(d["seed"]),
            rng=dict(d.get("rng", {})),
            repaired=bool(d.get("repaired", False)),
        )


def replicate_generator(seed: int, stream: int, r: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream, r])))


def resample_counts(n_blocks: int, seed: int, stream: int, start: int, stop: int) -> np.ndarray:
    """Multiplicity of each block in replicates ``start..stop-1`` (one row each)."""
    counts = np.empty((stop - start, n_blocks), dtype=np.int64)
    for i, r in enumerate(range(start, stop)):
        draw = replicate_generator(seed, stream, r).integers(0, n_blocks, size=n_blocks)
        counts[i] = np.bincount(draw, minlength=n_blocks)
    return counts


def bootstrap_replicates(
    contributions: np.ndarray,
    B: int,
    seed: int,
    stream: int = COVARIANCE_STREAM,
    threads: int = 1,
) -> np.ndarray:
    """B x K matrix of resampled block means."""
    rows = np.asarray(contributions, dtype=float)
    n1 = rows.shape[0]
    if n1 == 0:
        raise NoBlockContributions("estimate carries no block contributions to resample")
    if B < 2:
        raise ValueError("need at least two bootstrap replicates")

    def chunk(start: int) -> np.ndarray:
        stop = min(start + _CHUNK, B)
        return resample_counts(n1, seed, stream, start, stop) @ rows / n1

    starts = range(0, B, _CHUNK)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(chunk, starts))
    else:
        parts = [chunk(s) for s in starts]
    return np.vstack(parts)


def repair_psd(sigma: np.ndarray, tol: float = PSD_TOL) -> tuple[np.ndarray, bool]:
    """Symmetrize and floor eigenvalues below ``-tol`` at zero."""
    sigma = (sigma + sigma.T) / 2
    vals, vecs = np.linalg.eigh(sigma)
    if vals.size == 0 or vals.min() >= -tol:
        return sigma, False
    warnings.warn(
        f"covariance had a negative eigenvalue ({vals.min():.3g}); flooring at zero",
        CovarianceRepairWarning,
        stacklevel=3,
    )
    fixed = (vecs * np.clip(vals, 0.0, None)) @ vecs.T
    return (fixed + fixed.T) / 2, True


def bootstrap_covariance(
    att: AttVector,
    B: int,
    seed: int,
    keep_replicates: bool = False,
    threads: int = 1,
) -> CovarianceEstimate:
    """Sample covariance (divisor B - 1) of B block-resampled estimates."""
    reps = bootstrap_replicates(att.block_contributions, B, seed, COVARIANCE_STREAM, threads)
    sigma = np.atleast_2d(np.cov(reps, rowvar=False, ddof=1))
    sigma, repaired = repair_psd(sigma)
    rng = {
        "generator": GENERATOR,
        "substream": "SeedSequence([seed, stream, replicate])",
        "stream": COVARIANCE_STREAM,
        "numpy": np.__version__,
    }
    return CovarianceEstimate(
        index=att.index,
        sigma=sigma,
        B=int(B),
        seed=int(seed),
        replicates=reps if keep_replicates else None,
        rng=rng,
        repaired=repaired,
    )
