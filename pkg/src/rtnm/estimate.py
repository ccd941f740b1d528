"""Group-time ATT estimation from a nested design.

For cell ``(g, t)`` every level-``g`` stratum contributes the difference
between the mean outcome at ``t`` of its cohort-``g`` units and of its members
still untreated at ``t`` (``G_i > t``).  Strata with no such member are dropped
from that cell.  Contributions are weighted by treated counts.  Each
outermost block's share is kept so that the block bootstrap can resample it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyCell, MissingOutcome
from .panel import PanelDataset

ADJUSTMENTS = ("none", "linear")


@dataclass(frozen=True)
class GtIndex:
    """Ordered collection of (g, t) cells with ``g <= t``."""

    pairs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        pairs = tuple((int(g), int(t)) for g, t in self.pairs)
        if len(set(pairs)) != len(pairs):
            raise ValueError("duplicate (g, t) cells")
        bad = [p for p in pairs if p[0] > p[1] or p[0] < 1]
        if bad:
            raise ValueError(f"cells must satisfy 1 <= g <= t: {bad}")
        object.__setattr__(self, "pairs", pairs)

    @classmethod
    def full(cls, cohorts: Iterable[int], t_max: int) -> "GtIndex":
        return cls(tuple((g, t) for g in sorted(cohorts) for t in range(g, t_max + 1)))

    @property
    def K(self) -> int:
        return len(self.pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def position(self, g: int, t: int) -> int:
        return self.pairs.index((g, t))

    def labels(self) -> list[str]:
        return [f"({g},{t})" for g, t in self.pairs]

    def cohorts(self) -> list[int]:
        return sorted({g for g, _ in self.pairs})

    def to_list(self) -> list[list[int]]:
        return [list(p) for p in self.pairs]


@dataclass(frozen=True, eq=False)
class AttVector:
    """Estimates for every cell of ``index`` plus outermost-block contributions.

    Row ``m`` of ``block_contributions`` is ``n1 * w_m * tau_m`` so that the
    mean over rows reproduces ``values``.  ``naive_att`` results carry an
    empty ``(0, K)`` contribution matrix.
    """

    index: GtIndex
    values: np.ndarray
    block_contributions: np.ndarray = field(repr=False)
    block_ids: tuple[str, ...] = ()
    n_strata_used: np.ndarray | None = None
    n_strata_dropped: np.ndarray | None = None
    adjust: str = "none"

    @property
    def n_blocks(self) -> int:
        return self.block_contributions.shape[0]

    def value(self, g: int, t: int) -> float:
        return float(self.values[self.index.position(g, t)])

    def to_dict(self) -> dict:
        return {
            "index": self.index.to_list(),
            "values": self.values.tolist(),
            "block_ids": list(self.block_ids),
            "block_contributions": self.block_contributions.tolist(),
            "n_strata_used": None if self.n_strata_used is None else self.n_strata_used.tolist(),
            "n_strata_dropped": None if self.n_strata_dropped is None else self.n_strata_dropped.tolist(),
            "adjust": self.adjust,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttVector":
        index = GtIndex(tuple(tuple(p) for p in d["index"]))
        contrib = np.asarray(d["block_contributions"], dtype=float).reshape(-1, index.K)
        used = d.get("n_strata_used")
        dropped = d.get("n_strata_dropped")
        return cls(
            index=index,
            values=np.asarray(d["values"], dtype=float),
            block_contributions=contrib,
            block_ids=tuple(d.get("block_ids", ())),
            n_strata_used=None if used is None else np.asarray(used, dtype=int),
            n_strata_dropped=None if dropped is None else np.asarray(dropped, dtype=int),
            adjust=d.get("adjust", "none"),
        )


def _check_index(design, index: GtIndex, data: PanelDataset) -> None:
    missing = [g for g in index.cohorts() if g not in design.levels]
    if missing:
        raise EmptyCell(f"design has no strata for cohort(s) {missing}")
    late = [t for _, t in index if t > data.t_max]
    if late:
        raise MissingOutcome(f"periods {sorted(set(late))} are beyond the panel")


def _linear_weights(x: np.ndarray, d: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Row of the WLS solution map that yields the treatment coefficient.

    The model regresses the outcome on an intercept, the treatment indicator
    and the covariate window; the coefficient on the indicator is ``c @ y``.
    """
    keep = np.ptp(x, axis=0) > 0 if x.size else np.zeros(0, dtype=bool)
    design = np.column_stack([np.ones(len(d)), d, x[:, keep]])
    sw = np.sqrt(w)
    pinv = np.linalg.pinv(design * sw[:, None])
    return pinv[1] * sw


def estimate_att(
    data: PanelDataset,
    design,
    index: GtIndex | None = None,
    adjust: str = "none",
) -> AttVector:
    """Matched estimates of ATT(g, t) for every cell in ``index``.

    With ``adjust="linear"`` the within-stratum contrast is replaced by the
    treatment coefficient of a weighted least-squares fit of ``Y_t`` on the
    treatment indicator and the cohort's covariate window over the matched
    sample (treated weight 1, comparisons share their stratum's treated
    count).  Block contributions then use the fit's linear weights.
    """
    if adjust not in ADJUSTMENTS:
        raise ValueError(f"adjust must be one of {ADJUSTMENTS}")
    if index is None:
        index = GtIndex.full(design.cohorts, data.t_max)
    _check_index(design, index, data)

    blocks = [s.id for s in design.outermost]
    block_pos = {b: m for m, b in enumerate(blocks)}
    n1 = len(blocks)
    K = index.K
    values = np.empty(K)
    contrib = np.zeros((n1, K))
    used = np.zeros(K, dtype=int)
    dropped = np.zeros(K, dtype=int)
    adoption = data.adoption

    prepared: dict[int, list] = {}
    for g in index.cohorts():
        rows = []
        for s in design.levels[g]:
            members = sorted(s.members)
            pos = data.positions(members)
            rows.append((
                block_pos[design.root_of(s.id)],
                data.positions(s.treated),
                pos,
                adoption[pos],
            ))
        prepared[g] = rows

    for k, (g, t) in enumerate(index):
        y = data.outcome(t)
        cells = []
        for block, tpos, mpos, madopt in prepared[g]:
            cpos = mpos[madopt > t]
            if cpos.size == 0:
                dropped[k] += 1
                continue
            cells.append((block, tpos, cpos))
        if not cells:
            raise EmptyCell(f"no stratum of cohort {g} has a unit untreated at period {t}")
        used[k] = len(cells)
        n_treated = sum(len(tp) for _, tp, _ in cells)

        if adjust == "none":
            locals_ = np.array([y[tp].mean() - y[cp].mean() for _, tp, cp in cells])
            shares = np.array([len(tp) for _, tp, _ in cells]) / n_treated
            values[k] = shares @ locals_
            for (block, _, _), share, local in zip(cells, shares, locals_):
                contrib[block, k] += n1 * share * local
        else:
            pos = np.concatenate([np.concatenate([tp, cp]) for _, tp, cp in cells])
            d = np.concatenate([np.r_[np.ones(len(tp)), np.zeros(len(cp))] for _, tp, cp in cells])
            w = np.concatenate([np.r_[np.ones(len(tp)), np.full(len(cp), len(tp) / len(cp))] for _, tp, cp in cells])
            owner = np.concatenate([np.full(len(tp) + len(cp), b) for b, tp, cp in cells])
            c = _linear_weights(data.windows(g, pos), d, w)
            values[k] = c @ y[pos]
            np.add.at(contrib[:, k], owner, n1 * c * y[pos])

    return AttVector(
        index=index,
        values=values,
        block_contributions=contrib,
        block_ids=tuple(blocks),
        n_strata_used=used,
        n_strata_dropped=dropped,
        adjust=adjust,
    )


def naive_att(data: PanelDataset, index: GtIndex) -> AttVector:
    """Unmatched difference in means between cohort ``g`` and units untreated at ``t``."""
    values = np.empty(index.K)
    adoption = data.adoption
    for k, (g, t) in enumerate(index):
        y = data.outcome(t)
        treated = adoption == g
        comps = adoption > t
        if not treated.any() or not comps.any():
            raise EmptyCell(f"cell ({g},{t}) has no treated or no comparison units")
        values[k] = y[treated].mean() - y[comps].mean()
    return AttVector(index=index, values=values, block_contributions=np.zeros((0, index.K)))


def select(att: AttVector, pairs: Sequence[tuple[int, int]]) -> AttVector:
    """Restrict an estimate to a sub-collection of cells, keeping their order."""
    sub = GtIndex(tuple(pairs))
    cols = [att.index.position(g, t) for g, t in sub]
    return AttVector(
        index=sub,
        values=att.values[cols],
        block_contributions=att.block_contributions[:, cols],
        block_ids=att.block_ids,
        n_strata_used=None if att.n_strata_used is None else att.n_strata_used[cols],
        n_strata_dropped=None if att.n_strata_dropped is None else att.n_strata_dropped[cols],
        adjust=att.adjust,
    )
