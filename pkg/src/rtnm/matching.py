"""Optimal full matching solved exactly as an integer min-cost flow.

A full matching is a partition of treated rows and comparison columns into
strata that are stars: one treated unit with ``k`` comparisons, or ``k``
treated units with one comparison.  Its cost is the sum of treated-comparison
distances inside each stratum.  Such a partition is the same thing as a
bipartite edge set in which every node has degree at least one and every edge
touches a degree-one node, so the problem becomes a degree-constrained
subgraph problem:

    source -> treated_i     flow = deg(i) - 1 in [0, a - 1]
    treated_i -> comp_j     capacity 1, cost = scaled distance
    comp_j -> sink          flow = deg(j) - 1 in [0, b - 1]

The lower bounds of one are moved into node supplies.  An optimal degree
constrained subgraph never keeps an edge whose endpoints both have degree two
or more when costs are positive (dropping it is feasible and cheaper), and
zero-cost edges of that kind are pruned after solving, so the decoded strata
are stars with the same objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from ortools.graph.python import min_cost_flow

from .distance import DistanceMatrix
from .errors import CostOverflow, Infeasible, MatchingError

COST_SCALE = 1_000_000
# seeded tie-breaking perturbation range; see _perturbed_costs
TIE_LEVELS = 16
_INT_LIMIT = 2**62


@dataclass(frozen=True)
class MatchBounds:
    """Structural limits on each stratum.

    ``max_ratio`` caps comparisons per treated unit in a one-treated stratum
    and, symmetrically, treated units per comparison in a one-comparison
    stratum.  ``min_ratio > 1`` requires at least that many comparisons per
    treated unit, which rules out strata with several treated units.
    ``max_stratum_size`` caps the number of entities in a stratum.
    """

    min_ratio: int = 1
    max_ratio: float = math.inf
    max_stratum_size: int | None = None

    def __post_init__(self):
        if not 1 <= self.min_ratio <= self.max_ratio:
            raise ValueError("need 1 <= min_ratio <= max_ratio")
        if self.min_ratio != int(self.min_ratio):
            raise ValueError("min_ratio must be an integer")
        if self.max_stratum_size is not None and self.max_stratum_size < 2:
            raise ValueError("max_stratum_size must be at least 2")
        if self.max_stratum_size is not None and self.min_ratio + 1 > self.max_stratum_size:
            raise ValueError("min_ratio does not fit inside max_stratum_size")

    def caps(self, n_treated: int, n_comparisons: int) -> tuple[int, int, int]:
        """(min comparisons per treated, max comparisons per treated, max treated per comparison)."""
        size_cap = math.inf if self.max_stratum_size is None else self.max_stratum_size - 1
        a = min(self.max_ratio, size_cap, n_comparisons)
        if self.min_ratio > 1:
            b = 1
        else:
            b = min(self.max_ratio, size_cap, n_treated)
        return int(self.min_ratio), int(a), int(b)

    def to_dict(self) -> dict:
        return {
            "min_ratio": int(self.min_ratio),
            "max_ratio": None if math.isinf(self.max_ratio) else self.max_ratio,
            "max_stratum_size": self.max_stratum_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MatchBounds":
        max_ratio = d.get("max_ratio")
        return cls(
            min_ratio=int(d.get("min_ratio", 1)),
            max_ratio=math.inf if max_ratio is None else max_ratio,
            max_stratum_size=d.get("max_stratum_size"),
        )


@dataclass(frozen=True)
class FullMatchProblem:
    """A distance matrix plus bounds.

    With ``allow_surplus`` the comparisons that cannot all be placed under the
    bounds (more comparisons than ``n_treated * max per treated``) are left
    unmatched, choosing the cheapest maximal set to keep; otherwise every row
    and column must be covered.
    """

    distance: DistanceMatrix
    bounds: MatchBounds = MatchBounds()
    allow_surplus: bool = False


@dataclass(frozen=True)
class Stratum:
    treated: tuple[int, ...]
    comparisons: tuple[int, ...]

    @property
    def size(self) -> int:
        return len(self.treated) + len(self.comparisons)


@dataclass(frozen=True)
class Stratification:
    """Solved full match over row/column positions of the distance matrix."""

    strata: tuple[Stratum, ...]
    objective: float
    scaled_objective: int
    unmatched: tuple[int, ...] = ()
    pairs: tuple[tuple[int, int], ...] = field(default=(), repr=False)

    def stratum_of_row(self) -> dict[int, int]:
        return {r: k for k, s in enumerate(self.strata) for r in s.treated}

    def stratum_of_col(self) -> dict[int, int]:
        return {c: k for k, s in enumerate(self.strata) for c in s.comparisons}


def scale_costs(values: np.ndarray) -> np.ndarray:
    """Distances as integers: round(1e6 * d)."""
    scaled = np.rint(np.asarray(values, dtype=float) * COST_SCALE)
    if scaled.size and scaled.max() >= _INT_LIMIT:
        raise CostOverflow("scaled distances exceed the integer range")
    return scaled.astype(np.int64)


def _perturbed_costs(scaled: np.ndarray, max_edges: int, seed: int, n_nodes: int) -> tuple[np.ndarray, int]:
    # every cost is multiplied by a factor larger than the total perturbation
    # any feasible solution can accumulate, so optima of the perturbed problem
    # are optima of the scaled problem and the seed only decides ties
    factor = TIE_LEVELS * (max_edges + 1)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x7E])))
    jitter = rng.integers(0, TIE_LEVELS, size=scaled.shape, dtype=np.int64)
    top = int(scaled.max(initial=0))
    # the cost-scaling solver multiplies costs by the node count internally
    if (top + 1) * factor * (n_nodes + 1) >= _INT_LIMIT:
        raise CostOverflow(
            f"scaled costs up to {top} with {max_edges} edges overflow 64-bit arithmetic"
        )
    return scaled * factor + jitter, factor


def check_feasible(n_treated: int, n_comparisons: int, bounds: MatchBounds, allow_surplus: bool = False) -> str:
    """Counting check; returns the solve mode ('exact' or 'surplus')."""
    if n_treated < 1 or n_comparisons < 1:
        raise Infeasible("full matching needs at least one treated unit and one comparison")
    m, a, b = bounds.caps(n_treated, n_comparisons)
    if n_comparisons > n_treated * a:
        if allow_surplus:
            return "surplus"
        raise Infeasible(
            f"{n_comparisons} comparisons cannot be placed with {n_treated} treated units "
            f"and at most {a} comparisons per treated unit"
        )
    if m > 1 and n_comparisons < n_treated * m:
        raise Infeasible(
            f"{n_treated} treated units need at least {n_treated * m} comparisons, "
            f"have {n_comparisons}"
        )
    if n_treated > n_comparisons * b:
        raise Infeasible(
            f"{n_treated} treated units cannot be placed with {n_comparisons} comparisons "
            f"and at most {b} treated units per comparison"
        )
    return "exact"


def solve_flow(
    tails: np.ndarray,
    heads: np.ndarray,
    capacities: np.ndarray,
    costs: np.ndarray,
    supplies: np.ndarray,
) -> np.ndarray:
    """Exact integer min-cost flow; returns the flow on each arc."""
    smcf = min_cost_flow.SimpleMinCostFlow()
    smcf.add_arcs_with_capacity_and_unit_cost(
        np.asarray(tails, dtype=np.int32),
        np.asarray(heads, dtype=np.int32),
        np.asarray(capacities, dtype=np.int64),
        np.asarray(costs, dtype=np.int64),
    )
    smcf.set_nodes_supplies(np.arange(len(supplies), dtype=np.int32), np.asarray(supplies, dtype=np.int64))
    status = smcf.solve()
    if status == smcf.INFEASIBLE:
        raise Infeasible("no flow satisfies the matching constraints")
    if status == smcf.BAD_COST_RANGE:
        raise CostOverflow("min-cost flow reported a cost range overflow")
    if status != smcf.OPTIMAL:
        raise MatchingError(f"min-cost flow failed with status {status}")
    return smcf.flows(np.arange(len(tails)))


def solve_full_match(problem: FullMatchProblem, seed: int = 0) -> Stratification:
    """Minimum-cost full matching of the rows and columns of ``problem.distance``."""
    d = problem.distance.values
    n_t, n_c = d.shape
    mode = check_feasible(n_t, n_c, problem.bounds, problem.allow_surplus)
    m, a, b = problem.bounds.caps(n_t, n_c)

    scaled = scale_costs(d)
    max_edges = n_t * a if mode == "surplus" else n_t + n_c
    n_nodes = n_t + n_c + 2
    costs, _ = _perturbed_costs(scaled, max_edges, seed, n_nodes)

    src, sink = n_t + n_c, n_t + n_c + 1
    t_nodes = np.arange(n_t)
    c_nodes = n_t + np.arange(n_c)
    pair_tails = np.repeat(t_nodes, n_c)
    pair_heads = np.tile(c_nodes, n_t)
    n_pairs = n_t * n_c

    supplies = np.zeros(n_nodes, dtype=np.int64)
    extra_t, extra_h, extra_cap = [], [], []
    if mode == "surplus":
        # every treated unit takes exactly a comparisons, each used at most once
        supplies[:n_t] = a
        supplies[sink] = -n_t * a
        extra_t.append(c_nodes)
        extra_h.append(np.full(n_c, sink))
        extra_cap.append(np.ones(n_c, dtype=np.int64))
    elif m > 1:
        # one treated unit per stratum with m..a comparisons
        supplies[:n_t] = m
        supplies[c_nodes] = -1
        slack = n_c
        supplies[src] = slack
        supplies[sink] = -(slack + n_t * m - n_c)
        extra_t += [np.full(n_t, src), [src]]
        extra_h += [t_nodes, [sink]]
        extra_cap += [np.full(n_t, a - m), [slack]]
    else:
        supplies[:n_t] = 1
        supplies[c_nodes] = -1
        slack = n_t + n_c
        supplies[src] = slack
        supplies[sink] = -(slack + n_t - n_c)
        extra_t += [np.full(n_t, src), c_nodes, [src]]
        extra_h += [t_nodes, np.full(n_c, sink), [sink]]
        extra_cap += [np.full(n_t, a - 1), np.full(n_c, b - 1), [slack]]

    ex_t = np.concatenate([np.asarray(x, dtype=np.int64) for x in extra_t])
    ex_h = np.concatenate([np.asarray(x, dtype=np.int64) for x in extra_h])
    ex_c = np.concatenate([np.asarray(x, dtype=np.int64) for x in extra_cap])
    flows = solve_flow(
        np.concatenate([pair_tails, ex_t]),
        np.concatenate([pair_heads, ex_h]),
        np.concatenate([np.ones(n_pairs, dtype=np.int64), ex_c]),
        np.concatenate([costs.ravel(), np.zeros(len(ex_t), dtype=np.int64)]),
        supplies,
    )
    chosen = np.flatnonzero(flows[:n_pairs] > 0)
    pairs = _prune_to_stars(chosen // n_c, chosen % n_c, n_t, n_c, scaled)
    return _decode(pairs, n_t, n_c, d, scaled)


def _prune_to_stars(rows: np.ndarray, cols: np.ndarray, n_t: int, n_c: int, scaled: np.ndarray) -> list[tuple[int, int]]:
    deg_t = np.bincount(rows, minlength=n_t)
    deg_c = np.bincount(cols, minlength=n_c)
    keep = []
    for r, c in zip(rows.tolist(), cols.tolist()):
        if deg_t[r] >= 2 and deg_c[c] >= 2:
            # only zero-cost edges can survive optimization in this shape
            if scaled[r, c] != 0:
                raise MatchingError("solver returned a non-star edge with positive cost")
            deg_t[r] -= 1
            deg_c[c] -= 1
            continue
        keep.append((r, c))
    return keep


def _decode(pairs, n_t, n_c, d, scaled) -> Stratification:
    by_t: dict[int, list[int]] = {}
    by_c: dict[int, list[int]] = {}
    for r, c in pairs:
        by_t.setdefault(r, []).append(c)
        by_c.setdefault(c, []).append(r)
    strata = []
    for r in range(n_t):
        cols = by_t.get(r, [])
        if len(cols) >= 2 or (len(cols) == 1 and len(by_c[cols[0]]) == 1):
            strata.append(Stratum((r,), tuple(sorted(cols))))
    for c in range(n_c):
        rows = by_c.get(c, [])
        if len(rows) >= 2:
            strata.append(Stratum(tuple(sorted(rows)), (c,)))
    strata.sort(key=lambda s: (min(s.treated), min(s.comparisons)))
    covered_t = {r for s in strata for r in s.treated}
    if len(covered_t) != n_t:
        raise MatchingError("decoded strata do not cover every treated unit")
    covered_c = {c for s in strata for c in s.comparisons}
    unmatched = tuple(c for c in range(n_c) if c not in covered_c)
    objective = float(sum(d[r, c] for r, c in pairs))
    scaled_obj = int(sum(int(scaled[r, c]) for r, c in pairs))
    return Stratification(tuple(strata), objective, scaled_obj, unmatched, tuple(sorted(pairs)))


def match_objective(strata: Sequence[Stratum], values: np.ndarray) -> float:
    """Sum of within-stratum treated-comparison distances."""
    return float(sum(values[r, c] for s in strata for r in s.treated for c in s.comparisons))


def solve_transport(
    cost: np.ndarray,
    row_capacity: Sequence[int],
    seed: int = 0,
) -> list[tuple[int, int]]:
    """Assign columns to rows, each column at most once and row ``r`` at most
    ``row_capacity[r]`` times, maximizing the number assigned and then
    minimizing total cost.  Returns the assigned (row, col) pairs.
    """
    n_r, n_c = cost.shape
    row_capacity = np.asarray(row_capacity, dtype=np.int64)
    total = int(min(n_c, row_capacity.sum()))
    if total == 0:
        return []
    scaled = scale_costs(cost)
    n_nodes = n_r + n_c + 2
    costs, _ = _perturbed_costs(scaled, total, seed, n_nodes)
    src, sink = n_r + n_c, n_r + n_c + 1
    r_nodes = np.arange(n_r)
    c_nodes = n_r + np.arange(n_c)
    supplies = np.zeros(n_nodes, dtype=np.int64)
    supplies[src], supplies[sink] = total, -total
    tails = np.concatenate([np.full(n_c, src), np.repeat(c_nodes, n_r), r_nodes])
    heads = np.concatenate([c_nodes, np.tile(r_nodes, n_c), np.full(n_r, sink)])
    caps = np.concatenate([np.ones(n_c), np.ones(n_c * n_r), row_capacity]).astype(np.int64)
    arc_costs = np.concatenate([np.zeros(n_c, dtype=np.int64), costs.T.ravel(), np.zeros(n_r, dtype=np.int64)])
    flows = solve_flow(tails, heads, caps, arc_costs, supplies)
    used = np.flatnonzero(flows[n_c:n_c + n_c * n_r] > 0)
    return sorted((int(k % n_r), int(k // n_r)) for k in used)
