"""Reverse-time nested matching.

Cohorts are matched from the latest analyzed cohort ``G`` backward.  Cohort
``G`` is full-matched to every unit not yet treated at ``G``.  Each earlier
cohort ``g`` is full-matched to the level ``g + 1`` strata, each stratum acting
as one pseudo-control scored by the average member distance under the
``g``-window metric.  The resulting strata are nested: every level ``g + 1``
stratum sits inside exactly one level ``g`` stratum.

Comparison units that the size bounds leave out of level ``G`` are carried
backward as singletons.  At each earlier level they are offered to strata
built around one treated unit with spare room, and whatever is still left
after level 1 is reported as unused.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .distance import DistanceSpec, build_distance_matrix, fit_metric
from .errors import EmptyCohort, Infeasible
from .matching import FullMatchProblem, MatchBounds, solve_full_match, solve_transport
from .panel import NEVER, PanelDataset, format_cohort, is_never

log = logging.getLogger(__name__)

DESIGN_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class NestedStratum:
    """One matched set at level ``level``.

    ``treated`` are the cohort-``level`` units, ``children`` the ids of the
    level ``level + 1`` strata matched in as pseudo-controls and
    ``singletons`` comparison units matched in directly.  ``members`` is the
    full unit set including everything nested in the children.
    """

    id: str
    level: int
    treated: tuple[str, ...]
    children: tuple[str, ...]
    singletons: tuple[str, ...]
    members: frozenset[str] = field(repr=False)


@dataclass(frozen=True, eq=False)
class NestedDesign:
    cohorts: tuple[int, ...]
    levels: dict[int, tuple[NestedStratum, ...]]
    parent: dict[str, str]
    cohort_of: dict[str, float] = field(repr=False)
    unused: tuple[str, ...] = ()
    config: dict = field(default_factory=dict)
    objectives: dict[int, float] = field(default_factory=dict)

    @property
    def outermost(self) -> tuple[NestedStratum, ...]:
        return self.levels[min(self.cohorts)]

    def stratum(self, sid: str) -> NestedStratum:
        return self._by_id[sid]

    @cached_property
    def _by_id(self) -> dict[str, NestedStratum]:
        return {s.id: s for level in self.levels.values() for s in level}

    def root_of(self, sid: str) -> str:
        """Id of the outermost stratum containing stratum ``sid``."""
        while sid in self.parent:
            sid = self.parent[sid]
        return sid

    def units(self) -> set[str]:
        return {u for s in self.outermost for u in s.members}

    def to_dict(self) -> dict:
        return {
            "schema_version": DESIGN_SCHEMA_VERSION,
            "cohorts": list(self.cohorts),
            "config": self.config,
            "levels": {
                str(g): [
                    {
                        "id": s.id,
                        "treated": list(s.treated),
                        "children": list(s.children),
                        "singletons": list(s.singletons),
                        "members": sorted(s.members),
                    }
                    for s in strata
                ]
                for g, strata in sorted(self.levels.items())
            },
            "parent": dict(sorted(self.parent.items())),
            "cohort_of": {u: format_cohort(g) for u, g in sorted(self.cohort_of.items())},
            "unused": list(self.unused),
            "objectives": {str(g): v for g, v in sorted(self.objectives.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NestedDesign":
        levels = {
            int(g): tuple(
                NestedStratum(
                    id=s["id"], level=int(g), treated=tuple(s["treated"]),
                    children=tuple(s["children"]), singletons=tuple(s["singletons"]),
                    members=frozenset(s["members"]),
                )
                for s in strata
            )
            for g, strata in d["levels"].items()
        }
        cohort_of = {u: (NEVER if v in ("inf", None) else float(v)) for u, v in d["cohort_of"].items()}
        return cls(
            cohorts=tuple(d["cohorts"]),
            levels=levels,
            parent=dict(d["parent"]),
            cohort_of=cohort_of,
            unused=tuple(d.get("unused", ())),
            config=d.get("config", {}),
            objectives={int(g): v for g, v in d.get("objectives", {}).items()},
        )

    def config_hash(self) -> str:
        blob = json.dumps(self.config, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _resolve_cohorts(data: PanelDataset, cohorts: Sequence[int] | None) -> list[int]:
    present = data.cohorts()
    if cohorts is None:
        if not present:
            raise EmptyCohort("panel has no treated cohort")
        cohorts = list(range(1, max(present) + 1))
    cohorts = sorted(int(g) for g in cohorts)
    if cohorts != list(range(1, cohorts[-1] + 1)):
        raise ValueError(f"cohorts must be 1..G without gaps, got {cohorts}")
    if cohorts[-1] > data.t_max:
        raise ValueError(f"cohort {cohorts[-1]} is beyond the last period {data.t_max}")
    empty = [g for g in cohorts if g not in present]
    if empty:
        raise EmptyCohort(f"cohort(s) {empty} have no units")
    return cohorts


def run_rtnm(
    data: PanelDataset,
    cohorts: Sequence[int] | None = None,
    spec: DistanceSpec | None = None,
    bounds: MatchBounds | None = None,
    seed: int = 0,
) -> NestedDesign:
    """Build the nested design for cohorts ``1..G`` (all cohorts by default)."""
    spec = spec or DistanceSpec()
    bounds = bounds or MatchBounds()
    cohorts = _resolve_cohorts(data, cohorts)
    G = cohorts[-1]
    adoption = data.adoption
    ids = np.array(data.unit_ids, dtype=object)
    cohort_of = {u: float(g) for u, g in zip(data.unit_ids, adoption)}

    treated = [str(u) for u in ids[adoption == G]]
    comps = [str(u) for u in ids[adoption > G]]
    if not comps:
        raise EmptyCohort(f"no units remain untreated after cohort {G}")
    metric = fit_metric(data, G, treated + comps, spec)
    dm = build_distance_matrix(metric, treated, comps)
    sol = solve_full_match(FullMatchProblem(dm, bounds, allow_surplus=True), seed=seed)
    levels: dict[int, tuple[NestedStratum, ...]] = {}
    objectives = {G: sol.objective}
    levels[G] = tuple(
        NestedStratum(
            id=f"{G}.{k}", level=G,
            treated=tuple(treated[r] for r in s.treated),
            children=(),
            singletons=tuple(comps[c] for c in s.comparisons),
            members=frozenset(treated[r] for r in s.treated) | {comps[c] for c in s.comparisons},
        )
        for k, s in enumerate(sol.strata)
    )
    carried = [comps[c] for c in sol.unmatched]
    if carried:
        log.info("level %d: %d comparison units exceed the bounds and are carried back", G, len(carried))
    parent: dict[str, str] = {}

    for g in reversed(cohorts[:-1]):
        treated = [str(u) for u in ids[adoption == g]]
        pool = treated + [str(u) for u in ids[adoption > g]]
        metric = fit_metric(data, g, pool, spec)
        inner = levels[g + 1]
        dm = build_distance_matrix(
            metric, treated, [sorted(s.members) for s in inner], labels=[s.id for s in inner]
        )
        try:
            sol = solve_full_match(FullMatchProblem(dm, bounds), seed=seed + g)
        except Infeasible as exc:
            raise Infeasible(f"level {g}: {exc}") from None
        objectives[g] = sol.objective

        attach: dict[int, list[str]] = {}
        if carried:
            attach, carried = _attach_carried(metric, treated, sol, carried, bounds, seed + g)
            objectives[g] += sum(
                metric.unit_distance(treated[sol.strata[k].treated[0]], u)
                for k, us in attach.items() for u in us
            )

        strata = []
        for k, s in enumerate(sol.strata):
            sid = f"{g}.{k}"
            kids = tuple(inner[c].id for c in s.comparisons)
            singles = tuple(attach.get(k, ()))
            members = set(treated[r] for r in s.treated) | set(singles)
            for c in s.comparisons:
                members |= inner[c].members
                parent[inner[c].id] = sid
            strata.append(NestedStratum(
                id=sid, level=g, treated=tuple(treated[r] for r in s.treated),
                children=kids, singletons=singles, members=frozenset(members),
            ))
        levels[g] = tuple(strata)

    config = {
        "metric": spec.metric,
        "ridge": spec.ridge,
        "bounds": bounds.to_dict(),
        "seed": int(seed),
        "cohorts": list(cohorts),
    }
    return NestedDesign(
        cohorts=tuple(cohorts),
        levels=dict(sorted(levels.items())),
        parent=parent,
        cohort_of=cohort_of,
        unused=tuple(sorted(carried)),
        config=config,
        objectives=objectives,
    )


def _attach_carried(metric, treated, sol, carried, bounds, seed):
    # carried singletons may only join strata centred on one treated unit, so
    # every stratum still contains a pseudo-control from the later levels
    _, a, _ = bounds.caps(len(treated), len(sol.strata) + len(carried))
    hosts = [k for k, s in enumerate(sol.strata) if len(s.treated) == 1 and len(s.comparisons) < a]
    if not hosts:
        return {}, carried
    capacity = [a - len(sol.strata[k].comparisons) for k in hosts]
    cost = metric.unit_distances([treated[sol.strata[k].treated[0]] for k in hosts], carried)
    pairs = solve_transport(cost, capacity, seed=seed)
    attach: dict[int, list[str]] = {}
    used = set()
    for r, c in pairs:
        attach.setdefault(hosts[r], []).append(carried[c])
        used.add(c)
    for k in attach:
        attach[k].sort()
    rest = [u for c, u in enumerate(carried) if c not in used]
    return attach, rest


# ---------------------------------------------------------------------------
# verification


@dataclass
class Violation:
    kind: str
    stratum: str
    detail: str


@dataclass
class NestedDiagnostics:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def of_kind(self, kind: str) -> list[Violation]:
        return [v for v in self.violations if v.kind == kind]

    def summary(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for v in self.violations:
            out[v.kind] = out.get(v.kind, 0) + 1
        return out


def verify_nested(design: NestedDesign) -> NestedDiagnostics:
    """Check nesting, cohort coverage and disjointness; report, never raise."""
    diag = NestedDiagnostics()
    add = lambda kind, sid, detail: diag.violations.append(Violation(kind, sid, detail))  # noqa: E731
    cohorts = sorted(design.cohorts)
    G = cohorts[-1]
    cohort_of = design.cohort_of
    by_level = design.levels

    for g in cohorts:
        strata = by_level.get(g, ())
        if not strata:
            add("coverage", f"level {g}", "level has no strata")
            continue
        seen: dict[str, str] = {}
        for s in strata:
            for u in s.members:
                if u in seen:
                    add("disjointness", s.id, f"unit {u} also in {seen[u]}")
                seen[u] = s.id
            spanned = {cohort_of.get(u) for u in s.members}
            missing = [c for c in range(g, G + 1) if float(c) not in spanned]
            if missing:
                add("coverage", s.id, f"no unit from cohort(s) {missing}")
            if not any(cohort_of.get(u, NEVER) > g for u in s.members):
                add("coverage", s.id, "no comparison unit")
            if any(cohort_of.get(u) != g for u in s.treated):
                add("coverage", s.id, "treated list contains units outside the cohort")

    # nesting: each inner stratum has exactly one containing stratum one level up
    for g in cohorts[1:]:
        outer = {s.id: s for s in by_level.get(g - 1, ())}
        for s in by_level.get(g, ()):
            pid = design.parent.get(s.id)
            if pid is None or pid not in outer:
                add("nesting", s.id, f"no parent at level {g - 1}")
                continue
            if not s.members <= outer[pid].members:
                add("nesting", s.id, f"not contained in its parent {pid}")
            containing = [o.id for o in outer.values() if s.members <= o.members]
            if len(containing) > 1:
                add("nesting", s.id, f"contained in several level-{g - 1} strata: {containing}")

    # every unit of an analyzed cohort sits in exactly one outermost stratum
    counts: dict[str, int] = {}
    for s in by_level.get(cohorts[0], ()):
        for u in s.members:
            counts[u] = counts.get(u, 0) + 1
    for u, g in cohort_of.items():
        if not is_never(g) and int(g) in cohorts and counts.get(u, 0) != 1:
            add("disjointness", "outermost", f"unit {u} of cohort {int(g)} appears {counts.get(u, 0)} times")
    return diag
