"""Balanced staggered-adoption panels: storage, CSV ingestion and balance checks."""

from __future__ import annotations

import io
import json
import math
import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import IO, Iterable, Mapping

import numpy as np
import pandas as pd

from .errors import (
    DuplicateRow,
    MissingCell,
    MissingOutcome,
    PreperiodTreatment,
    SchemaError,
    TreatmentReversal,
    UnknownUnit,
    ZeroVariance,
)

#: Cohort label of units never treated during periods 1..T. Sorts after every
#: finite adoption period.
NEVER = math.inf

_NEVER_TOKENS = {"", "inf", "Inf", "INF", "nan", "NaN"}


def is_never(g) -> bool:
    return g is None or (isinstance(g, float) and math.isinf(g))


def format_cohort(g) -> str:
    return "inf" if is_never(g) else str(int(g))


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Unit x period grid of covariates, outcomes and adoption periods.

    Arrays are indexed by unit position (order of ``unit_ids``) and by period
    position ``t - t0`` for ``t = t0 .. t_max``.  ``adoption`` holds the first
    treated period ``G_i`` as a float, with :data:`NEVER` (``inf``) for units
    that are never treated.  Outcomes are optional (design-only panels carry
    none) and may be ``NaN`` in pre-periods ``t <= 0``.
    """

    unit_ids: tuple[str, ...]
    t0: int
    t_max: int
    covariates: np.ndarray
    adoption: np.ndarray
    covariate_names: tuple[str, ...]
    outcomes: np.ndarray | None = None

    def __post_init__(self):
        unit_ids = tuple(str(u) for u in self.unit_ids)
        object.__setattr__(self, "unit_ids", unit_ids)
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        if not self.t0 <= 0 < 1 <= self.t_max:
            raise SchemaError(f"need t0 <= 0 < 1 <= T, got t0={self.t0}, T={self.t_max}")
        n, n_per = len(unit_ids), self.t_max - self.t0 + 1
        if len(set(unit_ids)) != n:
            raise DuplicateRow("unit identifiers are not unique")

        cov = np.array(self.covariates, dtype=float)
        if cov.ndim == 2:
            cov = cov[:, :, None]
        if cov.shape != (n, n_per, len(self.covariate_names)):
            raise SchemaError(
                f"covariates have shape {cov.shape}, expected "
                f"{(n, n_per, len(self.covariate_names))}"
            )
        # the final period's covariates never enter a matching window
        gaps = np.argwhere(np.isnan(cov[:, :-1, :]))
        if len(gaps):
            i, p, k = gaps[0]
            raise MissingCell(
                f"unit {unit_ids[i]} has no value for covariate "
                f"{self.covariate_names[k]!r} at period {self.t0 + p}"
            )

        adoption = np.array(self.adoption, dtype=float)
        if adoption.shape != (n,):
            raise SchemaError("adoption must have one entry per unit")
        finite = np.isfinite(adoption)
        if np.any(finite & (adoption <= 0)):
            i = int(np.argmax(finite & (adoption <= 0)))
            raise PreperiodTreatment(
                f"unit {unit_ids[i]} is treated at period {adoption[i]:g} <= 0"
            )
        if np.any(finite & ((adoption > self.t_max) | (adoption != np.round(adoption)))):
            raise SchemaError("adoption periods must be integers in 1..T or never")
        if np.any(np.isnan(adoption)):
            raise SchemaError("adoption contains NaN; use inf for never-treated")

        out = self.outcomes
        if out is not None:
            out = np.array(out, dtype=float)
            if out.shape != (n, n_per):
                raise SchemaError(f"outcomes have shape {out.shape}, expected {(n, n_per)}")
            gaps = np.argwhere(np.isnan(out[:, 1 - self.t0:]))
            if len(gaps):
                i, p = gaps[0]
                raise MissingCell(f"unit {unit_ids[i]} has no outcome at period {p + 1}")
            out.flags.writeable = False

        cov.flags.writeable = False
        adoption.flags.writeable = False
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "adoption", adoption)
        object.__setattr__(self, "outcomes", out)

    @property
    def n_units(self) -> int:
        return len(self.unit_ids)

    @property
    def n_covariates(self) -> int:
        return len(self.covariate_names)

    @property
    def periods(self) -> range:
        return range(self.t0, self.t_max + 1)

    @cached_property
    def _positions(self) -> dict[str, int]:
        return {u: i for i, u in enumerate(self.unit_ids)}

    def position(self, unit) -> int:
        try:
            return self._positions[str(unit)]
        except KeyError:
            raise UnknownUnit(f"unknown unit {unit!r}") from None

    def positions(self, units: Iterable) -> np.ndarray:
        return np.fromiter((self.position(u) for u in units), dtype=np.intp)

    def cohorts(self) -> list[int]:
        """Finite adoption periods present, ascending."""
        finite = self.adoption[np.isfinite(self.adoption)]
        return sorted(int(g) for g in np.unique(finite))

    def cohort_of(self, unit) -> float:
        return float(self.adoption[self.position(unit)])

    def treatment_path(self) -> np.ndarray:
        """Z_it = 1{t >= G_i} for t = 1..T, shape (n_units, T)."""
        t = np.arange(1, self.t_max + 1)
        return (t[None, :] >= self.adoption[:, None]).astype(np.int8)

    def windows(self, g: int, positions: np.ndarray | None = None) -> np.ndarray:
        """Flattened covariate histories X_{t0:(g-1)} for many units at once."""
        if not 1 <= g <= self.t_max:
            raise ValueError(f"cohort period {g} outside 1..{self.t_max}")
        cov = self.covariates if positions is None else self.covariates[positions]
        return cov[:, : g - self.t0, :].reshape(cov.shape[0], -1)

    def outcome(self, t: int, positions: np.ndarray | None = None) -> np.ndarray:
        if self.outcomes is None:
            raise MissingOutcome("panel was loaded without an outcome column")
        if not self.t0 <= t <= self.t_max:
            raise MissingOutcome(f"period {t} outside the panel")
        y = self.outcomes[:, t - self.t0]
        y = y if positions is None else y[positions]
        if np.any(np.isnan(y)):
            raise MissingOutcome(f"outcome missing at period {t}")
        return y

    def without_outcomes(self) -> "PanelDataset":
        return PanelDataset(
            self.unit_ids, self.t0, self.t_max, self.covariates, self.adoption,
            self.covariate_names, None,
        )

    def with_outcomes(self, outcomes: np.ndarray) -> "PanelDataset":
        return PanelDataset(
            self.unit_ids, self.t0, self.t_max, self.covariates, self.adoption,
            self.covariate_names, outcomes,
        )


def covariate_window(data: PanelDataset, unit, g: int) -> np.ndarray:
    """Covariate history of ``unit`` over periods t0..g-1, period-major.

    Length is ``(g - t0) * n_covariates``; the window for ``g`` is a prefix of
    the window for any later ``g'``.
    """
    return data.windows(g, np.array([data.position(unit)]))[0]


# ---------------------------------------------------------------------------
# CSV ingestion


@dataclass(frozen=True)
class Schema:
    """Maps logical roles to CSV column names.

    Exactly one of ``first_treated`` and ``treatment`` names the adoption
    column.  ``outcome=None`` loads a design-only panel.  ``covariates=None``
    takes every remaining column.
    """

    unit: str = "unit"
    period: str = "period"
    outcome: str | None = "outcome"
    first_treated: str | None = "first_treated"
    treatment: str | None = None
    covariates: tuple[str, ...] | None = None

    def __post_init__(self):
        if (self.first_treated is None) == (self.treatment is None):
            raise SchemaError("schema needs exactly one of 'first_treated' or 'treatment'")
        if self.covariates is not None:
            object.__setattr__(self, "covariates", tuple(self.covariates))

    @classmethod
    def from_mapping(cls, mapping: Mapping) -> "Schema":
        known = {"unit", "period", "outcome", "first_treated", "treatment", "covariates"}
        extra = set(mapping) - known - {"schema_version"}
        if extra:
            raise SchemaError(f"unknown schema roles: {sorted(extra)}")
        kw = {k: mapping[k] for k in known if k in mapping}
        if "treatment" in kw and "first_treated" not in kw:
            kw["first_treated"] = None
        if "outcome" not in kw:
            kw["outcome"] = None
        return cls(**kw)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Schema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_mapping(json.load(fh))

    def to_mapping(self) -> dict:
        out = {"unit": self.unit, "period": self.period, "outcome": self.outcome}
        if self.treatment is not None:
            out["treatment"] = self.treatment
        else:
            out["first_treated"] = self.first_treated
        out["covariates"] = None if self.covariates is None else list(self.covariates)
        return out


def _parse_first_treated(values: pd.Series) -> np.ndarray:
    out = np.empty(len(values))
    for k, v in enumerate(values.to_numpy()):
        s = str(v).strip() if not (isinstance(v, float) and np.isnan(v)) else ""
        if s in _NEVER_TOKENS:
            out[k] = NEVER
            continue
        try:
            out[k] = float(s)
        except ValueError:
            raise SchemaError(f"cannot parse adoption period {v!r}") from None
    return out


def load_panel(
    source: str | os.PathLike | IO[str],
    schema: Schema | Mapping | None = None,
) -> PanelDataset:
    """Read a long-format CSV (one row per unit and period) into a panel.

    Adoption is taken from a ``first_treated`` column (empty or ``inf`` means
    never treated; values beyond the last period also mean never treated
    within the window) or derived from a per-period 0/1 treatment flag as the
    first period flagged 1.
    """
    if schema is None:
        schema = Schema()
    elif not isinstance(schema, Schema):
        schema = Schema.from_mapping(schema)

    adopt_col = schema.first_treated or schema.treatment
    role_cols = [schema.unit, schema.period, adopt_col]
    if schema.outcome is not None:
        role_cols.append(schema.outcome)

    if hasattr(source, "read"):
        source = io.StringIO(source.read())
    columns = list(pd.read_csv(source, nrows=0).columns)
    if hasattr(source, "seek"):
        source.seek(0)
    if schema.covariates is None:
        excluded = set(role_cols) | {"outcome", "first_treated", "treated", "treatment"}
        cov_names = [c for c in columns if c not in excluded]
    else:
        cov_names = list(schema.covariates)
    missing = [c for c in role_cols + cov_names if c not in columns]
    if missing:
        raise SchemaError(f"columns missing from file: {missing}")
    if not cov_names:
        raise SchemaError("no covariate columns")

    usecols = role_cols + cov_names
    df = pd.read_csv(
        source, usecols=usecols, dtype={schema.unit: str, adopt_col: str},
        keep_default_na=False, na_values={c: [""] for c in usecols if c != adopt_col},
        float_precision="round_trip",
    )

    dup = df.duplicated([schema.unit, schema.period], keep=False)
    if dup.any():
        row = df[dup].iloc[0]
        raise DuplicateRow(f"duplicate row for unit {row[schema.unit]} at period {row[schema.period]}")

    periods = pd.to_numeric(df[schema.period], errors="raise")
    if not np.all(periods == np.round(periods)):
        raise SchemaError("periods must be integers")
    df[schema.period] = periods.astype(int)
    t0, t_max = int(df[schema.period].min()), int(df[schema.period].max())
    all_periods = np.arange(t0, t_max + 1)

    units = pd.unique(df[schema.unit])
    n, n_per = len(units), len(all_periods)
    full = pd.MultiIndex.from_product([units, all_periods], names=[schema.unit, schema.period])
    df = df.set_index([schema.unit, schema.period])
    absent = full.difference(df.index)
    if len(absent):
        u, t = absent[0]
        raise MissingCell(f"no row for unit {u} at period {t}")
    df = df.reindex(full)

    cov = df[cov_names].to_numpy(dtype=float).reshape(n, n_per, len(cov_names))
    outcomes = None
    if schema.outcome is not None:
        outcomes = df[schema.outcome].to_numpy(dtype=float).reshape(n, n_per)

    raw = df[adopt_col]
    if schema.first_treated is not None:
        g = _parse_first_treated(raw).reshape(n, n_per)
        for i in range(n):
            vals = g[i]
            if not (np.all(vals == vals[0])):
                raise SchemaError(f"unit {units[i]} has inconsistent {adopt_col} values")
        adoption = g[:, 0].copy()
        adoption[np.isfinite(adoption) & (adoption > t_max)] = NEVER
    else:
        flags = pd.to_numeric(raw, errors="coerce").to_numpy().reshape(n, n_per)
        if np.any(np.isnan(flags)) or not np.all(np.isin(flags, (0, 1))):
            raise SchemaError(f"treatment flag column {adopt_col!r} must be 0/1 with no gaps")
        adoption = _adoption_from_flags(flags, all_periods, units)

    return PanelDataset(
        unit_ids=tuple(str(u) for u in units),
        t0=t0,
        t_max=t_max,
        covariates=cov,
        adoption=adoption,
        covariate_names=tuple(cov_names),
        outcomes=outcomes,
    )


def _adoption_from_flags(flags: np.ndarray, periods: np.ndarray, units) -> np.ndarray:
    adoption = np.full(flags.shape[0], NEVER)
    for i, z in enumerate(flags):
        on = np.flatnonzero(z == 1)
        if on.size == 0:
            continue
        first = on[0]
        if periods[first] <= 0:
            raise PreperiodTreatment(
                f"unit {units[i]} is flagged treated at period {periods[first]} <= 0"
            )
        if np.any(z[first:] == 0):
            back = first + int(np.argmax(z[first:] == 0))
            raise TreatmentReversal(
                f"unit {units[i]} reverts from treated to untreated at period {periods[back]}"
            )
        adoption[i] = periods[first]
    return adoption


def panel_frame(data: PanelDataset) -> pd.DataFrame:
    """Long-format frame with columns unit, period, outcome, first_treated, covariates."""
    n, n_per = data.n_units, len(data.periods)
    frame = pd.DataFrame({
        "unit": np.repeat(np.array(data.unit_ids, dtype=object), n_per),
        "period": np.tile(np.arange(data.t0, data.t_max + 1), n),
    })
    if data.outcomes is not None:
        frame["outcome"] = data.outcomes.reshape(-1)
    frame["first_treated"] = np.repeat([format_cohort(g) for g in data.adoption], n_per)
    flat = data.covariates.reshape(n * n_per, -1)
    for k, name in enumerate(data.covariate_names):
        frame[name] = flat[:, k]
    return frame


def write_panel(data: PanelDataset, dest: str | os.PathLike | IO[str]) -> None:
    panel_frame(data).to_csv(dest, index=False, lineterminator="\n", na_rep="")


# ---------------------------------------------------------------------------
# balance diagnostics


@dataclass(frozen=True)
class BalanceReport:
    """Absolute standardized mean differences before and after matching.

    ``table`` has one row per (cohort, covariate, pre-period) with columns
    ``g, covariate, period, smd_before, smd_after``.
    """

    table: pd.DataFrame = field(repr=False)

    def share_below(self, threshold: float = 0.1, column: str = "smd_after") -> float:
        return float(np.mean(self.table[column].to_numpy() < threshold))

    def by_cohort(self) -> pd.DataFrame:
        return self.table.groupby("g")[["smd_before", "smd_after"]].mean()


def standardized_difference(
    x_treated: np.ndarray,
    x_control: np.ndarray,
    sd_pooled: float,
    w_control: np.ndarray | None = None,
) -> float:
    """|weighted mean difference| / pooled pre-matching SD."""
    diff = np.mean(x_treated) - np.average(x_control, weights=w_control)
    if sd_pooled == 0:
        if abs(diff) <= 1e-12:
            return 0.0
        raise ZeroVariance("covariate is constant within groups but differs between them")
    return float(abs(diff) / sd_pooled)


def balance_report(data: PanelDataset, design) -> BalanceReport:
    """Compare each cohort with its within-stratum comparison units.

    "Before" contrasts cohort ``g`` with every unit not yet treated at ``g``;
    "after" uses the level-``g`` strata, where each treated unit has weight 1
    and the comparison units of a stratum share its treated count equally.
    Both columns divide by the pooled pre-matching standard deviation.
    """
    rows = []
    adoption = data.adoption
    for g in design.cohorts:
        treated_pos, comp_pos, comp_w = [], [], []
        for s in design.levels[g]:
            comps = [u for u in s.members if design.cohort_of[u] > g]
            treated_pos.extend(data.positions(s.treated))
            comp_pos.extend(data.positions(comps))
            comp_w.extend([len(s.treated) / len(comps)] * len(comps))
        treated_pos = np.array(treated_pos)
        comp_pos = np.array(comp_pos)
        comp_w = np.array(comp_w)
        before_t = np.flatnonzero(adoption == g)
        before_c = np.flatnonzero(adoption > g)
        for p, t in enumerate(range(data.t0, g)):
            for k, name in enumerate(data.covariate_names):
                x = data.covariates[:, p, k]
                sd = math.sqrt((np.var(x[before_t], ddof=1) + np.var(x[before_c], ddof=1)) / 2) \
                    if len(before_t) > 1 else float(np.std(x[before_c], ddof=1))
                rows.append({
                    "g": g,
                    "covariate": name,
                    "period": t,
                    "smd_before": standardized_difference(x[before_t], x[before_c], sd),
                    "smd_after": standardized_difference(x[treated_pos], x[comp_pos], sd, comp_w),
                })
    return BalanceReport(pd.DataFrame(rows, columns=["g", "covariate", "period", "smd_before", "smd_after"]))
