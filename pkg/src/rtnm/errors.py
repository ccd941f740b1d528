"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line can map failures to
stable process exit statuses.
"""

from __future__ import annotations


class RTNMError(Exception):
    exit_code = 1


# panel ingestion / validation
class PanelError(RTNMError, ValueError):
    exit_code = 10


class MissingCell(PanelError):
    exit_code = 11


class DuplicateRow(PanelError):
    exit_code = 12


class TreatmentReversal(PanelError):
    exit_code = 13


class PreperiodTreatment(PanelError):
    exit_code = 14


class SchemaError(PanelError):
    exit_code = 15


class ZeroVariance(PanelError):
    exit_code = 16


# distances and matching
class MatchingError(RTNMError):
    exit_code = 20


class SingularCovariance(MatchingError):
    exit_code = 21


class UnknownUnit(MatchingError, KeyError):
    exit_code = 22


class EmptyStratum(MatchingError, ValueError):
    exit_code = 23


class Infeasible(MatchingError):
    exit_code = 24


class CostOverflow(MatchingError):
    exit_code = 25


class EmptyCohort(MatchingError):
    exit_code = 26


# estimation
class EstimationError(RTNMError):
    exit_code = 30


class EmptyCell(EstimationError):
    exit_code = 31


class MissingOutcome(EstimationError):
    exit_code = 32


# inference
class InferenceError(RTNMError):
    exit_code = 40


class NoBlockContributions(InferenceError):
    exit_code = 41


class IndexMismatch(InferenceError):
    exit_code = 42


class TooFewCells(InferenceError):
    exit_code = 43


class SingularContrastCovariance(InferenceError):
    exit_code = 44


# simulation
class DegenerateCohort(RTNMError):
    exit_code = 50


EXIT_CODES = {
    cls.__name__: cls.exit_code
    for cls in (
        RTNMError, PanelError, MissingCell, DuplicateRow, TreatmentReversal,
        PreperiodTreatment, SchemaError, ZeroVariance, MatchingError,
        SingularCovariance, UnknownUnit, EmptyStratum, Infeasible, CostOverflow,
        EmptyCohort, EstimationError, EmptyCell, MissingOutcome, InferenceError,
        NoBlockContributions, IndexMismatch, TooFewCells,
        SingularContrastCovariance, DegenerateCohort,
    )
}
