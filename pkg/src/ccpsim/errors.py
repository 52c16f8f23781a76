"""Exception hierarchy shared by all modules.

Each class carries a diagnostic ``code`` so the command-line front end can
map failures onto exit statuses without string matching.
"""
from __future__ import annotations


class CCPSimError(Exception):
    code = "E_RUNTIME"
    exit_status = 4


class ConfigError(CCPSimError):
    """Invalid configuration or input data.

    ``path`` is the dotted field path (or file name) the problem was found at.
    """

    code = "E_CONFIG"
    exit_status = 2

    def __init__(self, path: str, message: str, code: str | None = None):
        self.path = path
        if code is not None:
            self.code = code
        super().__init__(f"[{self.code}] {path}: {message}")


class SchemaError(ConfigError):
    code = "E_SCHEMA"


class InvariantError(ConfigError):
    code = "E_INVARIANT"


class MissingFileError(ConfigError):
    code = "E_MISSING_FILE"


class UnknownCategoryError(ConfigError):
    code = "E_UNKNOWN_CATEGORY"


class InfeasibleAggregatesError(ConfigError):
    code = "E_INFEASIBLE_AGGREGATES"


class InfeasiblePositionsError(ConfigError):
    code = "E_INFEASIBLE_POSITIONS"


class RankDeficientError(ConfigError):
    code = "E_RANK_DEFICIENT"


class CalibrationError(CCPSimError):
    code = "E_CALIBRATION"
    exit_status = 3

    def __init__(self, message: str, members: list[str] | None = None):
        self.members = list(members or [])
        super().__init__(message)


class StaleInstrumentError(CCPSimError):
    code = "E_STALE_INSTRUMENT"


class WindDownError(CCPSimError):
    """Raised when fewer than two members survive at a CCP."""

    code = "E_WIND_DOWN"


class ReweightingError(CCPSimError):
    code = "E_REWEIGHT"


class PathError(CCPSimError):
    """A failure inside a simulated path, tagged with its seed."""

    def __init__(self, seed: int, path: int, cause: BaseException):
        self.seed = seed
        self.path = path
        self.cause = cause
        super().__init__(f"path {path} (seed {seed}): {cause}")
