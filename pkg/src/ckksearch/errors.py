"""Exception hierarchy shared by every stage of the search engine."""

from __future__ import annotations


class CkksearchError(Exception):
    """Base class for all package errors."""


class InputError(CkksearchError):
    """Malformed or inconsistent user input (CLI exit code 2)."""


class SchemaError(InputError):
    """A document is missing a required field or carries an unknown one."""


class UnknownKind(SchemaError):
    """A layer declares a kind outside the supported set."""


class ShapeMismatch(InputError):
    """Consecutive layers disagree on tensor shapes."""


class ConfigError(InputError):
    """A run-config document violates its invariants."""


class BatchShapeMismatch(InputError):
    """Calibration batch does not match the model input shape."""


class InvariantViolation(CkksearchError):
    """A configuration (or a patch result) breaks a structural invariant."""


class ScopeViolation(CkksearchError):
    """A layer-scoped agent tried to edit a global field."""


class MaskViolation(CkksearchError):
    """A patch would increase depth on a layer protected by the depth mask."""


class UnsupportedRing(CkksearchError):
    """Ring dimension outside the security table."""


class Infeasible(CkksearchError):
    """No bootstrap placement can make the graph fit the modulus chain."""


class ZeroCost(CkksearchError):
    """Cost prediction over a graph whose every term is zero."""


class BackendUnavailable(CkksearchError):
    """The requested encrypted backend cannot run trials."""


class RecordedMiss(CkksearchError):
    """A recorded backend has no entry for the requested config."""


class NoFeasibleRegime(CkksearchError):
    """Every cold-start candidate was pruned."""


class CorruptTrace(CkksearchError):
    """A trace file failed checksum or structural verification."""
