"""Exception hierarchy shared across the package.

Every error a caller is expected to catch derives from PhswarmError so the
CLI can map failures onto its exit codes in one place.
"""


class PhswarmError(Exception):
    """Base class for all package errors."""


class DimensionError(PhswarmError):
    """Shape or robot-count mismatch.

    Raised both for plain matrix-shape bugs and for the documented case of
    evaluating a fixed-width baseline policy (MLP/MSA) at a robot count it was
    not built for.
    """


class ContractError(PhswarmError):
    """An API precondition was violated (e.g. non-scalar gradient root)."""


class InvariantError(PhswarmError):
    """A structural invariant failed at runtime (skewness, PSD, finiteness)."""


class MatchingError(PhswarmError):
    """The input gain is rank-deficient; the matching control law is undefined."""


class IntegrationError(PhswarmError):
    """Integration produced a non-finite state."""


class StateError(PhswarmError):
    """An operation was called in an invalid state (e.g. sampling an empty buffer)."""


class ConfigError(PhswarmError):
    """Invalid or unknown run configuration."""


class ArtifactError(PhswarmError):
    """A checkpoint or metrics artifact could not be read or written."""
