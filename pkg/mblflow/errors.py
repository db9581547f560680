"""Domain errors raised by the flow, the oracle and the ensemble driver.

Input contract violations use the built-in ``ValueError``/``TypeError``/
``IndexError``; the classes below cover failures of the numerical machinery.
"""


class SizeCapError(ValueError):
    """A dense 2^n construction was requested beyond the configured site cap."""


class EigensolverError(RuntimeError):
    """The dense symmetric eigensolver failed to converge."""


class OrthogonalityError(RuntimeError):
    """A rotation built from a generator lost orthogonality."""


class SpectrumDriftError(RuntimeError):
    """The effective Hamiltonian's spectrum moved away from the original one."""


class LevelCrossingError(RuntimeError):
    """Two tracked levels are degenerate or swap inside a finite-difference stencil."""


class BlockInvariantError(RuntimeError):
    """A block decomposition violates disjointness, diameter or separation rules."""


class EnsembleFailureError(RuntimeError):
    """Too many realizations of an ensemble run raised an error."""
