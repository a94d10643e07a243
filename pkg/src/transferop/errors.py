"""Exception hierarchy.

Every error raised on purpose by this package derives from
:class:`TransferOpError`. The CLI maps these to exit code 3 unless the
failure was detected while validating user input (exit code 2).
"""


class TransferOpError(Exception):
    """Base class for all package errors."""


class InvalidMatrix(TransferOpError):
    """A matrix contains non-finite entries or has the wrong structure."""


class RankZero(TransferOpError):
    """Every eigenvalue of a mass matrix fell below the rank cutoff."""


class InvalidShape(TransferOpError):
    """Array shapes are inconsistent with the operation's contract."""


class UnsupportedActivation(TransferOpError):
    """The activation lacks the derivatives an operation needs."""


class UnsupportedDepth(TransferOpError):
    """The operation is only defined for single-layer feature maps."""


class TrajectoryDiverged(TransferOpError):
    """A simulated trajectory produced non-finite values."""

    def __init__(self, step, message=None):
        self.step = int(step)
        super().__init__(message or f"trajectory diverged at step {self.step}")


class InsufficientData(TransferOpError):
    """Not enough samples to build the requested dataset."""


class UnknownSystem(TransferOpError):
    """A built-in system name was not recognised."""


class InvalidDomain(TransferOpError):
    """A sampling box is empty or malformed."""


class ModeMismatch(TransferOpError):
    """The dataset does not fit the requested operator (pairs vs. samples)."""


class DivergedTraining(TransferOpError):
    """The iterative trainer produced a non-finite loss."""

    def __init__(self, epoch, message=None):
        self.epoch = int(epoch)
        super().__init__(message or f"training diverged at epoch {self.epoch}")


class EnsembleFailed(TransferOpError):
    """Fewer than two ensemble members could be fitted."""


class ClusteringFailed(TransferOpError):
    """All k-means restarts ended with an empty cluster."""


class DegenerateFunction(TransferOpError):
    """A function has zero variance on the evaluation points."""


class FormatError(TransferOpError):
    """A binary or text artifact could not be parsed."""
