"""Exception types shared across the toolkit."""


class MaskRepairError(Exception):
    """Base class for all toolkit errors."""


class InvalidWindowError(MaskRepairError):
    """Intensity window with lo >= hi."""


class InvalidResolutionError(MaskRepairError):
    """Grid resolution below the supported minimum."""


class NoForegroundError(MaskRepairError):
    """An operation that needs foreground voxels got an empty mask."""


class ShapeMismatchError(MaskRepairError):
    """Two grids that must agree in shape (or spacing) do not."""


class FormatError(MaskRepairError):
    """A persisted file (volume, checkpoint, manifest) is malformed."""


class UnknownCaseError(MaskRepairError):
    """A case id is not present in the checkpoint latent table."""


class NumericError(MaskRepairError):
    """A non-finite value appeared; carries the offending tensor name."""

    def __init__(self, message, tensor=None):
        super().__init__(message)
        self.tensor = tensor


class BandUnreachableError(MaskRepairError):
    """Distortion rejection sampling ran out of attempts.

    Carries the attempt whose Dice came closest to the target band.
    """

    def __init__(self, message, best_mask=None, best_dice=None):
        super().__init__(message)
        self.best_mask = best_mask
        self.best_dice = best_dice


class TrainingAborted(MaskRepairError):
    """Training hit a non-finite loss; carries the last good checkpoint."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class PhaseError(MaskRepairError):
    """An experiment phase failed; carries the phase name."""

    def __init__(self, phase, message=""):
        super().__init__(f"phase '{phase}' failed" + (f": {message}" if message else ""))
        self.phase = phase
