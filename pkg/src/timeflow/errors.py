"""Exception types raised across the package."""


class TimeFlowError(Exception):
    """Base class for package-specific failures."""


class FormatError(TimeFlowError, ValueError):
    """File exists but is not a volume we can ingest (wrong dims, datatype, magic)."""


class DimensionMismatchError(TimeFlowError, ValueError):
    """Grids that must share a shape do not."""


class DegenerateImageError(TimeFlowError, ValueError):
    """Image has no usable intensity range (constant, or empty foreground)."""


class EmptyMaskError(TimeFlowError, ValueError):
    """A mask-restricted operation received a mask with no voxels."""


class FlatObjectiveError(TimeFlowError, RuntimeError):
    """Time inference cannot distinguish candidate timepoints (objective is flat)."""


class IntervalMismatchError(TimeFlowError, ValueError):
    """Visit triplet intervals differ too much for a prospective rate estimate."""


class TrainingDivergedError(TimeFlowError, RuntimeError):
    """Loss became non-finite; diagnostics are dumped next to the run outputs."""
