"""
Error types - one family per pipeline failure, each with its own exit code.

The CLI turns any FloorspaceError into a single JSON error line on stderr
and exits with the family's code.
"""

from typing import Any, Dict


class FloorspaceError(Exception):
    """Base class for every error the pipeline raises on purpose"""

    exit_code = 1

    def to_record(self) -> Dict[str, Any]:
        """Machine-readable error record (one JSON line on stderr)"""
        return {
            "error": type(self).__name__,
            "code": self.exit_code,
            "message": str(self),
        }


class ConfigError(FloorspaceError):
    """Configuration failed schema validation"""

    exit_code = 2


class MissingInputError(FloorspaceError):
    """A declared input file or directory does not exist"""

    exit_code = 3


class ValidationError(FloorspaceError):
    """Input data violates a domain invariant (polygon, mask, height...)"""

    exit_code = 4


class FormatError(FloorspaceError):
    """Binary container (FSR1 / FSM1) could not be decoded"""

    exit_code = 5


class BadMagicError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class UnknownDtypeError(FormatError):
    pass


class BoundsError(FloorspaceError):
    """Pixel window falls outside the raster"""

    exit_code = 6


class AlignmentError(FloorspaceError):
    """Rasters do not share a grid or do not overlap"""

    exit_code = 7


class IngestError(FloorspaceError):
    """Compositing could not produce an image"""

    exit_code = 8


class ConditioningError(FloorspaceError):
    """Band statistics are unusable or inconsistent"""

    exit_code = 9


class DatasetError(FloorspaceError):
    exit_code = 10


class ShapeError(FloorspaceError):
    """Tensor shape incompatible with the model configuration"""

    exit_code = 11


class TrainingDivergedError(FloorspaceError):
    exit_code = 12


class UnsupportedVariantError(FloorspaceError):
    exit_code = 13


class DegenerateMapError(FloorspaceError):
    """Residual map has zero spread and cannot be scaled"""

    exit_code = 14


class GradientCheckFailed(FloorspaceError):
    exit_code = 15


class InternalError(FloorspaceError):
    """Unexpected failure with no error family of its own"""

    exit_code = 70

    @classmethod
    def wrap(cls, error: BaseException) -> "InternalError":
        return cls(f"{type(error).__name__}: {error}")


# click usage errors (unknown option, missing argument) exit with this code
USAGE_EXIT_CODE = 64
