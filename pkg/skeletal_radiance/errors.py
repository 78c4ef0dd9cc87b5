"""
Exception hierarchy shared by every module of the package
"""


class SkeletalRadianceError(Exception):
    """Base class for all package errors"""


class DimensionError(SkeletalRadianceError, ValueError):
    """Tensor or image shapes do not fit an operation"""


class GeometryError(SkeletalRadianceError, ValueError):
    """Invalid camera, rotation, direction or vertex set"""


class BehindCameraError(GeometryError):
    """A point projects from behind the image plane"""


class OutOfImageError(GeometryError):
    """A pixel lies outside the image rectangle"""


class RenderError(SkeletalRadianceError, ValueError):
    """Invalid ray bounds, compositing inputs or metric inputs"""


class DatasetError(SkeletalRadianceError, OSError):
    """Missing or corrupt dataset files, or a frame index out of range"""


class ConfigError(SkeletalRadianceError, ValueError):
    """Invalid configuration value or key"""


class CheckpointError(SkeletalRadianceError):
    """Checkpoint file does not match the expected format or architecture"""

    def __init__(self, message, missing=(), extra=()):
        self.missing = sorted(missing)
        self.extra = sorted(extra)
        details = []
        if self.missing:
            details.append("missing: " + ", ".join(self.missing))
        if self.extra:
            details.append("unexpected: " + ", ".join(self.extra))
        if details:
            message = f"{message} ({'; '.join(details)})"
        super().__init__(message)


class NonFiniteLossError(SkeletalRadianceError, ArithmeticError):
    """Training produced a NaN or infinite loss"""

    def __init__(self, message, diagnostic=None):
        self.diagnostic = diagnostic or {}
        super().__init__(message)


class ProtocolError(SkeletalRadianceError, ValueError):
    """Evaluation split does not satisfy the protocol's disjointness rules"""
