class LumosError(Exception):
    """Base class for every error raised by this package"""


class TensorFormatError(LumosError):
    """A LUMT tensor file could not be decoded"""


class BadMagicError(TensorFormatError):
    pass


class UnsupportedVersionError(TensorFormatError):
    pass


class DtypeMismatchError(TensorFormatError):
    pass


class TruncatedFileError(TensorFormatError):
    pass


class ZeroRankError(TensorFormatError, ValueError):
    pass


class ImageFormatError(LumosError):
    """PNG is readable but not 8-bit RGB"""


class ImageDecodeError(LumosError):
    pass


class PlyFormatError(LumosError):
    """PLY vertex layout is not a Gaussian splat layout"""


class EmptySceneError(LumosError, ValueError):
    pass


class ShapeMismatchError(LumosError, ValueError):
    pass


class EmptySelectionError(LumosError, ValueError):
    """A reduction was asked to run over zero valid elements"""


class BehindCameraError(LumosError):
    pass


class ModeMismatchError(LumosError, ValueError):
    pass


class SHDegreeError(LumosError, ValueError):
    pass


class ConfigError(LumosError, ValueError):
    pass


class NumericalError(LumosError, ArithmeticError):
    pass


class UsageError(LumosError):
    pass


class CameraFormatError(LumosError):
    """Camera JSON is not a list of pinhole views"""
