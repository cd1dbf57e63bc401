"""Exception types raised by the engine modules."""


class SkullEngineError(Exception):
    """Base class for every error the engine raises on purpose."""


class InvalidArgumentError(SkullEngineError, ValueError):
    pass


class DegenerateGeometryError(SkullEngineError):
    pass


class EmptyRoiError(SkullEngineError):
    pass


class GeometryMismatchError(SkullEngineError):
    pass


class VolumeFormatError(SkullEngineError):
    pass


class ConfigurationError(SkullEngineError):
    pass


class DivergenceError(SkullEngineError):
    def __init__(self, message, batch_id=None):
        super().__init__(message)
        self.batch_id = batch_id


class StructuralMismatchError(SkullEngineError):
    pass


class InvalidTargetError(SkullEngineError, ValueError):
    pass


class ShapeError(SkullEngineError, ValueError):
    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class MissingLandmarkError(SkullEngineError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__(f"required landmark(s) absent: {', '.join(self.missing)}")


class EmptyMaskError(SkullEngineError):
    pass


class PhantomSpecError(SkullEngineError):
    pass


class BundleError(SkullEngineError):
    pass
