"""Exception types shared across the package."""


class CfmError(Exception):
    """Base class for all errors raised by this package."""


class OutOfSupport(CfmError):
    """An instance cannot be abducted because a noise inversion is undefined."""


class SingularDesign(CfmError):
    """Least-squares design matrix is rank deficient."""


class NonzeroRadius(CfmError):
    pass


class ShapeMismatch(CfmError, ValueError):
    pass


class StaleCache(CfmError):
    """Backward pass called without a matching forward cache."""


class LengthMismatch(CfmError, ValueError):
    pass


class DegenerateBatch(CfmError):
    pass


class NonpositiveDelta(CfmError, ValueError):
    pass


class EmptyTestSet(CfmError):
    pass


class MissingLevel(CfmError):
    pass


class EmptyReport(CfmError):
    pass


class NotDifferentiable(CfmError):
    """The SCM does not provide partial derivatives for its equations."""


class ConfigError(CfmError):
    pass


class ConfigParse(ConfigError):
    """Configuration file is not valid JSON."""


class MissingFile(ConfigError):
    pass
