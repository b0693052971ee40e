"""Exception hierarchy shared across the package."""


class MorphMeshError(Exception):
    """Base class for all domain failures raised by morphmesh."""


class NonUnitQuaternion(MorphMeshError, ValueError):
    pass


class InitFitFailure(MorphMeshError):
    """Projection onto the constraint manifold did not converge."""


class SingularActuation(MorphMeshError):
    """The selected actuated rows no longer span the feasible motions."""


class NoFullRankPattern(MorphMeshError):
    pass


class ParseError(MorphMeshError, ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset
        self.reason = message


class EvalError(MorphMeshError, ArithmeticError):
    pass


class UnknownShape(MorphMeshError, KeyError):
    pass


class AntipodalNormal(MorphMeshError):
    pass


class SingularMatrix(MorphMeshError, ArithmeticError):
    pass


class MaxIterations(MorphMeshError):
    def __init__(self, message, x=None):
        super().__init__(message)
        self.x = x


class IntegratorStepFailure(MorphMeshError):
    pass


class ConfigError(MorphMeshError, ValueError):
    def __init__(self, message, path=""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
