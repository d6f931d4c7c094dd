"""Exception types raised across the package."""


class KinUQError(Exception):
    """Base class for all package errors."""


class InvalidInputError(KinUQError, ValueError):
    pass


class DegenerateStateError(KinUQError, ValueError):
    """Moments requested from a distribution with nonpositive mass."""


class ConfigurationError(KinUQError, ValueError):
    pass


class GridMismatchError(KinUQError, ValueError):
    pass


class CommonRandomNumberError(KinUQError, ValueError):
    """Fidelities were evaluated on different random inputs."""


class SampleEvaluationError(KinUQError, RuntimeError):
    def __init__(self, sample_id, cause):
        super().__init__(f"evaluator failed on sample {sample_id}: {cause!r}")
        self.sample_id = sample_id
        self.cause = cause


class BracketingError(KinUQError, ValueError):
    def __init__(self, mus, values):
        pairs = ", ".join(f"J({m:.6g})={v:.6g}" for m, v in zip(mus, values))
        super().__init__(f"no interior minimum in bracket: {pairs}")
        self.mus = tuple(mus)
        self.values = tuple(values)


class NonFiniteLossError(KinUQError, FloatingPointError):
    def __init__(self, message, point_index=None):
        super().__init__(message if point_index is None else f"{message} (collocation point {point_index})")
        self.point_index = point_index


class DivergenceError(KinUQError, RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history
