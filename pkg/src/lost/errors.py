"""Exception types shared across the package."""


class LostError(Exception):
    """Base class for everything raised deliberately by this package."""


class ParameterError(LostError, ValueError):
    """An argument violates an operation's contract (shape, range, mode)."""


class ConfigError(LostError, ValueError):
    """A config file or config object is invalid or inconsistent."""


class DataError(LostError, ValueError):
    """Input data is unusable: corpus too short, token ids out of range."""


class StateError(LostError, RuntimeError):
    """An object is used outside its lifecycle, e.g. backward without a
    training-mode forward cache."""


class NonFiniteGradError(LostError, RuntimeError):
    """A gradient tensor contains NaN or inf; message names the tensor."""


class SvdConvergenceError(LostError, RuntimeError):
    """The SVD routine hit its iteration cap without converging."""


class CheckpointError(LostError, ValueError):
    """A checkpoint file is malformed or disagrees with its config echo."""
