"""Exception types shared across the toolkit."""


class LandscapeError(Exception):
    """Base class for all toolkit errors."""

    module = "landscape"


class ManifestError(LandscapeError, ValueError):
    module = "models"


class NumericOverflowError(LandscapeError, ArithmeticError):
    module = "autodiff"

    def __init__(self, layer: str):
        super().__init__(f"non-finite activations in layer {layer!r}")
        self.layer = layer


class TapeStateError(LandscapeError, RuntimeError):
    module = "autodiff"


class CapabilityError(LandscapeError, RuntimeError):
    module = "autodiff"


class FormatError(LandscapeError, ValueError):
    module = "formats"


class HashMismatchError(FormatError):
    pass


class TrainingError(LandscapeError, RuntimeError):
    module = "trainer"

    def __init__(self, msg, last_good=None):
        super().__init__(msg)
        self.last_good = last_good


class ConvergenceError(LandscapeError, RuntimeError):
    module = "spectral"

    def __init__(self, msg, residual=None):
        super().__init__(msg)
        self.residual = residual


class DegenerateDirectionError(LandscapeError, ValueError):
    module = "directions"


class MiningError(LandscapeError, RuntimeError):
    module = "miner"

    def __init__(self, msg, last_finite=None):
        super().__init__(msg)
        self.last_finite = last_finite
