"""Exception hierarchy shared by all mplnet modules."""


class MplnError(Exception):
    """Base class for every error raised by mplnet."""


class ParameterError(MplnError, ValueError):
    """Model parameters violate their invariants (non-PD precision, bad simplex...)."""


class InputError(MplnError, ValueError):
    """Malformed user input: counts, scaling factors, files."""


class SamplingError(MplnError, ArithmeticError):
    """A Poisson rate overflowed or exceeded the accepted range."""


class NumericalError(MplnError, ArithmeticError):
    """An inner solver failed to converge or to bracket a root."""


class DegenerateComponentError(MplnError):
    """A mixture component lost (almost) all of its responsibility mass."""

    def __init__(self, message, component=None):
        super().__init__(message)
        self.component = component


class InitializationError(MplnError):
    """K-means initialization produced an empty cluster."""


class CalibrationError(MplnError):
    """Mixing-level calibration could not reach the requested ARI band."""

    def __init__(self, message, closest_ari=None, closest_band=None):
        super().__init__(message)
        self.closest_ari = closest_ari
        self.closest_band = closest_band
