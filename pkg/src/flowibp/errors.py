"""Exception types shared across the package."""


class FlowIbpError(Exception):
    """Base class for all package errors."""


class ZeroVector(FlowIbpError):
    """Cannot project a (near-)zero ambient vector onto the manifold."""


class StepTooLarge(FlowIbpError):
    """Transport step exceeds the injectivity-scale bound."""


class UnboundedVolume(FlowIbpError):
    """Operation requires a finite Riemannian volume."""


class NumericBlowup(FlowIbpError):
    """State or derivative-flow magnitude exceeded 1e12 during simulation."""


class GridMismatch(FlowIbpError):
    """Requested time is not representable on the grid, or grids disagree."""


class BadWindow(FlowIbpError):
    """Invalid integration window [r, r + width]."""


class DegenerateWeight(FlowIbpError):
    """Weight function integrates to (numerically) zero."""


class NotGradientSystem(FlowIbpError):
    """Operation requires a registered gradient diffusion system."""


class NonFiniteSample(FlowIbpError):
    """A non-finite value was fed to a statistics accumulator."""


class InsufficientData(FlowIbpError):
    """Not enough samples for the requested statistic."""
