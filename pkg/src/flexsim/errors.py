"""Exception hierarchy shared by all simulator modules."""


class SimulationError(Exception):
    """Base class for every error raised by flexsim."""


class InvalidStencilError(SimulationError, ValueError):
    pass


class StencilRangeError(SimulationError, ValueError):
    pass


class CompileError(SimulationError):
    """Netlist cannot be turned into state-space matrices."""


class LoopFailureError(SimulationError):
    """The PWL/nonlinear algebraic loop did not converge."""

    def __init__(self, message, residual):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


class CascadeError(SimulationError):
    """A derivative cascade produced non-finite values or a loop failed."""

    def __init__(self, message, order):
        super().__init__(f"{message} at derivative order {order}")
        self.order = order


class NumericalBlowupError(SimulationError):
    pass


class StiffnessError(SimulationError):
    """Step size fell below h_min; the problem is likely stiff."""

    def __init__(self, message, t=None, state=None):
        super().__init__(message)
        self.t = t
        self.state = state


class ModelDomainError(SimulationError, ValueError):
    """A component model was evaluated outside its validity region."""


class EventBoundaryError(SimulationError, ValueError):
    """A source was evaluated exactly at one of its discontinuities."""


class ScenarioError(SimulationError, ValueError):
    """Scenario file failed validation; ``path`` locates the bad field."""

    def __init__(self, message, path=""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
