"""Exception hierarchy. ``exit_code`` is what the CLI returns for each family."""


class PowerProjError(Exception):
    exit_code = 1


class ConfigError(PowerProjError, ValueError):
    exit_code = 2


class ShapeMismatch(ConfigError):
    pass


class DimensionMismatch(ConfigError):
    pass


class RatioError(ConfigError):
    pass


class InfeasibleInput(PowerProjError):
    exit_code = 3


class PlacementFailure(InfeasibleInput):
    pass


class InfeasibleRegime(InfeasibleInput):
    pass


class Infeasible(InfeasibleInput):
    def __init__(self, reason, detail=None):
        super().__init__(f"{reason}" + (f" ({detail})" if detail is not None else ""))
        self.reason = reason
        self.detail = detail


class InfeasibleStart(InfeasibleInput):
    pass


class NoFeasibleIndividual(InfeasibleInput):
    pass


class SolverFailure(PowerProjError):
    exit_code = 4


class MaxIterations(SolverFailure):
    pass


class DegenerateActiveSet(SolverFailure):
    pass


class LinearSolveFailure(SolverFailure):
    pass


class NotConverged(SolverFailure):
    def __init__(self, msg, result=None):
        super().__init__(msg)
        self.result = result


class Unbounded(SolverFailure):
    pass


class NumericalStall(SolverFailure):
    pass


class TapeMismatch(SolverFailure):
    pass


class NonFiniteActivation(SolverFailure):
    pass


class DivergenceDetected(SolverFailure):
    pass
