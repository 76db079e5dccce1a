"""Exception hierarchy shared by every fedmt module."""


class FedMTError(Exception):
    """Base class for all fedmt errors."""


class ShapeMismatch(FedMTError, ValueError):
    pass


class InvalidMatrix(FedMTError, ValueError):
    """A projection matrix violates its construction invariants."""


class PartitionMismatch(FedMTError, ValueError):
    pass


class SingularNoise(InvalidMatrix):
    pass


class UnsupportedK(FedMTError, ValueError):
    pass


class NonfiniteLoss(FedMTError, FloatingPointError):
    pass


class DegenerateSpec(FedMTError, ValueError):
    pass


class DegenerateSignal(FedMTError, ValueError):
    pass


class InfeasibleSplit(FedMTError, ValueError):
    pass


class BadWeights(FedMTError, ValueError):
    pass


class TooLarge(FedMTError, ValueError):
    pass


class ConvergenceFailure(FedMTError, RuntimeError):
    pass


class InvalidRate(FedMTError, ValueError):
    pass


class ConfigInvalid(FedMTError, ValueError):
    """Raised with a list of ``(field, message)`` diagnostics."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [("config", problems)]
        self.problems = list(problems)
        msg = "; ".join(f"{field}: {why}" for field, why in self.problems)
        super().__init__(msg)


class RunError(FedMTError, RuntimeError):
    """A downstream failure wrapped with the run that produced it."""

    def __init__(self, run_id: str, cause: BaseException):
        self.run_id = run_id
        self.cause = cause
        super().__init__(f"run {run_id!r} failed: {type(cause).__name__}: {cause}")
