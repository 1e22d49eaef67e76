"""Exception hierarchy shared by the library, the services and the CLI."""


class TriQDefError(Exception):
    """Base class for every error raised on purpose by this package."""

    exit_code = 1


class ShapeError(TriQDefError):
    """Operator inputs have incompatible shapes."""

    def __init__(self, op: str, *shapes: tuple, detail: str = ""):
        self.op = op
        self.shapes = shapes
        rendered = " vs ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {rendered}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class GraphError(TriQDefError):
    """Misuse of the differentiable graph (non-scalar loss, foreign node...)."""


class NumericalError(TriQDefError):
    """Non-finite values where finite ones are required."""

    exit_code = 3


class QuantizationError(TriQDefError):
    pass


class PerceptualError(TriQDefError):
    pass


class LossError(TriQDefError):
    pass


class AttackError(TriQDefError):
    pass


class CurriculumError(TriQDefError):
    pass


class ConfigError(TriQDefError):
    """Invalid run configuration or command-line usage."""


class DataError(TriQDefError):
    """Missing or corrupt dataset, pool or report file."""

    exit_code = 2


class CheckpointError(DataError):
    pass
