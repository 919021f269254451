"""Exception hierarchy shared by the library and the CLI.

Each class carries the process exit code the CLI reports for it.
"""


class C2FError(Exception):
    exit_code = 1


class ParameterError(C2FError, ValueError):
    exit_code = 1


class FormatError(C2FError):
    exit_code = 2


class MissingClassError(C2FError):
    exit_code = 2

    def __init__(self, class_id: int):
        super().__init__(f"class {class_id} absent")
        self.class_id = class_id


class ConfigurationError(C2FError):
    exit_code = 2


class MissingPrerequisiteError(C2FError):
    exit_code = 3

    def __init__(self, phase: str, detail: str = ""):
        msg = f"missing prerequisite checkpoint for phase '{phase}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.phase = phase


class DivergenceError(C2FError):
    exit_code = 4

    def __init__(self, phase: str, epoch: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} in phase '{phase}' at epoch {epoch}")
        self.phase = phase
        self.epoch = epoch
