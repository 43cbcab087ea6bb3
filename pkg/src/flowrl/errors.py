"""Exception hierarchy. Each class carries the CLI exit code for its error class."""

from __future__ import annotations


class FlowRLError(Exception):
    exit_code = 1


class InvalidArgument(FlowRLError, ValueError):
    exit_code = 2


class ConfigError(FlowRLError):
    exit_code = 3


class FormatError(FlowRLError):
    exit_code = 4


class ArtifactIOError(FlowRLError, OSError):
    exit_code = 5

    def __init__(self, path, message: str = "") -> None:
        self.path = str(path)
        super().__init__(f"{self.path}: {message}" if message else self.path)


class GenerationFailure(FlowRLError):
    exit_code = 6


class NumericError(FlowRLError, ArithmeticError):
    exit_code = 7

    def __init__(self, message: str, index: int | None = None, diagnostics: dict | None = None) -> None:
        self.index = index
        self.diagnostics = diagnostics or {}
        super().__init__(message if index is None else f"{message} (index {index})")


class TrainingDiverged(NumericError):
    exit_code = 8


class EmptyTrajectory(FlowRLError):
    exit_code = 9


class DegenerateMask(FlowRLError):
    exit_code = 10


class RewardError(FlowRLError):
    exit_code = 11

    def __init__(self, reward_name: str, message: str) -> None:
        self.reward_name = reward_name
        super().__init__(f"[{reward_name}] {message}")
