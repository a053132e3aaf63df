"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes, so each class carries the code it
should terminate with.
"""

from __future__ import annotations


class AttnMemError(Exception):
    exit_code = 1


class DimensionError(AttnMemError, ValueError):
    """Tensor shapes do not line up."""


class ContractError(AttnMemError, ValueError):
    """A caller broke a documented precondition."""


class InputError(AttnMemError, ValueError):
    exit_code = 3


class FormatError(AttnMemError, ValueError):
    """A serialized file is malformed, truncated, or from another version."""

    exit_code = 3

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class ConfigError(AttnMemError, ValueError):
    exit_code = 2


class DataError(AttnMemError, RuntimeError):
    exit_code = 3


class TrainingError(AttnMemError, RuntimeError):
    exit_code = 4

    def __init__(self, message: str, epoch: int):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch
