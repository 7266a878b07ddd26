"""Categorized pipeline errors.

Each error carries a ``detail`` message and the process ``exit_code`` the CLI
returns for it.
"""
from __future__ import annotations


class PipelineError(Exception):
    exit_code: int = 1
    category: str = "error"

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail

    def __str__(self) -> str:
        return f"{self.category}: {self.detail}"


class ConfigurationError(PipelineError, ValueError):
    exit_code = 4
    category = "configuration error"


class ShapeError(PipelineError, ValueError):
    exit_code = 5
    category = "shape error"


class DegenerateInputError(PipelineError, ValueError):
    exit_code = 6
    category = "degenerate input"


class MisuseError(PipelineError):
    exit_code = 7
    category = "misuse"


class ConsistencyError(PipelineError):
    exit_code = 8
    category = "consistency error"


class DependencyError(PipelineError, FileNotFoundError):
    exit_code = 3
    category = "missing dependency"


class ArtifactExistsError(PipelineError):
    exit_code = 3
    category = "artifact exists"


def check_same_shape(a_shape, b_shape, what: str = "inputs") -> None:
    if tuple(a_shape) != tuple(b_shape):
        raise ShapeError(f"{what} have mismatched shapes {tuple(a_shape)} vs {tuple(b_shape)}")


class RangeError(ConfigurationError, IndexError):
    category = "range error"
