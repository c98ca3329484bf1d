from __future__ import annotations

"""
Exception hierarchy for the SDS hand lab.

Numeric errors subclass ValueError so callers that only care about
"bad input" can keep catching the builtin type. The CLI maps
ConfigurationError to exit code 2 and DivergenceError to exit code 3.
"""

from typing import Optional


class SdsLabError(Exception):
    """Base class for every error raised by this package."""


class RangeError(SdsLabError, ValueError):
    """A timestep or iteration index outside its admissible interval."""


class DomainError(SdsLabError, ValueError):
    """A numeric argument outside its mathematical domain."""


class ShapeError(SdsLabError, ValueError):
    """Arrays whose shapes or dimensionalities do not match."""


class ConfigurationError(SdsLabError, ValueError):
    """An experiment description that cannot be executed as written."""


class DivergenceError(SdsLabError, RuntimeError):
    """
    A loss term became non-finite during optimization.

    Carries the iteration index and the name of the offending component
    so the run report can point at the exact step.
    """

    def __init__(self, iteration: int, component: str, value: Optional[float] = None) -> None:
        self.iteration = iteration
        self.component = component
        self.value = value
        super().__init__(
            f"Non-finite loss '{component}' at iteration {iteration} (value={value!r})"
        )
