"""Retry-with-relaxation for ISAC-LOCATE solvers.

A failing solver call is repeated with one keyword parameter widened
(a looser LASSO tolerance, a larger triangle margin) instead of waiting.
"""

import logging
from typing import Any, Callable, TypeVar

logger = logging.getLogger("isac-locate.retry")

T = TypeVar("T")


class RelaxationConfig:
    """Configuration for relaxation behavior."""

    def __init__(
        self,
        max_attempts: int = 3,
        growth: float = 100.0,
        floor: float = 0.0,
    ):
        self.max_attempts = max_attempts
        self.growth = growth
        self.floor = floor

    def get_value(self, initial: float, attempt: int) -> float:
        """Parameter value for the given attempt (0-indexed)."""
        if attempt == 0:
            return initial
        return max(initial, self.floor) * (self.growth**attempt)


# LASSO tolerance 1e-8 -> 1e-6 -> 1e-4
DEFAULT_RELAXATION = RelaxationConfig(max_attempts=3, growth=100.0)


def retry_relaxed(
    func: Callable[..., T],
    *args,
    param: str,
    initial: float,
    config: RelaxationConfig = DEFAULT_RELAXATION,
    exceptions: tuple = (Exception,),
    **kwargs: Any,
) -> T:
    """
    Call ``func`` with ``param=initial``, widening it after each failure.

    Args:
        func: Solver to call
        *args: Positional arguments for func
        param: Name of the keyword argument to relax
        initial: Value used on the first attempt
        config: Relaxation configuration
        exceptions: Exception types that trigger another attempt
        **kwargs: Other keyword arguments for func

    Returns:
        Result of the first successful call

    Raises:
        Last exception if every attempt fails
    """
    last_exception = None

    for attempt in range(config.max_attempts):
        value = config.get_value(initial, attempt)
        try:
            return func(*args, **{param: value}, **kwargs)
        except exceptions as e:
            last_exception = e
            if attempt < config.max_attempts - 1:
                nxt = config.get_value(initial, attempt + 1)
                logger.warning(
                    f"Attempt {attempt + 1}/{config.max_attempts} failed: {e}. "
                    f"Retrying with {param}={nxt:.3g}..."
                )
            else:
                logger.error(f"All {config.max_attempts} attempts failed. Last error: {e}")

    raise last_exception
