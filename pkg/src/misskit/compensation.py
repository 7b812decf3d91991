"""Stand-in inputs for a missing modality, for trackers without prompters.

Strategies are looked up by name in :data:`STRATEGIES`; a new strategy is a
function ``available -> substitute`` added with :func:`register_strategy`.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import ConfigurationError
from .tensor import Tensor

Strategy = Callable[[np.ndarray], np.ndarray]


def zero_fill(available: np.ndarray) -> np.ndarray:
    """A zero matrix shaped like the available input."""
    return np.zeros_like(available)


def copy_fill(available: np.ndarray) -> np.ndarray:
    """The available input itself, copied bit for bit."""
    return np.array(available, copy=True)


STRATEGIES: dict[str, Strategy] = {"zero": zero_fill, "copy": copy_fill}


def register_strategy(name: str, fn: Strategy) -> None:
    key = name.lower()
    if key in STRATEGIES:
        raise ConfigurationError(f"strategy {name!r} already registered")
    STRATEGIES[key] = fn


def compensate(available, kind: str):
    """Substitute for the missing input; returns the same type it was given."""
    try:
        fn = STRATEGIES[kind.lower()]
    except (KeyError, AttributeError):
        raise ConfigurationError(f"unknown compensation strategy {kind!r}; "
                                 f"choose from {sorted(STRATEGIES)}") from None
    if isinstance(available, Tensor):
        return Tensor(fn(available.data))
    return fn(np.asarray(available))
