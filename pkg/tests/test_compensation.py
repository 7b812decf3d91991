import numpy as np
import pytest

from misskit.compensation import STRATEGIES, compensate, register_strategy
from misskit.errors import ConfigurationError
from misskit.tensor import Tensor


def test_zero_fill_shape_and_value(rng):
    x = rng.normal(size=(4, 5, 3))
    out = compensate(x, "zero")
    assert out.shape == x.shape and not out.any()


def test_copy_is_bitwise_and_independent(rng):
    x = rng.normal(size=(3, 3))
    out = compensate(x, "copy")
    assert out.tobytes() == x.tobytes()
    out[0, 0] += 1
    assert out[0, 0] != x[0, 0]


def test_tensor_in_tensor_out(rng):
    t = Tensor(rng.normal(size=(2, 2)))
    out = compensate(t, "Copy")
    assert isinstance(out, Tensor) and np.array_equal(out.data, t.data)


def test_unknown_strategy():
    with pytest.raises(ConfigurationError, match="unknown compensation"):
        compensate(np.zeros(2), "mean")


def test_register_strategy():
    register_strategy("half_test", lambda a: a / 2)
    try:
        assert compensate(np.full(2, 4.0), "half_test").tolist() == [2.0, 2.0]
        with pytest.raises(ConfigurationError):
            register_strategy("half_test", lambda a: a)
    finally:
        STRATEGIES.pop("half_test")
