"""Shared fixtures: float64 tensors, seeded generators, tiny models and datasets."""
import numpy as np
import pytest

from facessd.data import generate
from facessd.model import build_model
from facessd.models import HeadConfig, SyntheticSpec, TaskName
from facessd.tensor import Tensor, backward, get_default_dtype, set_default_dtype

TINY_SCALE = "1/64"


@pytest.fixture(autouse=True)
def float64_tensors():
    previous = get_default_dtype()
    set_default_dtype(np.float64)
    yield
    set_default_dtype(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_spec():
    return SyntheticSpec(num_images=6, faces_per_image=(1, 2), face_size_range=(0.25, 0.45), seed=3)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_spec):
    return generate(tiny_spec)


@pytest.fixture
def smile_model():
    return build_model(HeadConfig.for_task(TaskName.SMILE), TINY_SCALE, seed=0)


def numeric_grad(fn, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function of an array."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        plus = fn(x)
        flat[i] = old - eps
        minus = fn(x)
        flat[i] = old
        g[i] = (plus - minus) / (2 * eps)
    return grad


def check_gradients(build, inputs, eps: float = 1e-6, tol: float = 1e-4):
    """
    ``build(*tensors)`` returns a scalar Tensor; compares tape gradients with
    central differences for every input array.
    """
    tensors = [Tensor(a.copy(), requires_grad=True) for a in inputs]
    loss = build(*tensors)
    backward(loss)
    for k, array in enumerate(inputs):
        def value(arr, k=k):
            args = [Tensor(a) for a in inputs]
            args[k] = Tensor(arr)
            return build(*args).item()

        expected = numeric_grad(value, array.copy(), eps)
        actual = tensors[k].grad if tensors[k].grad is not None else np.zeros_like(array)
        scale = max(1.0, np.abs(expected).max(), np.abs(actual).max())
        assert np.abs(actual - expected).max() / scale < tol, f"input {k}: {actual} vs {expected}"
