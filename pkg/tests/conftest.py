import numpy as np
import pytest

from logitlab.models import LayerSpec, Model, init_params


def linear_model(in_pixels=16, n_classes=4, seed=0, input_shape=None):
    """Flatten -> dense softmax model; admits closed-form gradients."""
    if input_shape is None:
        input_shape = (1, 4, 4)
    layers = [LayerSpec("flatten"), LayerSpec("dense")]
    return init_params(layers, input_shape, n_classes, seed)


def tiny_mlp(input_shape=(1, 8, 8), n_classes=4, hidden=16, seed=0):
    layers = [LayerSpec("flatten"),
              LayerSpec("dense", units=hidden),
              LayerSpec("relu"),
              LayerSpec("dense")]
    return init_params(layers, input_shape, n_classes, seed)


def tiny_cnn(input_shape=(1, 8, 8), n_classes=4, seed=0):
    """One of every layer kind, small enough for finite differences."""
    layers = [LayerSpec("conv2d", filters=4, kernel=3, padding=1),
              LayerSpec("relu"),
              LayerSpec("maxpool2d", pool=2),
              LayerSpec("conv2d", filters=6, kernel=3, padding=1),
              LayerSpec("relu"),
              LayerSpec("maxpool2d", pool=2),
              LayerSpec("flatten"),
              LayerSpec("dense", units=12),
              LayerSpec("relu"),
              LayerSpec("dense")]
    return init_params(layers, input_shape, n_classes, seed)


def random_batch(model, n, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.2, 0.8, size=(n,) + model.input_shape).astype(np.float32)
    y = rng.integers(0, model.n_classes, size=n).astype(np.int64)
    return x, y


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
