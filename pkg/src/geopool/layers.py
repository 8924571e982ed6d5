"""Dense layer building blocks over the autodiff core."""

import numpy as np

from . import autodiff as ad


def init_linear(rng, fan_in, fan_out, dtype=np.float64):
    """Weight/bias drawn uniformly in +-fan_in^(-1/2)."""
    bound = 1.0 / np.sqrt(fan_in)
    w = ad.Value(rng.uniform(-bound, bound, size=(fan_in, fan_out)), dtype=dtype)
    b = ad.Value(rng.uniform(-bound, bound, size=fan_out), dtype=dtype)
    return w, b


class Linear:
    def __init__(self, rng, fan_in, fan_out, dtype=np.float64):
        self.w, self.b = init_linear(rng, fan_in, fan_out, dtype)

    def __call__(self, x):
        return ad.add(ad.matmul(x, self.w), self.b)

    def parameters(self):
        return [self.w, self.b]


class MLP:
    """Linear stack with rectified-linear units between layers (not after the last)."""

    def __init__(self, rng, widths, dtype=np.float64):
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        self.layers = [Linear(rng, widths[i], widths[i + 1], dtype)
                       for i in range(len(widths) - 1)]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.relu(x)
        return x

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]
