"""Parameter containers and the small dense layers shared by the model."""
import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor


class Module:
    """Attribute-walking parameter registry, in definition order."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        if set(params) != set(state):
            raise ValueError(f"state dict keys differ: missing={sorted(set(params) - set(state))} "
                             f"unexpected={sorted(set(state) - set(params))}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def init_weight(rng, fan_in, fan_out, shape=None, dtype=np.float64):
    """Glorot-uniform initialisation."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    shape = shape or (fan_in, fan_out)
    return tc.parameter(rng.uniform(-limit, limit, size=shape).astype(dtype))


class Linear(Module):
    def __init__(self, rng, n_in, n_out, bias=True, dtype=np.float64):
        self.weight = init_weight(rng, n_in, n_out, dtype=dtype)
        self.bias = tc.parameter(np.zeros(n_out, dtype=dtype)) if bias else None

    def __call__(self, x):
        y = tc.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5, dtype=np.float64):
        self.gamma = tc.parameter(np.ones(dim, dtype=dtype))
        self.beta = tc.parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def __call__(self, x):
        return tc.layer_norm(x, axis=-1, eps=self.eps) * self.gamma + self.beta


class FeedForward(Module):
    """Linear -> LeakyReLU -> Linear."""

    def __init__(self, rng, dim, hidden, slope=0.2, dtype=np.float64):
        self.inner = Linear(rng, dim, hidden, dtype=dtype)
        self.outer = Linear(rng, hidden, dim, dtype=dtype)
        self.slope = slope

    def __call__(self, x):
        return self.outer(tc.leaky_relu(self.inner(x), self.slope))
