"""Parameter containers and the small layers everything else is built from."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .tensor import Tensor, gelu, get_precision


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Minimal parameter tree: attributes that are Parameters, Modules, or
    lists/dicts of Modules are discovered in attribute-definition order."""

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
            elif isinstance(value, dict):
                for k, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = value.astype(p.dtype, copy=True)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def init_normal(rng, shape, std):
    return (rng.standard_normal(shape) * std).astype(get_precision())


class Linear(Module):
    """``y = x @ weight + bias`` with ``weight`` stored as (in, out)."""

    def __init__(self, d_in, d_out, rng, bias=True, zero=False):
        if zero:
            w = np.zeros((d_in, d_out))
        else:
            # Xavier-uniform
            lim = np.sqrt(6.0 / (d_in + d_out))
            w = rng.uniform(-lim, lim, size=(d_in, d_out))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x):
        y = x @ self.weight
        if self.bias is not None:
            y = y + self.bias
        return y


class MLP(Module):
    """Two-layer perceptron with a GELU in between."""

    def __init__(self, d_in, d_hidden, d_out, rng, zero_out=False):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng, zero=zero_out)

    def forward(self, x):
        return self.fc2(gelu(self.fc1(x)))
