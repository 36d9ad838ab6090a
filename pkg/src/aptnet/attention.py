"""Multi-head attention, conditioning embeddings and DiT-style blocks."""

from __future__ import annotations

import numpy as np

from .errors import SchemaError
from .geometry import sinusoidal_pe
from .nn import MLP, Linear, Module
from .tensor import Tensor, layer_norm, silu, softmax


class MultiHeadAttention(Module):
    """Scaled dot-product attention with ``n_heads`` heads of width ``d_h / n_heads``."""

    def __init__(self, d_h, n_heads, rng):
        if d_h % n_heads:
            raise ValueError(f"d_h={d_h} is not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.q = Linear(d_h, d_h, rng)
        self.k = Linear(d_h, d_h, rng)
        self.v = Linear(d_h, d_h, rng)
        self.o = Linear(d_h, d_h, rng)

    def _split(self, x):
        *lead, n, d = x.shape
        return x.reshape(*lead, n, self.n_heads, d // self.n_heads).swapaxes(-2, -3)

    def attend(self, queries, keys_values, return_weights=False):
        """Concatenated head outputs before the output projection."""
        if keys_values.shape[-2] == 0:
            raise ValueError("attention over an empty context")
        q = self._split(self.q(queries))
        k = self._split(self.k(keys_values))
        v = self._split(self.v(keys_values))
        scale = 1.0 / float(np.sqrt(q.shape[-1]))
        weights = softmax((q @ k.swapaxes(-1, -2)) * scale, axis=-1)
        heads = (weights @ v).swapaxes(-2, -3)
        *lead, n, h, dh = heads.shape
        out = heads.reshape(*lead, n, h * dh)
        return (out, weights) if return_weights else out

    def forward(self, queries, keys_values):
        return self.o(self.attend(queries, keys_values))


def cross_attention(queries, keys_values, params):
    return params(queries, keys_values)


def self_attention(x, params):
    return params(x, x)


class ConditionEmbedder(Module):
    """``e_cond = MLP_time(PE(t)) + sum_k MLP_k(PE(s_k))`` for declared scalars ``s_k``."""

    def __init__(self, d_e, scalar_names, rng, time_scale=100.0, scalar_scale=10.0):
        self.d_e = d_e
        self.scalar_names = tuple(scalar_names)
        self.time_scale = time_scale
        self.scalar_scale = scalar_scale
        self.time_mlp = MLP(d_e, d_e, d_e, rng)
        self.scalar_mlps = {name: MLP(d_e, d_e, d_e, rng) for name in self.scalar_names}

    def forward(self, t, scalars=None):
        scalars = scalars or {}
        declared, given = set(self.scalar_names), set(scalars)
        if declared != given:
            raise SchemaError(
                f"scalar conditions mismatch: missing {sorted(declared - given)}, unexpected {sorted(given - declared)}"
            )
        e = self.time_mlp(Tensor(sinusoidal_pe(np.asarray(t, float) * self.time_scale, self.d_e)))
        for name in self.scalar_names:
            s = np.asarray(scalars[name], dtype=float) * self.scalar_scale
            e = e + self.scalar_mlps[name](Tensor(sinusoidal_pe(s, self.d_e)))
        return e


def modulate(x, shift, scale):
    return x * (scale + 1.0) + shift


def _modulation(ada, cond, n_chunks, d):
    mod = ada(silu(cond))
    if mod.ndim == 2:  # (B, n*d) -> broadcast over tokens
        mod = mod.reshape(mod.shape[0], 1, n_chunks * d)
    return [mod[..., i * d:(i + 1) * d] for i in range(n_chunks)]


class DiTBlock(Module):
    """Pre-norm self-attention block with adaLN-zero conditioning.

    The final conditioning layer starts at zero, so a fresh block is the
    identity map.
    """

    def __init__(self, d_h, n_heads, d_e, rng, mlp_ratio=4):
        self.d_h = d_h
        self.attn = MultiHeadAttention(d_h, n_heads, rng)
        self.mlp = MLP(d_h, mlp_ratio * d_h, d_h, rng)
        self.ada = Linear(d_e, 6 * d_h, rng, zero=True)

    def forward(self, x, cond):
        shift_a, scale_a, gate_a, shift_m, scale_m, gate_m = _modulation(self.ada, cond, 6, self.d_h)
        h = modulate(layer_norm(x), shift_a, scale_a)
        x = x + gate_a * self.attn(h, h)
        h = modulate(layer_norm(x), shift_m, scale_m)
        return x + gate_m * self.mlp(h)


class CrossDiTBlock(Module):
    """Like ``DiTBlock`` but the attention reads keys/values from a context set."""

    def __init__(self, d_h, n_heads, d_e, rng, mlp_ratio=4):
        self.d_h = d_h
        self.attn = MultiHeadAttention(d_h, n_heads, rng)
        self.mlp = MLP(d_h, mlp_ratio * d_h, d_h, rng)
        self.ada = Linear(d_e, 6 * d_h, rng, zero=True)

    def forward(self, x, context, cond):
        shift_a, scale_a, gate_a, shift_m, scale_m, gate_m = _modulation(self.ada, cond, 6, self.d_h)
        h = modulate(layer_norm(x), shift_a, scale_a)
        x = x + gate_a * self.attn(h, layer_norm(context))
        h = modulate(layer_norm(x), shift_m, scale_m)
        return x + gate_m * self.mlp(h)


def dit_block(x, cond, params):
    return params(x, cond)
