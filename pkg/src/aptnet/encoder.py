"""Fused global/local encoder.

Node embeddings are projected onto a set of supernodes twice: by
cross-attention from every supernode to every node (global branch) and by
mean-pooling a kernel MLP over each supernode's radius neighborhood (local
branch). A learned channel gate mixes the two, DiT blocks refine the
supernode tokens, and a perceiver cross-attention pools them to a fixed
number of latent tokens.
"""

from __future__ import annotations

import numpy as np

from .attention import DiTBlock, MultiHeadAttention
from .errors import SchemaError
from .geometry import build_radius_graph, grid_pe, sample_supernodes, sinusoidal_pe
from .nn import MLP, Linear, Module, Parameter
from .tensor import Tensor, concat, gather_rows, layer_norm, scatter_mean, sigmoid

GATE_CLAMP = 20.0
VARIANTS = ("fused", "global-only", "local-only")


class GridEmbedding(Module):
    """Learnable table on a regular grid over ``[0, extent]^dim``, read by multilinear interpolation."""

    def __init__(self, grid_size, dim, d_h, rng, extent=200.0, scale=0.5):
        self.extent = extent
        self.table = Parameter(rng.standard_normal((grid_size,) * dim + (d_h,)) * scale)

    def forward(self, coords):
        return grid_pe(coords, self.table, self.extent)


class SinusoidalEmbedding(Module):
    """Fixed per-axis sinusoids, ``d_h / dim`` channels per coordinate."""

    def __init__(self, dim, d_h, extent=200.0):
        self.dim = dim
        self.d_h = d_h
        self.extent = extent

    def forward(self, coords):
        coords = np.asarray(coords, dtype=float)
        per_axis = self.d_h // self.dim
        parts = [sinusoidal_pe(coords[:, k], per_axis, base_period=self.extent) for k in range(self.dim)]
        return Tensor(np.concatenate(parts, axis=-1))


class HybridEmbedding(Module):
    """Fixed sinusoids plus a learnable grid table that starts at zero."""

    def __init__(self, grid_size, dim, d_h, rng, extent=200.0):
        self.fixed = SinusoidalEmbedding(dim, d_h, extent)
        self.grid = GridEmbedding(grid_size, dim, d_h, rng, extent, scale=0.0)

    def forward(self, coords):
        return self.fixed(coords) + self.grid(coords)


def position_embedding(cfg, rng):
    if cfg.pe == "sinusoidal":
        return SinusoidalEmbedding(cfg.dim, cfg.d_h, cfg.extent)
    if cfg.pe == "hybrid":
        return HybridEmbedding(cfg.grid_size, cfg.dim, cfg.d_h, rng, cfg.extent)
    return GridEmbedding(cfg.grid_size, cfg.dim, cfg.d_h, rng, cfg.extent)


def gated_fuse(v_attn, v_gno, gate_logits):
    """``G * v_attn + (1 - G) * v_gno`` with ``G = sigmoid(gate_logits)`` per channel."""
    if v_attn.shape != v_gno.shape:
        raise ValueError(f"branch shapes differ: {v_attn.shape} vs {v_gno.shape}")
    if not isinstance(gate_logits, Tensor):
        gate_logits = Tensor(gate_logits, dtype=v_attn.dtype)
    g = sigmoid(gate_logits)
    return g * v_attn + (1.0 - g) * v_gno


class FusedEncoder(Module):
    def __init__(self, cfg, rng):
        d_h = cfg.d_h
        self.cfg = cfg
        self.input_proj = Linear(cfg.d_a, d_h, rng, bias=False)
        self.pos = position_embedding(cfg, rng)
        self.cond_proj = Linear(cfg.d_e, d_h, rng)
        self.query_offset = Parameter(np.zeros(d_h))
        self.global_attn = MultiHeadAttention(d_h, cfg.n_heads, rng)
        self.kernel = MLP(d_h + cfg.dim + 1, d_h, d_h, rng)
        if cfg.variant == "fused":
            self.gate_logits = Parameter(np.full(d_h, float(cfg.gate_init)))
        elif cfg.variant not in VARIANTS:
            raise ValueError(f"unknown variant {cfg.variant!r}")
        self.blocks = [DiTBlock(d_h, cfg.n_heads, cfg.d_e, rng, cfg.mlp_ratio) for _ in range(cfg.n_enc)]
        self.pool_queries = Parameter(rng.standard_normal((cfg.n_latent, d_h)))
        self.pool_attn = MultiHeadAttention(d_h, cfg.n_heads, rng)

    def _kernel_fn(self, x):
        return self.kernel(x)

    # -- stages -----------------------------------------------------------
    def embed_inputs(self, coords, features, cond):
        """``h0 = W_f a + p(x) + proj(e_cond)`` for (B, N, ...) inputs."""
        b, n, _ = coords.shape
        if features.shape[-1] != self.cfg.d_a:
            raise SchemaError(f"expected {self.cfg.d_a} input features, got {features.shape[-1]}")
        pos = self.pos(coords.reshape(b * n, -1)).reshape(b, n, self.cfg.d_h)
        h = self.input_proj(Tensor(features)) + pos
        return h + self.cond_proj(cond).reshape(b, 1, self.cfg.d_h)

    def select_supernodes(self, coords, anchors=None, seeds=None):
        b, n, _ = coords.shape
        n_s = min(self.cfg.n_supernodes, n)
        anchors = anchors if anchors is not None else [None] * b
        seeds = seeds if seeds is not None else [0] * b
        return [
            sample_supernodes(coords[i], n_s, self.cfg.supernode_strategy, anchors[i], seeds[i])
            for i in range(b)
        ]

    def global_branch(self, h0, sn_coords):
        b, n_s, _ = sn_coords.shape
        q = self.pos(sn_coords.reshape(b * n_s, -1)).reshape(b, n_s, self.cfg.d_h) + self.query_offset
        return self.global_attn(q, h0)

    def radius_graphs(self, coords, sn_coords, seeds=None):
        seeds = seeds if seeds is not None else [0] * coords.shape[0]
        return [
            build_radius_graph(coords[i], sn_coords[i], self.cfg.radius, self.cfg.max_neighbors, seeds[i])
            for i in range(coords.shape[0])
        ]

    def local_branch(self, h0, graphs, n_s):
        b, n, d = h0.shape
        member = np.concatenate([g.member + i * n for i, g in enumerate(graphs)])
        center = np.concatenate([g.center + i * n_s for i, g in enumerate(graphs)])
        offset = np.concatenate([g.offset for g in graphs]) / self.cfg.radius
        dist = np.linalg.norm(offset, axis=1, keepdims=True)
        if member.size == 0:
            return Tensor(np.zeros((b, n_s, d)), dtype=h0.dtype)
        h_member = gather_rows(h0.reshape(b * n, d), member)
        msg = self._kernel_fn(concat([h_member, Tensor(offset, dtype=h0.dtype), Tensor(dist, dtype=h0.dtype)], axis=-1))
        pooled, _ = scatter_mean(msg, center, b * n_s)
        return pooled.reshape(b, n_s, d)

    def gate(self):
        if self.cfg.variant == "fused":
            return self.gate_logits
        clamp = self.cfg.gate_clamp
        return np.full(self.cfg.d_h, clamp if self.cfg.variant == "global-only" else -clamp)

    def pool(self, tokens):
        q = self.pool_queries.reshape(1, self.cfg.n_latent, self.cfg.d_h)
        return q + self.pool_attn(q, layer_norm(tokens))

    def forward(self, coords, features, cond, anchors=None, seeds=None, branches="both"):
        """Encode (B, N, dim) coords and (B, N, d_a) features to (B, N_lat, d_h).

        ``branches`` selects the exact single-branch path ("global" or
        "local") used to check the gate limits; normal use is "both".
        """
        coords = np.asarray(coords, dtype=float)
        h0 = self.embed_inputs(coords, np.asarray(features, dtype=float), cond)
        sets = self.select_supernodes(coords, anchors, seeds)
        sn_coords = np.stack([s.coords for s in sets])
        n_s = sn_coords.shape[1]
        if branches in ("both", "global"):
            v_attn = self.global_branch(h0, sn_coords)
        if branches in ("both", "local"):
            v_gno = self.local_branch(h0, self.radius_graphs(coords, sn_coords, seeds), n_s)
        if branches == "both":
            x = gated_fuse(v_attn, v_gno, self.gate())
        elif branches == "global":
            x = v_attn
        elif branches == "local":
            x = v_gno
        else:
            raise ValueError(f"unknown branches {branches!r}")
        for blk in self.blocks:
            x = blk(x, cond)
        return self.pool(x)
