"""Latent approximator and query decoder."""

from __future__ import annotations

import numpy as np

from .attention import CrossDiTBlock, DiTBlock
from .encoder import position_embedding
from .nn import Linear, Module
from .tensor import Tensor, layer_norm


class Approximator(Module):
    """Conditioned self-attention over the latent tokens. Cost is independent of the input node count."""

    def __init__(self, cfg, rng):
        self.blocks = [DiTBlock(cfg.d_h, cfg.n_heads, cfg.d_e, rng, cfg.mlp_ratio) for _ in range(cfg.n_app)]

    def forward(self, z, cond):
        for blk in self.blocks:
            z = blk(z, cond)
        return z


class Decoder(Module):
    """Cross-attends embedded query points onto the latent tokens.

    Every operation acts on query rows independently, so the prediction at
    a point does not depend on which other points are queried with it.
    """

    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.pos = position_embedding(cfg, rng)
        self.cond_proj = Linear(cfg.d_e, cfg.d_h, rng)
        self.blocks = [CrossDiTBlock(cfg.d_h, cfg.n_heads, cfg.d_e, rng, cfg.mlp_ratio) for _ in range(cfg.n_dec)]
        self.head = Linear(cfg.d_h, cfg.d_z, rng)

    def forward(self, z, query_coords, cond):
        query_coords = np.asarray(query_coords, dtype=float)
        b, nq, _ = query_coords.shape
        d_h = self.cfg.d_h
        if nq == 0:
            return Tensor(np.zeros((b, 0, self.cfg.d_z)), dtype=z.dtype)
        q = self.pos(query_coords.reshape(b * nq, -1)).reshape(b, nq, d_h)
        q = q + self.cond_proj(cond).reshape(b, 1, d_h)
        for blk in self.blocks:
            q = blk(q, z, cond)
        return self.head(layer_norm(q))
