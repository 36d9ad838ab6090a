"""The full operator: condition embedding, encoder, approximator, decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
import warnings

import numpy as np

from .attention import ConditionEmbedder
from .encoder import FusedEncoder
from .latent import Approximator, Decoder
from .nn import Module
from .tensor import concat


@dataclass
class ModelConfig:
    dim: int = 2
    d_a: int = 3
    d_z: int = 1
    scalar_names: tuple = ()
    d_h: int = 48
    n_heads: int = 3
    d_e: int = 0  # 0 -> same as d_h
    n_supernodes: int = 64
    n_latent: int = 32
    n_enc: int = 1
    n_app: int = 1
    n_dec: int = 1
    mlp_ratio: int = 4
    grid_size: int = 16
    extent: float = 200.0
    radius: float = 20.0
    max_neighbors: int = 128
    supernode_strategy: str = "farthest-point"
    variant: str = "fused"
    pe: str = "hybrid"  # spatial encoding: sinusoids, a learnable grid table, or their sum
    gate_init: float = 0.0
    gate_clamp: float = 20.0
    time_scale: float = 100.0
    scalar_scale: float = 10.0
    seed: int = 0

    def __post_init__(self):
        self.scalar_names = tuple(self.scalar_names)
        if not self.d_e:
            self.d_e = self.d_h
        if self.d_h % self.n_heads:
            raise ValueError(f"d_h={self.d_h} must be divisible by n_heads={self.n_heads}")
        if self.pe not in ("grid", "sinusoidal", "hybrid"):
            raise ValueError(f"unknown positional encoding {self.pe!r}")
        if self.pe != "grid" and self.d_h % (2 * self.dim):
            raise ValueError(f"sinusoidal encoding needs d_h divisible by {2 * self.dim}")
        if self.n_latent > self.n_supernodes:
            warnings.warn(f"n_latent={self.n_latent} exceeds n_supernodes={self.n_supernodes}", stacklevel=2)

    def to_dict(self):
        d = asdict(self)
        d["scalar_names"] = list(self.scalar_names)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _batched(x, ndim):
    x = np.asarray(x, dtype=float)
    return (x[None], True) if x.ndim == ndim else (x, False)


class APT(Module):
    """``forward = decode(approximate(encode(a), t), x_query)``, all stages
    conditioned on the same time/scalar embedding.

    Inputs are expected preprocessed: coordinates rescaled to
    ``[0, extent]``, features and scalars z-scored, time scaled to [0, 1].
    """

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.conditioner = ConditionEmbedder(cfg.d_e, cfg.scalar_names, rng, cfg.time_scale, cfg.scalar_scale)
        self.encoder = FusedEncoder(cfg, rng)
        self.approximator = Approximator(cfg, rng)
        self.decoder = Decoder(cfg, rng)

    def condition(self, t, scalars=None):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        scalars = {k: np.atleast_1d(np.asarray(v, dtype=float)) for k, v in (scalars or {}).items()}
        return self.conditioner(t, scalars)

    def encode(self, coords, features, cond, anchors=None, seeds=None, branches="both"):
        return self.encoder(coords, features, cond, anchors, seeds, branches)

    def approximate(self, z_enc, cond):
        return self.approximator(z_enc, cond)

    def decode(self, z_lat, query_coords, cond, chunk_size=None):
        """Decode (B, Nq, dim) queries, optionally ``chunk_size`` rows at a time.

        Query rows never interact, so chunking changes memory use only.
        """
        nq = np.shape(query_coords)[1]
        if not chunk_size or nq <= chunk_size:
            return self.decoder(z_lat, query_coords, cond)
        parts = [self.decoder(z_lat, query_coords[:, i:i + chunk_size], cond) for i in range(0, nq, chunk_size)]
        return concat(parts, axis=1)

    def forward(self, coords, features, t, scalars=None, query_coords=None, anchors=None, seeds=None,
                branches="both", chunk_size=None):
        """Predict fields at ``query_coords`` (default: the input nodes).

        Accepts a single cloud ((N, dim) coords, scalar t) or a batch
        ((B, N, dim) coords, (B,) t); the output is shaped to match.
        """
        coords, single = _batched(coords, 2)
        features, _ = _batched(features, 2)
        if query_coords is None:
            query_coords = coords
        else:
            query_coords, _ = _batched(query_coords, 2)
        if single and anchors is not None:
            anchors = [anchors]
        if single and seeds is not None and np.ndim(seeds) == 0:
            seeds = [seeds]
        cond = self.condition(t, scalars)
        z = self.encode(coords, features, cond, anchors, seeds, branches)
        z = self.approximate(z, cond)
        out = self.decode(z, query_coords, cond, chunk_size)
        return out.reshape(out.shape[1:]) if single else out


def forward(model, sample, t, query_coords=None, seed=0):
    """Run ``model`` on a preprocessed static sample at time ``t``."""
    return model(sample.coords, sample.features, t, sample.scalars, query_coords, sample.anchors, [seed])
