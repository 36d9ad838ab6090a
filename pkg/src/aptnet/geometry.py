"""Point clouds, supernode selection, radius graphs and positional encodings.

All selection routines canonicalize the cloud (lexicographic sort of the
coordinates) before drawing anything from the seed, so their output depends
on the geometry and the seed, never on the storage order of the points.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial.distance import cdist

from .errors import SchemaError
from .tensor import as_tensor, sparse_matmul

__all__ = [
    "PointCloudSample",
    "SupernodeSet",
    "RadiusGraph",
    "rescale_coords",
    "canonical_order",
    "sample_supernodes",
    "build_radius_graph",
    "sinusoidal_pe",
    "grid_interpolation_matrix",
    "grid_pe",
]


@dataclass
class PointCloudSample:
    """One trajectory on a point cloud.

    In ``static`` mode ``coords`` is (N, dim), ``features`` (N, d_a) and
    ``fields`` (n_times, N, d_z). In ``adaptive`` mode the three are lists
    with one entry per snapshot, each with its own node count.
    """

    coords: object
    features: object
    times: np.ndarray
    fields: object
    scalars: dict = field(default_factory=dict)
    mesh_mode: str = "static"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if self.times.ndim != 1 or self.times.size == 0:
            raise SchemaError("times must be a non-empty 1-D array")
        if np.any(np.diff(self.times) <= 0):
            raise SchemaError("times must be strictly increasing")
        if self.mesh_mode == "static":
            self.coords = np.asarray(self.coords, dtype=float)
            self.features = np.asarray(self.features, dtype=float)
            self.fields = np.asarray(self.fields, dtype=float)
            n = self.coords.shape[0]
            if n < 1:
                raise SchemaError("a sample needs at least one point")
            if self.features.shape[0] != n or self.fields.shape[:2] != (self.times.size, n):
                raise SchemaError(
                    f"static sample shapes disagree: coords {self.coords.shape}, "
                    f"features {self.features.shape}, fields {self.fields.shape}, times {self.times.size}"
                )
            coord_list = [self.coords]
        elif self.mesh_mode == "adaptive":
            self.coords = [np.asarray(c, dtype=float) for c in self.coords]
            self.features = [np.asarray(f, dtype=float) for f in self.features]
            self.fields = [np.asarray(z, dtype=float) for z in self.fields]
            if not (len(self.coords) == len(self.features) == len(self.fields) == self.times.size):
                raise SchemaError("adaptive sample needs one coords/features/fields entry per time")
            for k, (c, f, z) in enumerate(zip(self.coords, self.features, self.fields)):
                if c.shape[0] < 1 or f.shape[0] != c.shape[0] or z.shape[0] != c.shape[0]:
                    raise SchemaError(f"snapshot {k}: row counts disagree ({c.shape}, {f.shape}, {z.shape})")
            coord_list = self.coords
        else:
            raise SchemaError(f"unknown mesh_mode {self.mesh_mode!r}")
        for c in coord_list:
            if not np.all(np.isfinite(c)):
                raise SchemaError("coordinates must be finite")
        self.scalars = {str(k): float(v) for k, v in self.scalars.items()}
        self.metadata = {str(k): str(v) for k, v in self.metadata.items()}

    @property
    def n_times(self):
        return self.times.size

    @property
    def dim(self):
        return self.snapshot(0)[0].shape[1]

    @property
    def d_a(self):
        return self.snapshot(0)[1].shape[1]

    @property
    def d_z(self):
        return self.snapshot(0)[2].shape[-1]

    def node_counts(self):
        if self.mesh_mode == "static":
            return [self.coords.shape[0]] * self.n_times
        return [c.shape[0] for c in self.coords]

    def snapshot(self, k):
        """``(coords, features, field)`` at time index ``k``."""
        if self.mesh_mode == "static":
            return self.coords, self.features, self.fields[k]
        return self.coords[k], self.features[k], self.fields[k]

    @property
    def anchors(self):
        """Anchor coordinates (e.g. well locations) stored in the metadata."""
        text = self.metadata.get("anchors", "")
        if not text:
            return np.zeros((0, self.dim))
        return np.array([[float(v) for v in pt.split(",")] for pt in text.split(";")])

    def permuted(self, perm):
        """Copy of a static sample with the node order permuted."""
        if self.mesh_mode != "static":
            raise SchemaError("permuted() is defined for static samples")
        return PointCloudSample(
            self.coords[perm], self.features[perm], self.times, self.fields[:, perm],
            dict(self.scalars), "static", dict(self.metadata),
        )


def format_anchors(points):
    return ";".join(",".join(repr(float(v)) for v in p) for p in np.atleast_2d(points))


@dataclass
class SupernodeSet:
    coords: np.ndarray
    anchor_mask: np.ndarray
    index: np.ndarray  # position in the input cloud, -1 for anchors not in it

    def __len__(self):
        return self.coords.shape[0]


@dataclass
class RadiusGraph:
    center: np.ndarray
    member: np.ndarray
    offset: np.ndarray
    radius: float
    max_neighbors: int
    degree: np.ndarray

    @property
    def empty(self):
        return self.degree == 0

    @property
    def n_edges(self):
        return self.center.size


def rescale_coords(coords, target_extent=200.0, bounds=None):
    """Affinely map each axis onto ``[0, target_extent]``.

    ``bounds`` = (lo, hi) fixes the source box, so that several clouds from
    one domain share one map; by default the cloud's own bounding box is
    used. Degenerate axes land at ``target_extent / 2``.
    """
    coords = np.asarray(coords, dtype=float)
    if bounds is None:
        lo, hi = coords.min(axis=0), coords.max(axis=0)
    else:
        lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    span = hi - lo
    flat = span <= 0
    scale = np.where(flat, 0.0, target_extent / np.where(flat, 1.0, span))
    out = (coords - lo) * scale
    out[..., flat] = target_extent / 2
    return out


def canonical_order(coords):
    """Indices that sort points lexicographically by coordinate."""
    coords = np.asarray(coords)
    return np.lexsort(coords.T[::-1])


def sample_supernodes(coords, n_supernodes, strategy="farthest-point", anchors=None, seed=0, tol=1e-9):
    """Pick pooling centers from a cloud.

    Anchors are always kept (flagged in ``anchor_mask``); cloud points that
    coincide with an anchor are not drawn again. The remaining centers are
    drawn uniformly (``seeded-uniform``) or greedily by max-min distance
    (``farthest-point``).
    """
    coords = np.asarray(coords, dtype=float)
    n = coords.shape[0]
    if anchors is None or np.size(anchors) == 0:
        anchors = np.zeros((0, coords.shape[1]))
    anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
    if n_supernodes > n:
        raise ValueError(f"cannot pick {n_supernodes} supernodes from {n} points")
    if anchors.shape[0] > n_supernodes:
        raise ValueError(f"{anchors.shape[0]} anchors exceed {n_supernodes} supernodes")
    order = canonical_order(coords)
    cand = coords[order]
    anchor_index = np.full(anchors.shape[0], -1)
    keep = np.ones(n, dtype=bool)
    if anchors.shape[0]:
        d = cdist(anchors, cand)
        hit = d <= tol
        keep &= ~hit.any(axis=0)
        for a in range(anchors.shape[0]):
            where = np.flatnonzero(hit[a])
            if where.size:
                anchor_index[a] = order[where[0]]
    pool = np.flatnonzero(keep)
    n_rest = n_supernodes - anchors.shape[0]
    if n_rest > pool.size:
        raise ValueError(f"only {pool.size} non-anchor points for {n_rest} supernodes")
    rng = np.random.default_rng(seed)
    if n_rest == 0:
        picked = np.zeros(0, dtype=int)
    elif strategy == "seeded-uniform":
        picked = np.sort(rng.choice(pool.size, n_rest, replace=False))
    elif strategy == "farthest-point":
        pts = cand[pool]
        picked = np.empty(n_rest, dtype=int)
        if anchors.shape[0]:
            mind = cdist(anchors, pts).min(axis=0)
            start = 0
        else:
            start = int(rng.integers(pool.size))
            picked[0] = start
            mind = np.linalg.norm(pts - pts[start], axis=1)
            start = 1
        for i in range(start, n_rest):
            j = int(np.argmax(mind))
            picked[i] = j
            mind = np.minimum(mind, np.linalg.norm(pts - pts[j], axis=1))
    else:
        raise ValueError(f"unknown supernode strategy {strategy!r}")
    chosen = pool[picked]
    return SupernodeSet(
        coords=np.concatenate([anchors, cand[chosen]], axis=0),
        anchor_mask=np.concatenate([np.ones(anchors.shape[0], bool), np.zeros(chosen.size, bool)]),
        index=np.concatenate([anchor_index, order[chosen]]).astype(int),
    )


def build_radius_graph(cloud_coords, centers, radius, max_neighbors=128, seed=0):
    """Connect each center to the cloud points within ``radius`` (inclusive).

    Centers with more candidates than ``max_neighbors`` keep a seeded
    uniform subset. Edges are ordered by center, then by canonical point
    order.
    """
    if radius <= 0 or max_neighbors < 1:
        raise ValueError("radius must be > 0 and max_neighbors >= 1")
    cloud = np.asarray(cloud_coords, dtype=float)
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    order = canonical_order(cloud)
    d = cdist(centers, cloud[order])
    mask = d <= radius
    counts = mask.sum(axis=1)
    for c in np.flatnonzero(counts > max_neighbors):
        rng = np.random.default_rng([seed, int(c)])
        cols = np.flatnonzero(mask[c])
        keep = rng.choice(cols.size, max_neighbors, replace=False)
        mask[c] = False
        mask[c, cols[keep]] = True
    ci, pos = np.nonzero(mask)
    member = order[pos]
    return RadiusGraph(
        center=ci,
        member=member,
        offset=cloud[member] - centers[ci],
        radius=float(radius),
        max_neighbors=int(max_neighbors),
        degree=np.bincount(ci, minlength=centers.shape[0]),
    )


def sinusoidal_pe(value, dim, base_period=10000.0):
    """Interleaved ``[sin(v w_0), cos(v w_0), sin(v w_1), ...]`` with
    ``w_i = base_period ** (-2i / dim)``; vectorized over ``value``."""
    if dim < 2 or dim % 2:
        raise ValueError(f"sinusoidal encoding needs an even dim >= 2, got {dim}")
    v = np.asarray(value, dtype=float)
    freqs = base_period ** (-np.arange(0, dim, 2) / dim)
    ang = v[..., None] * freqs
    out = np.empty(v.shape + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def grid_interpolation_matrix(coords, grid_shape, extent):
    """Sparse (N, prod(grid_shape)) matrix of multilinear weights.

    The grid spans ``[0, extent]`` on every axis; queries outside are
    clamped to the boundary.
    """
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    n, dim = coords.shape
    grid_shape = tuple(int(g) for g in grid_shape)
    if len(grid_shape) != dim or min(grid_shape) < 2:
        raise ValueError(f"grid {grid_shape} incompatible with {dim}-D coords")
    g = np.array(grid_shape)
    u = np.clip(coords / extent, 0.0, 1.0) * (g - 1)
    i0 = np.minimum(np.floor(u).astype(int), g - 2)
    frac = u - i0
    strides = np.array([int(np.prod(grid_shape[k + 1:])) for k in range(dim)])
    n_corner = 2**dim
    cols = np.empty((n, n_corner), dtype=np.int64)
    wts = np.empty((n, n_corner))
    for c in range(n_corner):
        bits = np.array([(c >> (dim - 1 - k)) & 1 for k in range(dim)])
        cols[:, c] = ((i0 + bits) * strides).sum(axis=1)
        wts[:, c] = np.prod(np.where(bits, frac, 1.0 - frac), axis=1)
    rows = np.repeat(np.arange(n), n_corner)
    return sp.csr_matrix((wts.ravel(), (rows, cols.ravel())), shape=(n, int(np.prod(g))))


def grid_pe(coords, table, extent=200.0):
    """Multilinear lookup into a learnable table of shape ``(G,)*dim + (d,)``."""
    table = as_tensor(table)
    grid_shape = table.shape[:-1]
    m = grid_interpolation_matrix(coords, grid_shape, extent)
    return sparse_matmul(m, table.reshape(-1, table.shape[-1]))
