"""Synthetic heterogeneous-diffusion oracle.

A cell-centered finite-volume solver for ``du/dt = div(kappa grad u) + q``
on the unit square with no-flux walls, driven by injection wells over a
random log-normal (optionally channelized) diffusivity. Snapshots are
sampled onto static or gradient-adaptive point clouds.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
import json
import os
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import RegularGridInterpolator
from scipy.sparse.linalg import splu
from scipy.special import gamma as gamma_fn, kv

from .errors import SolverError
from .geometry import PointCloudSample, format_anchors

FIELD_CLASSES = ("gaussian-continuous", "gaussian-binary", "von-karman-continuous", "von-karman-binary")


# -- coefficient fields ---------------------------------------------------

@dataclass
class CoefficientField:
    values: np.ndarray
    kind: str
    params: dict

    @property
    def n(self):
        return self.values.shape[0]


def _covariance(r, kind, corr_len, nu=0.5):
    s = r / corr_len
    if kind == "gaussian":
        return np.exp(-s * s)
    # von Karman (Matern) with smoothness nu
    out = np.ones_like(s)
    pos = s > 0
    out[pos] = 2.0 ** (1 - nu) / gamma_fn(nu) * s[pos] ** nu * kv(nu, s[pos])
    return out


def gaussian_field(n, corr_len, kind, rng, nu=0.5):
    """Unit-variance stationary field on an ``n x n`` cell grid of the unit square.

    Circulant embedding: the covariance is laid out on a torus padded well
    beyond the correlation length, its FFT gives the spectrum, and white
    noise is colored by the square root of that spectrum.
    """
    h = 1.0 / n
    m = int(2 ** np.ceil(np.log2(max(2 * n, n + 6 * corr_len / h))))
    lag = np.minimum(np.arange(m), m - np.arange(m)) * h
    r = np.hypot(lag[:, None], lag[None, :])
    spectrum = np.fft.fft2(_covariance(r, kind, corr_len, nu)).real
    spectrum = np.clip(spectrum, 0.0, None)
    noise = rng.standard_normal((m, m)) + 1j * rng.standard_normal((m, m))
    z = np.fft.fft2(np.sqrt(spectrum / (m * m)) * noise).real
    return z[:n, :n]


def generate_field(kind, params=None, seed=0, n=64):
    """Positive diffusivity field of class ``kind``.

    ``params``: ``mean`` and ``std`` of log-diffusivity, ``corr_len`` in
    domain units, ``nu`` (von Karman smoothness), ``quantile`` (binary
    threshold). Binary classes take ``exp(mean - std)`` below the threshold
    and ``exp(mean + std)`` above it.
    """
    if kind not in FIELD_CLASSES:
        raise ValueError(f"unknown field class {kind!r}; expected one of {FIELD_CLASSES}")
    p = {"mean": 0.0, "std": 1.0, "corr_len": 0.15, "nu": 0.5, "quantile": 0.5}
    p.update(params or {})
    if p["corr_len"] <= 0:
        raise ValueError("corr_len must be positive")
    rng = np.random.default_rng(seed)
    family = "gaussian" if kind.startswith("gaussian") else "von-karman"
    z = gaussian_field(n, p["corr_len"], family, rng, p["nu"])
    if kind.endswith("binary"):
        high = z > np.quantile(z, p["quantile"])
        logk = np.where(high, p["mean"] + p["std"], p["mean"] - p["std"])
    else:
        logk = p["mean"] + p["std"] * z
    return CoefficientField(np.exp(logk), kind, p)


# -- solver ---------------------------------------------------------------

@dataclass
class Well:
    x: float
    y: float
    rate: float
    t_on: float = 0.0
    t_off: float = np.inf
    width: float = 0.0  # Gaussian footprint; 0 puts the whole rate in one cell

    def active(self, t0, t1):
        """Fraction of the step (t0, t1] during which the well injects."""
        overlap = min(t1, self.t_off) - max(t0, self.t_on)
        return max(overlap, 0.0) / (t1 - t0)


@dataclass
class DiffusionScenario:
    kappa: np.ndarray
    u0: np.ndarray
    dt: float
    snapshot_steps: np.ndarray
    wells: list = field(default_factory=list)
    scheme: str = "implicit-euler"  # unconditionally stable and monotone

    def __post_init__(self):
        self.kappa = np.asarray(self.kappa, dtype=float)
        self.u0 = np.asarray(self.u0, dtype=float)
        self.snapshot_steps = np.asarray(self.snapshot_steps, dtype=int)
        if self.kappa.shape != self.u0.shape or self.kappa.ndim != 2 or self.kappa.shape[0] != self.kappa.shape[1]:
            raise ValueError(f"kappa {self.kappa.shape} and u0 {self.u0.shape} must be matching square grids")
        if np.any(self.kappa <= 0):
            raise ValueError("diffusivity must be strictly positive")
        if self.dt <= 0 or np.any(np.diff(self.snapshot_steps) <= 0) or self.snapshot_steps.min() < 0:
            raise ValueError("need dt > 0 and increasing nonnegative snapshot steps")

    @property
    def n(self):
        return self.kappa.shape[0]

    @property
    def times(self):
        return self.snapshot_steps * self.dt


@dataclass
class OracleSolution:
    scenario: DiffusionScenario
    times: np.ndarray
    fields: np.ndarray  # (n_snap, n, n), indexed [ix, iy]
    mass: np.ndarray  # integral of u at each snapshot
    injected: np.ndarray  # cumulative injected amount at each snapshot

    @property
    def centers(self):
        n = self.scenario.n
        return (np.arange(n) + 0.5) / n


def diffusion_operator(kappa):
    """Sparse ``L`` with ``du/dt = L u`` (per unit cell area), no-flux walls.

    Face coefficients are harmonic means of the adjacent cells. On a
    uniform grid the face length over the center distance is 1, so
    ``L = -(1/h^2) * graph_laplacian(k_face)``. Columns sum to zero, which
    makes the update conservative.
    """
    n = kappa.shape[0]
    idx = np.arange(n * n).reshape(n, n)
    kx = 2.0 * kappa[1:, :] * kappa[:-1, :] / (kappa[1:, :] + kappa[:-1, :])
    ky = 2.0 * kappa[:, 1:] * kappa[:, :-1] / (kappa[:, 1:] + kappa[:, :-1])
    a = np.concatenate([idx[1:, :].ravel(), idx[:, 1:].ravel()])
    b = np.concatenate([idx[:-1, :].ravel(), idx[:, :-1].ravel()])
    w = np.concatenate([kx.ravel(), ky.ravel()])
    off = sp.coo_matrix((np.concatenate([w, w]), (np.concatenate([a, b]), np.concatenate([b, a]))), shape=(n * n,) * 2)
    off = off.tocsr()
    diag = np.asarray(off.sum(axis=1)).ravel()
    return (off - sp.diags(diag)) * (n * n)


def well_footprint(well, n):
    """Cell weights (summing to 1) over which a well's rate is spread."""
    c = (np.arange(n) + 0.5) / n
    if well.width <= 0:
        w = np.zeros((n, n))
        w[min(int(well.x * n), n - 1), min(int(well.y * n), n - 1)] = 1.0
        return w
    g = np.exp(-((c[:, None] - well.x) ** 2 + (c[None, :] - well.y) ** 2) / (2 * well.width**2))
    return g / g.sum()


def solve_diffusion(scenario, debug=False):
    """Backward-Euler integration up to the last snapshot step.

    Each well adds ``rate * dt`` (times its active fraction) per step to
    the domain integral. ``debug`` asserts the discrete maximum principle
    every step when there are no sources.
    """
    n = scenario.n
    h2 = 1.0 / (n * n)
    lop = diffusion_operator(scenario.kappa)
    lu = splu((sp.identity(n * n, format="csc") - scenario.dt * lop).tocsc())
    foot = [well_footprint(w, n).ravel() / h2 for w in scenario.wells]
    u = scenario.u0.ravel().copy()
    lo, hi = u.min(), u.max()
    scale = max(np.abs(u).max(), 1.0)
    total_rate = sum(abs(w.rate) for w in scenario.wells)
    bound = 1e6 * (scale + total_rate * scenario.dt * (scenario.snapshot_steps[-1] + 1) / h2)

    snaps, mass, injected = [], [], []
    cum = 0.0
    want = set(scenario.snapshot_steps.tolist())
    for step in range(scenario.snapshot_steps[-1] + 1):
        if step > 0:
            t0, t1 = (step - 1) * scenario.dt, step * scenario.dt
            rhs = u.copy()
            for w, f in zip(scenario.wells, foot):
                frac = w.active(t0, t1)
                if frac:
                    rhs += scenario.dt * w.rate * frac * f
                    cum += scenario.dt * w.rate * frac
            u = lu.solve(rhs)
            if not np.all(np.isfinite(u)) or np.abs(u).max() > bound:
                raise SolverError(f"field blew up at step {step} (t={t1:g})")
            if debug and not scenario.wells:
                tol = 1e-12 * max(abs(lo), abs(hi), 1.0)
                if u.min() < lo - tol or u.max() > hi + tol:
                    raise SolverError(f"maximum principle violated at step {step}")
        if step in want:
            snaps.append(u.reshape(n, n).copy())
            mass.append(u.sum() * h2)
            injected.append(cum)
    return OracleSolution(scenario, scenario.times, np.array(snaps), np.array(mass), np.array(injected))


def heat_kernel(x, y, t, kappa, mass=1.0, x0=0.5, y0=0.5):
    """Free-space solution of ``u_t = kappa lap u`` for a point release at ``(x0, y0)``."""
    r2 = (x - x0) ** 2 + (y - y0) ** 2
    return mass / (4 * np.pi * kappa * t) * np.exp(-r2 / (4 * kappa * t))


# -- observations ---------------------------------------------------------

def _interpolator(solution, values):
    c = solution.centers
    return RegularGridInterpolator((c, c), values, method="linear")


def _clamp(points, n):
    lo, hi = 0.5 / n, 1.0 - 0.5 / n
    return np.clip(points, lo, hi)


def _well_xy(scenario):
    return np.array([[w.x, w.y] for w in scenario.wells]).reshape(-1, 2)


def node_features(solution, points):
    """``[log kappa at the containing cell, distance to the nearest well]``."""
    n = solution.scenario.n
    ij = np.minimum((points * n).astype(int), n - 1)
    logk = np.log(solution.scenario.kappa[ij[:, 0], ij[:, 1]])
    wells = _well_xy(solution.scenario)
    if wells.shape[0]:
        dist = np.sqrt(((points[:, None, :] - wells[None]) ** 2).sum(-1)).min(axis=1)
    else:
        dist = np.full(points.shape[0], np.sqrt(2.0))
    return np.stack([logk, dist], axis=1)


def interpolate_field(solution, k, points):
    """Bilinear interpolation of snapshot ``k`` (clamped to the cell-center hull)."""
    n = solution.scenario.n
    return _interpolator(solution, solution.fields[k])(_clamp(points, n))


def gradient_weights(field2d, alpha=0.1):
    """Per-cell sampling weight ``alpha + |grad u| / max |grad u|``."""
    gx, gy = np.gradient(field2d)
    g = np.hypot(gx, gy)
    gmax = g.max()
    return alpha + (g / gmax if gmax > 0 else np.zeros_like(g))


def adaptive_points(weights, n_points, rng):
    """Draw cells with probability proportional to ``weights`` and jitter
    each point uniformly inside its cell."""
    n = weights.shape[0]
    p = weights.ravel() / weights.sum()
    cells = rng.choice(p.size, n_points, p=p)
    ij = np.stack(np.unravel_index(cells, weights.shape), axis=1)
    return (ij + rng.uniform(size=(n_points, 2))) / n


def sample_observations(solution, n_nodes, mode="static", seed=0, alpha=0.1, count_jitter=0.25):
    """Observe an oracle solution on a point cloud.

    Static mode draws one seeded uniform point set (wells included) and
    interpolates every snapshot onto it. Adaptive mode draws a fresh set per
    snapshot with density following ``gradient_weights``; snapshot node
    counts vary in ``[n_nodes, (1 + count_jitter) n_nodes]``.
    """
    if n_nodes < 16:
        raise ValueError(f"n_nodes must be >= 16, got {n_nodes}")
    rng = np.random.default_rng(seed)
    scen = solution.scenario
    wells = _well_xy(scen)
    scalars = {"rate": float(sum(w.rate for w in scen.wells))}
    meta = {"anchors": format_anchors(wells) if wells.shape[0] else "", "oracle_resolution": str(scen.n)}
    times = solution.times
    if mode == "static":
        pts = np.concatenate([wells, rng.uniform(size=(n_nodes - wells.shape[0], 2))])
        fields = np.stack([interpolate_field(solution, k, pts) for k in range(times.size)])[..., None]
        return PointCloudSample(pts, node_features(solution, pts), times, fields, scalars, "static", meta)
    if mode != "adaptive":
        raise ValueError(f"unknown mode {mode!r}")
    coords, feats, fields = [], [], []
    for k in range(times.size):
        n_k = n_nodes + int(rng.integers(0, int(count_jitter * n_nodes) + 1))
        pts = np.concatenate([wells, adaptive_points(gradient_weights(solution.fields[k], alpha), n_k - wells.shape[0], rng)])
        coords.append(pts)
        feats.append(node_features(solution, pts))
        fields.append(interpolate_field(solution, k, pts)[:, None])
    return PointCloudSample(coords, feats, times, fields, scalars, "adaptive", meta)


def subsample(sample, n_nodes, seed=0):
    """Seeded subset of ``n_nodes`` nodes per snapshot, anchors kept first."""
    rng = np.random.default_rng(seed)
    n_anchor = sample.anchors.shape[0]

    def pick(n):
        rest = rng.choice(np.arange(n_anchor, n), n_nodes - n_anchor, replace=False)
        return np.concatenate([np.arange(n_anchor), np.sort(rest)])

    if sample.mesh_mode == "static":
        idx = pick(sample.coords.shape[0])
        return PointCloudSample(sample.coords[idx], sample.features[idx], sample.times, sample.fields[:, idx],
                                dict(sample.scalars), "static", dict(sample.metadata))
    idxs = [pick(c.shape[0]) for c in sample.coords]
    return PointCloudSample([c[i] for c, i in zip(sample.coords, idxs)], [f[i] for f, i in zip(sample.features, idxs)],
                            sample.times, [z[i] for z, i in zip(sample.fields, idxs)],
                            dict(sample.scalars), "adaptive", dict(sample.metadata))


# -- datasets -------------------------------------------------------------

@dataclass
class DatagenConfig:
    n_samples: int = 320
    grid: int = 64
    n_snapshots: int = 10
    n_steps: int = 100
    t_end: float = 1.0
    n_nodes: int = 256
    n_nodes_full: int = 0  # > n_nodes emits a paired full-resolution file per split
    mode: str = "static"
    train_classes: tuple = ("gaussian-continuous",)
    test_classes: tuple = ()  # non-empty: held-out classes for the test split only
    split: tuple = (8, 1, 1)
    seed: int = 0
    log_mean: float = float(np.log(0.02))
    log_std: float = 1.0
    corr_len: float = 0.15
    n_wells: int = 1
    rate_min: float = 0.5
    rate_max: float = 1.5
    well_width: float = 0.08
    alpha: float = 0.1

    def __post_init__(self):
        self.train_classes = tuple(self.train_classes)
        self.test_classes = tuple(self.test_classes)
        self.split = tuple(int(s) for s in self.split)
        for c in self.train_classes + self.test_classes:
            if c not in FIELD_CLASSES:
                raise ValueError(f"unknown field class {c!r}")
        if set(self.train_classes) & set(self.test_classes):
            raise ValueError("held-out test classes overlap the training classes")

    def split_counts(self):
        total = sum(self.split)
        n_train = self.n_samples * self.split[0] // total
        n_val = self.n_samples * self.split[1] // total
        return {"train": n_train, "val": n_val, "test": self.n_samples - n_train - n_val}


def make_scenario(cfg, kind, seed):
    rng = np.random.default_rng(seed)
    kappa = generate_field(kind, {"mean": cfg.log_mean, "std": cfg.log_std, "corr_len": cfg.corr_len},
                           int(rng.integers(2**31)), cfg.grid).values
    wells = [
        Well(*rng.uniform(0.2, 0.8, size=2), rate=float(rng.uniform(cfg.rate_min, cfg.rate_max)), width=cfg.well_width)
        for _ in range(cfg.n_wells)
    ]
    steps = np.sort(rng.choice(np.arange(1, cfg.n_steps + 1), cfg.n_snapshots, replace=False))
    return DiffusionScenario(kappa, np.zeros_like(kappa), cfg.t_end / cfg.n_steps, steps, wells)


def _scenario_plan(cfg):
    """(scenario_id, split, field class, seed) for every sample."""
    counts = cfg.split_counts()
    plan, sid = [], 0
    for split in ("train", "val", "test"):
        classes = cfg.test_classes if split == "test" and cfg.test_classes else cfg.train_classes
        for j in range(counts[split]):
            seed = int(np.random.SeedSequence([cfg.seed, sid]).generate_state(1)[0])
            plan.append((sid, split, classes[j % len(classes)], seed))
            sid += 1
    return plan


def _make_sample(args):
    cfg, (sid, split, kind, seed) = args
    sol = solve_diffusion(make_scenario(cfg, kind, seed))
    n_obs = cfg.n_nodes_full if cfg.n_nodes_full else cfg.n_nodes
    full = sample_observations(sol, n_obs, cfg.mode, seed + 1, cfg.alpha)
    meta = {"scenario_id": str(sid), "field_class": kind, "split": split, "seed": str(seed)}
    full.metadata.update(meta)
    if not cfg.n_nodes_full:
        full.metadata["resolution"] = "train"
        return full, None
    sub = subsample(full, cfg.n_nodes, seed + 2)
    sub.metadata["resolution"] = "train"
    full.metadata["resolution"] = "full"
    return sub, full


def _workers():
    try:
        return max(1, int(os.environ.get("APT_THREADS", "1")))
    except ValueError:
        return 1


def generate_samples(cfg):
    """In-memory dataset: ``{split: [samples]}`` plus ``{split_full: ...}``
    when dual resolution is on. Independent of the worker count."""
    plan = _scenario_plan(cfg)
    jobs = [(cfg, p) for p in plan]
    if _workers() > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(_workers()) as ex:
            made = list(ex.map(_make_sample, jobs, chunksize=4))
    else:
        made = [_make_sample(j) for j in jobs]
    out = {s: [] for s in ("train", "val", "test")}
    if cfg.n_nodes_full:
        out.update({f"{s}_full": [] for s in ("train", "val", "test")})
    for (sid, split, _, _), (sub, full) in zip(plan, made):
        out[split].append(sub)
        if full is not None:
            out[f"{split}_full"].append(full)
    return out


def build_dataset(cfg, out_dir):
    """Generate, solve, sample and write one APTDS file per split plus ``manifest.json``."""
    from .dataio import write_dataset

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = generate_samples(cfg)
    files = {}
    for name, samples in data.items():
        path = out_dir / f"{name}.aptds"
        write_dataset(path, samples, scalar_names=("rate",), dim=2, d_a=2, d_z=1)
        files[name] = path.name
    manifest = {
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()},
        "files": files,
        "classes": {s: sorted({x.metadata["field_class"] for x in data[s]}) for s in ("train", "val", "test")},
        "scenarios": [
            {"scenario_id": sid, "split": split, "field_class": kind, "seed": seed}
            for sid, split, kind, seed in _scenario_plan(cfg)
        ],
        "dual_resolution": bool(cfg.n_nodes_full),
    }
    tmp = out_dir / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    os.replace(tmp, out_dir / "manifest.json")
    return manifest
