"""Direct one-step training: normalization, subsampling, loss, optimizers,
schedules and a multi-dataset training loop."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
import logging
import math
import time
import warnings

import numpy as np

from .errors import DataError, NumericalError, StateError
from .geometry import PointCloudSample, format_anchors, rescale_coords
from .metrics import rel_l2
from .tensor import Tensor, lp_norm, no_grad

log = logging.getLogger(__name__)


# -- normalization --------------------------------------------------------

def _moments(blocks, what):
    x = np.concatenate([np.asarray(b, dtype=float).reshape(-1, np.shape(b)[-1]) for b in blocks])
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    flat = std == 0
    if flat.any():
        warnings.warn(f"{what} channels {np.flatnonzero(flat).tolist()} are constant; using std = 1", stacklevel=3)
        std = np.where(flat, 1.0, std)
    return mean, std


@dataclass
class NormalizationStats:
    feature_mean: np.ndarray
    feature_std: np.ndarray
    field_mean: np.ndarray
    field_std: np.ndarray
    scalar_mean: dict
    scalar_std: dict
    coord_lo: np.ndarray
    coord_hi: np.ndarray
    t_max: float
    extent: float = 200.0

    def apply(self, sample):
        """Normalized copy: z-scored features/fields/scalars, coordinates
        mapped onto ``[0, extent]`` through the training bounding box, and
        times divided by ``t_max``."""
        bounds = (self.coord_lo, self.coord_hi)

        def fix(c, f, z):
            return (rescale_coords(c, self.extent, bounds), (f - self.feature_mean) / self.feature_std,
                    (z - self.field_mean) / self.field_std)

        scalars = {k: (v - self.scalar_mean[k]) / self.scalar_std[k] for k, v in sample.scalars.items()}
        times = sample.times / self.t_max
        meta = dict(sample.metadata)
        if meta.get("anchors"):
            meta["anchors"] = format_anchors(rescale_coords(sample.anchors, self.extent, bounds))
        if sample.mesh_mode == "static":
            c, f, z = fix(sample.coords, sample.features, sample.fields)
        else:
            c, f, z = map(list, zip(*(fix(*sample.snapshot(k)) for k in range(sample.n_times))))
        return PointCloudSample(c, f, times, z, scalars, sample.mesh_mode, meta)

    def invert(self, sample):
        span = self.coord_hi - self.coord_lo

        def unfix(c, f, z):
            return (c / self.extent * span + self.coord_lo, f * self.feature_std + self.feature_mean,
                    self.invert_fields(z))

        scalars = {k: v * self.scalar_std[k] + self.scalar_mean[k] for k, v in sample.scalars.items()}
        times = sample.times * self.t_max
        meta = dict(sample.metadata)
        if meta.get("anchors"):
            meta["anchors"] = format_anchors(sample.anchors / self.extent * span + self.coord_lo)
        if sample.mesh_mode == "static":
            c, f, z = unfix(sample.coords, sample.features, sample.fields)
        else:
            c, f, z = map(list, zip(*(unfix(*sample.snapshot(k)) for k in range(sample.n_times))))
        return PointCloudSample(c, f, times, z, scalars, sample.mesh_mode, meta)

    def invert_fields(self, z):
        return np.asarray(z) * self.field_std + self.field_mean

    def to_dict(self):
        out = {}
        for k, v in asdict(self).items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("feature_mean", "feature_std", "field_mean", "field_std", "coord_lo", "coord_hi"):
            d[k] = np.asarray(d[k], dtype=float)
        return cls(**d)


def fit_normalization(samples, extent=200.0):
    """Per-channel statistics pooled over every node (and snapshot) of the training split."""
    samples = list(samples)
    if not samples:
        raise DataError("cannot fit normalization on an empty split")
    feats, fields, coords = [], [], []
    for s in samples:
        if s.mesh_mode == "static":
            feats.append(s.features)
            coords.append(s.coords)
            fields.append(s.fields)
        else:
            feats.extend(s.features)
            coords.extend(s.coords)
            fields.extend(s.fields)
    fm, fs = _moments(feats, "feature")
    zm, zs = _moments(fields, "field")
    names = sorted(samples[0].scalars)
    sm, ss = {}, {}
    if names:
        m, sd = _moments([np.array([[s.scalars[k] for k in names] for s in samples])], "scalar")
        sm = {k: float(v) for k, v in zip(names, m)}
        ss = {k: float(v) for k, v in zip(names, sd)}
    allc = np.concatenate(coords)
    t_max = max(float(s.times.max()) for s in samples)
    return NormalizationStats(fm, fs, zm, zs, sm, ss, allc.min(axis=0), allc.max(axis=0), t_max if t_max > 0 else 1.0,
                              extent)


# -- instances and loss ---------------------------------------------------

@dataclass
class TrainingInstance:
    coords: np.ndarray
    features: np.ndarray
    t: float
    time_index: int
    targets: np.ndarray
    scalars: dict
    anchors: np.ndarray


def sample_training_instance(sample, node_budget, seed):
    """Seeded uniform node subset of one uniformly drawn snapshot.

    Adaptive samples are subsampled from that snapshot's own node set.
    """
    if sample.n_times == 0:
        raise DataError("sample has no snapshots")
    rng = np.random.default_rng(seed)
    k = int(rng.integers(sample.n_times))
    coords, feats, z = sample.snapshot(k)
    n = coords.shape[0]
    if node_budget >= n:
        if node_budget > n:
            warnings.warn(f"node budget {node_budget} exceeds the {n} available nodes; using all", stacklevel=2)
        idx = np.arange(n)
    else:
        idx = np.sort(rng.choice(n, node_budget, replace=False))
    return TrainingInstance(coords[idx], feats[idx], float(sample.times[k]), k, z[idx], dict(sample.scalars),
                            sample.anchors)


def relative_lp_loss(pred, target, p=2, eps=1e-8):
    """``||z - zhat||_p / (||z||_p + eps)`` per instance, the norm running over
    all query points and channels, averaged over a leading batch axis.

    (N, d_z) inputs are a single instance; (B, N, d_z) a batch.
    """
    target = target if isinstance(target, Tensor) else Tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"loss dimension mismatch: pred {pred.shape} vs target {target.shape}")
    if p < 1 or eps <= 0:
        raise ValueError("need p >= 1 and eps > 0")
    b = pred.shape[0] if pred.ndim == 3 else 1
    num = lp_norm((pred - target).reshape(b, -1), p, axis=-1)
    den = lp_norm(target.reshape(b, -1), p, axis=-1) + eps
    return (num / den).mean()


# -- optimizers -----------------------------------------------------------

class Optimizer:
    def __init__(self, named_params, weight_decay=0.0):
        self.params = dict(named_params)
        self.weight_decay = weight_decay
        self.step_count = 0
        self.buffers = {}

    def _grads(self):
        missing = [n for n, p in self.params.items() if p.grad is None]
        if missing:
            raise StateError(f"no gradient for {missing[:5]}{' ...' if len(missing) > 5 else ''}; call backward first")
        return {n: p.grad for n, p in self.params.items()}

    def state_dict(self):
        out = {f"{k}/{n}": v for k, bufs in self.buffers.items() for n, v in bufs.items()}
        out["step"] = np.array([self.step_count], dtype=np.float64)
        return out

    def load_state_dict(self, state):
        state = dict(state)
        self.step_count = int(np.asarray(state.pop("step", [0]))[0])
        for key, value in state.items():
            kind, name = key.split("/", 1)
            if name not in self.params or kind not in self.buffers:
                raise StateError(f"optimizer buffer {key} does not match the parameters")
            self.buffers[kind][name] = np.asarray(value, dtype=self.params[name].dtype).copy()


class AdamW(Optimizer):
    def __init__(self, named_params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        super().__init__(named_params, weight_decay)
        self.betas = betas
        self.eps = eps
        self.buffers = {"m": {n: np.zeros_like(p.data) for n, p in self.params.items()},
                        "v": {n: np.zeros_like(p.data) for n, p in self.params.items()}}

    def step(self, lr):
        grads = self._grads()
        b1, b2 = self.betas
        self.step_count += 1
        c1 = 1 - b1**self.step_count
        c2 = 1 - b2**self.step_count
        m, v = self.buffers["m"], self.buffers["v"]
        for n, p in self.params.items():
            g = grads[n]
            m[n] = b1 * m[n] + (1 - b1) * g
            v[n] = b2 * v[n] + (1 - b2) * g * g
            upd = (m[n] / c1) / (np.sqrt(v[n] / c2) + self.eps)
            p.data = (p.data * (1 - lr * self.weight_decay) - lr * upd).astype(p.dtype)


class Lion(Optimizer):
    def __init__(self, named_params, betas=(0.9, 0.99), weight_decay=0.0):
        super().__init__(named_params, weight_decay)
        self.betas = betas
        self.buffers = {"m": {n: np.zeros_like(p.data) for n, p in self.params.items()}}

    def step(self, lr):
        grads = self._grads()
        b1, b2 = self.betas
        self.step_count += 1
        m = self.buffers["m"]
        for n, p in self.params.items():
            g = grads[n]
            upd = np.sign(b1 * m[n] + (1 - b1) * g)
            p.data = (p.data * (1 - lr * self.weight_decay) - lr * upd).astype(p.dtype)
            m[n] = b2 * m[n] + (1 - b2) * g


def make_optimizer(kind, named_params, weight_decay=0.0):
    if kind == "adamw":
        return AdamW(named_params, weight_decay=weight_decay)
    if kind == "lion":
        return Lion(named_params, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {kind!r}")


def optimizer_step(optimizer, lr):
    optimizer.step(lr)


def lr_schedule(step, total, warmup_fraction, base_lr, kind="cosine", cycles=4):
    """Linear warmup to ``base_lr``, then cosine decay to 0 (``cosine``) or
    ``cycles`` cosine decays with restarts (``cyclic``)."""
    if not 0 <= warmup_fraction < 1:
        raise ValueError("warmup_fraction must be in [0, 1)")
    warm = int(round(warmup_fraction * total))
    if step < warm:
        return base_lr * step / warm
    span = max(total - warm, 1)
    frac = min((step - warm) / span, 1.0)
    if kind == "cosine":
        pass
    elif kind == "cyclic":
        frac = frac * cycles
        frac = 1.0 if frac >= cycles else frac - math.floor(frac)
    else:
        raise ValueError(f"unknown schedule {kind!r}")
    return base_lr * 0.5 * (1 + math.cos(math.pi * frac))


def clip_gradients(params, max_norm):
    """Scale all gradients so their global norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
    if max_norm and total > max_norm:
        s = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * np.asarray(s, dtype=p.grad.dtype)
    return total


# -- training loop --------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    node_budget: object = 256  # int, or one int per dataset
    steps_per_epoch: int = 0  # 0: ceil(total training samples / batch_size)
    lr: float = 1e-3
    weight_decay: float = 0.0
    optimizer: str = "adamw"
    schedule: str = "cosine"
    warmup: float = 0.05
    p: int = 2
    eps: float = 1e-8
    clip: float = 1.0
    seed: int = 0
    mix: object = None  # one weight per dataset; None = proportional to size
    val_every: int = 1
    val_max_samples: int = 0  # 0: whole validation split
    time_limit: float = 0.0  # seconds; 0 = none

    def budgets(self, n_datasets):
        b = self.node_budget
        b = [int(b)] * n_datasets if np.ndim(b) == 0 else [int(x) for x in b]
        if len(b) != n_datasets:
            raise ValueError(f"{len(b)} node budgets for {n_datasets} datasets")
        return b


@dataclass
class TrainData:
    """One dataset: normalized train/val samples and the stats used."""

    name: str
    train: list
    val: list
    stats: NormalizationStats

    @classmethod
    def from_raw(cls, name, train, val=(), stats=None):
        stats = stats or fit_normalization(train)
        return cls(name, [stats.apply(s) for s in train], [stats.apply(s) for s in val], stats)


@dataclass
class TrainResult:
    history: list = field(default_factory=list)  # per-epoch dicts
    draws: list = field(default_factory=list)  # dataset index per step
    best_val: float = float("inf")
    best_state: dict = None
    best_epoch: int = -1
    step: int = 0
    epoch: int = 0
    elapsed: float = 0.0
    stopped_early: bool = False


def collate(instances, scalar_names):
    coords = np.stack([x.coords for x in instances])
    feats = np.stack([x.features for x in instances])
    t = np.array([x.t for x in instances])
    scalars = {k: np.array([x.scalars[k] for x in instances]) for k in scalar_names}
    anchors = [x.anchors for x in instances]
    targets = np.stack([x.targets for x in instances])
    return coords, feats, t, scalars, anchors, targets


def predict_sample(model, sample, seed=0, query=None, chunk_size=None):
    """Normalized predictions for every snapshot of a normalized sample.

    Returns an (n_times, N, d_z) array (static) or a list per snapshot
    (adaptive). ``query`` overrides the query coordinates of a static sample.
    """
    names = model.cfg.scalar_names
    with no_grad():
        if sample.mesh_mode == "static":
            nt = sample.n_times
            q = sample.coords if query is None else query
            out = model(np.broadcast_to(sample.coords, (nt,) + sample.coords.shape),
                        np.broadcast_to(sample.features, (nt,) + sample.features.shape), sample.times,
                        {k: np.full(nt, sample.scalars[k]) for k in names},
                        np.broadcast_to(q, (nt,) + np.shape(q)), [sample.anchors] * nt, [seed] * nt,
                        chunk_size=chunk_size)
            return np.asarray(out.data, dtype=float)
        preds = []
        for k in range(sample.n_times):
            c, f, _ = sample.snapshot(k)
            out = model(c, f, sample.times[k], {n: sample.scalars[n] for n in names}, None, sample.anchors, seed,
                        chunk_size=chunk_size)
            preds.append(np.asarray(out.data, dtype=float))
        return preds


def validation_error(model, data, max_samples=0):
    """Mean relative L2 over validation (sample, snapshot) pairs, in physical units."""
    samples = data.val[:max_samples] if max_samples else data.val
    errs = []
    for s in samples:
        pred = predict_sample(model, s)
        for k in range(s.n_times):
            truth = data.stats.invert_fields(s.snapshot(k)[2])
            e = rel_l2(truth, data.stats.invert_fields(pred[k]))
            if np.isfinite(e):
                errs.append(e)
    return float(np.mean(errs)) if errs else float("nan")


def _mix_weights(cfg, datasets):
    if cfg.mix is None:
        w = np.array([len(d.train) for d in datasets], dtype=float)
    else:
        w = np.asarray(cfg.mix, dtype=float)
        if w.shape != (len(datasets),) or np.any(w < 0) or w.sum() <= 0:
            raise ValueError(f"mix weights {cfg.mix} do not fit {len(datasets)} datasets")
    return w / w.sum()


def _draw_batch(cfg, datasets, weights, budgets, step):
    rng = np.random.default_rng([cfg.seed, step])
    di = int(rng.choice(len(datasets), p=weights))
    pool = datasets[di].train
    idx = rng.choice(len(pool), cfg.batch_size, replace=len(pool) < cfg.batch_size)
    seeds = rng.integers(0, 2**31, size=cfg.batch_size)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        inst = [sample_training_instance(pool[i], budgets[di], int(s)) for i, s in zip(idx, seeds)]
    sizes = {x.coords.shape[0] for x in inst}
    if len(sizes) > 1:  # clouds smaller than the budget: keep the most common size
        common = max(sizes, key=lambda n: sum(x.coords.shape[0] == n for x in inst))
        inst = [x for x in inst if x.coords.shape[0] == common]
    return di, inst, seeds[: len(inst)]


def train(model, datasets, cfg, optimizer=None, log_path=None, result=None, on_epoch=None):
    """Train ``model`` on one or more ``TrainData`` sets.

    Every step draws a dataset by mix weight and a batch from it, so
    datasets may differ in node count and mesh. Randomness is a function of
    ``(cfg.seed, step)``, which makes resumed runs continue exactly.
    """
    datasets = list(datasets)
    if not datasets or any(not d.train for d in datasets):
        raise DataError("every dataset needs a non-empty training split")
    weights = _mix_weights(cfg, datasets)
    budgets = cfg.budgets(len(datasets))
    n_train = sum(len(d.train) for d in datasets)
    spe = cfg.steps_per_epoch or max(1, math.ceil(n_train / cfg.batch_size))
    total = cfg.epochs * spe
    optimizer = optimizer or make_optimizer(cfg.optimizer, model.named_parameters(), cfg.weight_decay)
    result = result or TrainResult()
    params = model.parameters()
    names = model.cfg.scalar_names
    start = time.perf_counter() - result.elapsed
    step = result.step
    lr = lr_schedule(min(step, total), total, cfg.warmup, cfg.lr, cfg.schedule)
    for epoch in range(step // spe, cfg.epochs):
        losses = []
        for _ in range(step % spe, spe):
            lr = lr_schedule(step, total, cfg.warmup, cfg.lr, cfg.schedule)
            di, inst, seeds = _draw_batch(cfg, datasets, weights, budgets, step)
            coords, feats, t, scalars, anchors, targets = collate(inst, names)
            pred = model(coords, feats, t, scalars, None, anchors, [int(s) for s in seeds])
            loss = relative_lp_loss(pred, targets, cfg.p, cfg.eps)
            model.zero_grad()
            loss.backward()
            gnorm = clip_gradients(params, cfg.clip)
            value = float(loss.data)
            if not (np.isfinite(value) and np.isfinite(gnorm)):
                raise NumericalError(f"non-finite loss {value} at step {step} (lr={lr:.3g}, grad norm={gnorm:.3g})",
                                     step, lr, gnorm)
            optimizer.step(lr)
            result.draws.append(di)
            losses.append(value)
            step += 1
        result.step = step
        result.epoch = epoch + 1
        result.elapsed = time.perf_counter() - start
        val = float("nan")
        last = epoch + 1 == cfg.epochs
        out_of_time = bool(cfg.time_limit) and result.elapsed > cfg.time_limit
        if (epoch + 1) % cfg.val_every == 0 or last or out_of_time:
            vals = [validation_error(model, d, cfg.val_max_samples) for d in datasets if d.val]
            val = float(np.mean(vals)) if vals else float("nan")
            if np.isfinite(val) and val < result.best_val:
                result.best_val, result.best_epoch = val, epoch + 1
                result.best_state = model.state_dict()
        row = {"step": step, "epoch": epoch + 1, "lr": lr, "train_loss": float(np.mean(losses)) if losses else float("nan"),
               "val_loss": val}
        result.history.append(row)
        log.info("epoch %d step %d lr %.3g train %.4g val %.4g", epoch + 1, step, lr, row["train_loss"], val)
        if log_path is not None:
            write_loss_log(log_path, result.history)
        if on_epoch is not None:
            on_epoch(result, optimizer)
        if out_of_time and not last:
            result.stopped_early = True
            break
    if result.best_state is None:
        result.best_state = model.state_dict()
    return result, optimizer


LOG_FIELDS = ("step", "epoch", "lr", "train_loss", "val_loss")


def write_loss_log(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_FIELDS)
        for row in history:
            w.writerow([row["step"], row["epoch"], repr(float(row["lr"])), repr(float(row["train_loss"])),
                        repr(float(row["val_loss"]))])


def read_loss_log(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{"step": int(r["step"]), "epoch": int(r["epoch"]), "lr": float(r["lr"]),
             "train_loss": float(r["train_loss"]), "val_loss": float(r["val_loss"])} for r in rows]
