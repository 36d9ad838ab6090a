"""Flat ``key = value`` run configuration with documented defaults.

Keys are namespaced (``data.``, ``model.``, ``train.``, ``eval.``,
``paths.``). Unknown keys and malformed values are collected and reported
together. ``#`` starts a comment.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datagen import FIELD_CLASSES, DatagenConfig
from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig


@dataclass(frozen=True)
class Key:
    name: str
    kind: str  # int, float, str, bool, ints, floats, strs
    default: object
    doc: str
    choices: tuple = ()


_KEYS = [
    # data
    Key("data.n_samples", "int", 320, "scenarios generated in total (split by data.split)"),
    Key("data.grid", "int", 64, "oracle grid cells per side"),
    Key("data.n_snapshots", "int", 10, "stored snapshots per scenario, at irregular solver steps"),
    Key("data.n_steps", "int", 100, "implicit solver steps up to data.t_end"),
    Key("data.t_end", "float", 1.0, "simulated time horizon"),
    Key("data.n_nodes", "int", 256, "observation nodes per cloud (minimum per snapshot in adaptive mode)"),
    Key("data.n_nodes_full", "int", 0, "if > data.n_nodes, also write full-resolution files (dual resolution)"),
    Key("data.mode", "str", "static", "observation mesh", ("static", "adaptive")),
    Key("data.train_classes", "strs", ["gaussian-continuous"], "field classes of the train/val splits", FIELD_CLASSES),
    Key("data.test_classes", "strs", [], "held-out field classes for the test split (empty: same as train)", FIELD_CLASSES),
    Key("data.split", "ints", [8, 1, 1], "train:val:test ratio"),
    Key("data.seed", "int", 0, "master seed; scenario seeds derive from (seed, scenario id)"),
    Key("data.log_mean", "float", float(np.log(0.02)), "mean log-diffusivity"),
    Key("data.log_std", "float", 1.0, "std of log-diffusivity"),
    Key("data.corr_len", "float", 0.15, "correlation length of the coefficient field (domain units)"),
    Key("data.n_wells", "int", 1, "injection wells per scenario"),
    Key("data.rate_min", "float", 0.5, "lowest well rate"),
    Key("data.rate_max", "float", 1.5, "highest well rate"),
    Key("data.well_width", "float", 0.08, "Gaussian footprint of a well (0: single cell)"),
    Key("data.alpha", "float", 0.1, "background weight of gradient-adaptive sampling"),
    # model
    Key("model.d_h", "int", 48, "hidden width"),
    Key("model.n_heads", "int", 3, "attention heads"),
    Key("model.d_e", "int", 0, "conditioning width (0: same as model.d_h)"),
    Key("model.n_supernodes", "int", 64, "supernodes N_s (clamped to the cloud size)"),
    Key("model.n_latent", "int", 32, "latent tokens N_lat"),
    Key("model.n_enc", "int", 1, "DiT blocks in the encoder"),
    Key("model.n_app", "int", 1, "DiT blocks in the approximator"),
    Key("model.n_dec", "int", 1, "cross-attention blocks in the decoder"),
    Key("model.mlp_ratio", "int", 4, "MLP expansion inside blocks"),
    Key("model.grid_size", "int", 16, "points per axis of the learnable position table"),
    Key("model.pe", "str", "hybrid", "spatial position encoding (hybrid: sinusoids plus a grid table)",
        ("grid", "sinusoidal", "hybrid")),
    Key("model.extent", "float", 200.0, "coordinates are rescaled onto [0, extent]"),
    Key("model.radius", "float", 20.0, "local-branch radius in rescaled units"),
    Key("model.max_neighbors", "int", 128, "neighbors kept per supernode"),
    Key("model.supernode_strategy", "str", "farthest-point", "supernode selection",
        ("farthest-point", "seeded-uniform")),
    Key("model.variant", "str", "fused", "encoder variant", ("fused", "global-only", "local-only")),
    Key("model.gate_init", "float", 0.0, "initial gate logit of the fused variant"),
    Key("model.gate_clamp", "float", 20.0, "constant gate logit magnitude of the single-branch variants"),
    Key("model.time_scale", "float", 100.0, "time is multiplied by this before its sinusoidal encoding"),
    Key("model.scalar_scale", "float", 10.0, "scalar conditions are multiplied by this before encoding"),
    Key("model.seed", "int", 0, "parameter initialization seed"),
    # train
    Key("train.optimizer", "str", "adamw", "update rule", ("adamw", "lion")),
    Key("train.lr", "float", 1e-3, "peak learning rate"),
    Key("train.weight_decay", "float", 0.0, "decoupled weight decay"),
    Key("train.epochs", "int", 100, "epochs"),
    Key("train.steps_per_epoch", "int", 0, "optimizer steps per epoch (0: training samples / batch)"),
    Key("train.warmup", "float", 0.05, "warmup fraction of all steps"),
    Key("train.schedule", "str", "cosine", "decay after warmup", ("cosine", "cyclic")),
    Key("train.batch", "int", 16, "instances per step"),
    Key("train.node_budget", "ints", [256], "nodes per instance; one value, or one per dataset"),
    Key("train.p", "int", 2, "order of the per-point norm in the relative loss"),
    Key("train.eps", "float", 1e-8, "stabilizer in the relative loss denominator"),
    Key("train.clip", "float", 1.0, "global gradient-norm clip (0: off)"),
    Key("train.mix", "floats", [], "dataset draw weights (empty: proportional to size)"),
    Key("train.seed", "int", 0, "seed of batch, time and subset draws"),
    Key("train.val_every", "int", 1, "epochs between validation passes"),
    Key("train.val_max_samples", "int", 0, "validation samples used (0: all)"),
    Key("train.time_limit", "float", 0.0, "stop after this many seconds (0: no limit)"),
    Key("train.precision", "str", "float32", "float dtype of the run", ("float32", "float64")),
    # eval
    Key("eval.protocol", "str", "plain", "default protocol", ("plain", "ablate", "superres", "ood", "crossdataset")),
    Key("eval.split", "str", "test", "split scored by the plain protocol", ("train", "val", "test")),
    Key("eval.plume_threshold", "float", 0.01, "plume indicator threshold in physical units"),
    Key("eval.seed", "int", 0, "supernode seed at evaluation"),
    # paths
    Key("paths.loss_log", "str", "loss_log.csv", "loss log file name inside the run directory"),
    Key("paths.best_checkpoint", "str", "best.ckpt", "best-validation checkpoint file name"),
    Key("paths.final_checkpoint", "str", "final.ckpt", "last-step checkpoint file name"),
    Key("paths.report", "str", "report", "report file stem (.tsv and .txt are written)"),
]
KEYS = {k.name: k for k in _KEYS}


def _format(kind, value):
    if kind in ("ints", "floats", "strs"):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if kind == "float":
        return repr(float(value))
    if kind == "bool":
        return "true" if value else "false"
    return str(value)


def _parse(key, text):
    kind = key.kind
    items = [t.strip() for t in text.split(",") if t.strip()]
    if kind == "int":
        value = int(text)
    elif kind == "float":
        value = float(text)
    elif kind == "bool":
        if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {text!r}")
        value = text.lower() in ("true", "1", "yes")
    elif kind == "ints":
        value = [int(t) for t in items]
    elif kind == "floats":
        value = [float(t) for t in items]
    elif kind == "strs":
        value = items
    else:
        value = text
    if key.choices:
        for v in value if isinstance(value, list) else [value]:
            if v not in key.choices:
                raise ValueError(f"{v!r} is not one of {', '.join(key.choices)}")
    return value


class RunConfig:
    """Effective configuration: every registered key with its value."""

    def __init__(self, values=None):
        self.values = {k.name: k.default for k in _KEYS}
        self.values.update(values or {})

    def __getitem__(self, name):
        return self.values[name]

    @classmethod
    def parse(cls, text, overrides=None):
        values, problems = {}, []
        lines = list(enumerate(text.splitlines(), 1)) + [(0, f"{k}={v}") for k, v in (overrides or {}).items()]
        for lineno, raw in lines:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            where = f"line {lineno}" if lineno else "override"
            if "=" not in line:
                problems.append(f"{where}: expected 'key = value', got {raw.strip()!r}")
                continue
            name, value = (s.strip() for s in line.split("=", 1))
            if name not in KEYS:
                problems.append(f"{where}: unknown key {name!r}")
                continue
            try:
                values[name] = _parse(KEYS[name], value)
            except ValueError as exc:
                problems.append(f"{where}: {name}: {exc}")
        cfg = cls(values)
        problems += cfg.check()
        if problems:
            raise ConfigError(problems)
        return cfg

    @classmethod
    def load(cls, path=None, overrides=None):
        return cls.parse(Path(path).read_text(encoding="utf-8") if path else "", overrides)

    def check(self):
        v = self.values
        problems = []
        for name in ("data.n_samples", "data.grid", "data.n_snapshots", "data.n_steps", "train.epochs", "train.batch",
                     "model.d_h", "model.n_heads", "model.n_supernodes", "model.n_latent", "model.max_neighbors"):
            if v[name] < 1:
                problems.append(f"{name} must be >= 1")
        if v["data.n_steps"] < v["data.n_snapshots"]:
            problems.append("data.n_steps must be >= data.n_snapshots")
        if v["data.n_nodes"] < 16:
            problems.append("data.n_nodes must be >= 16")
        if v["data.n_nodes_full"] and v["data.n_nodes_full"] <= v["data.n_nodes"]:
            problems.append("data.n_nodes_full must exceed data.n_nodes (or be 0)")
        if len(v["data.split"]) != 3 or min(v["data.split"], default=0) < 0 or sum(v["data.split"]) <= 0:
            problems.append("data.split needs three nonnegative ratios")
        if not v["data.train_classes"]:
            problems.append("data.train_classes must name at least one class")
        if set(v["data.train_classes"]) & set(v["data.test_classes"]):
            problems.append("data.test_classes overlaps data.train_classes")
        if v["model.d_h"] % max(v["model.n_heads"], 1):
            problems.append("model.d_h must be divisible by model.n_heads")
        if not 0 <= v["train.warmup"] < 1:
            problems.append("train.warmup must be in [0, 1)")
        if v["train.lr"] <= 0:
            problems.append("train.lr must be positive")
        if v["train.eps"] <= 0 or v["train.p"] < 1:
            problems.append("train.eps must be > 0 and train.p >= 1")
        if not v["train.node_budget"] or min(v["train.node_budget"]) < 1:
            problems.append("train.node_budget must list positive counts")
        elif min(v["train.node_budget"]) < v["model.n_latent"]:
            problems.append("train.node_budget must be at least model.n_latent")
        if any(w < 0 for w in v["train.mix"]):
            problems.append("train.mix weights must be nonnegative")
        return problems

    def echo(self):
        """Every key with its effective value, one per line, in registry order."""
        return "\n".join(f"{k.name} = {_format(k.kind, self.values[k.name])}" for k in _KEYS) + "\n"

    def to_dict(self):
        return dict(self.values)

    # -- typed views -----------------------------------------------------
    def datagen_config(self):
        v = self.values
        return DatagenConfig(
            n_samples=v["data.n_samples"], grid=v["data.grid"], n_snapshots=v["data.n_snapshots"],
            n_steps=v["data.n_steps"], t_end=v["data.t_end"], n_nodes=v["data.n_nodes"],
            n_nodes_full=v["data.n_nodes_full"], mode=v["data.mode"], train_classes=tuple(v["data.train_classes"]),
            test_classes=tuple(v["data.test_classes"]), split=tuple(v["data.split"]), seed=v["data.seed"],
            log_mean=v["data.log_mean"], log_std=v["data.log_std"], corr_len=v["data.corr_len"],
            n_wells=v["data.n_wells"], rate_min=v["data.rate_min"], rate_max=v["data.rate_max"],
            well_width=v["data.well_width"], alpha=v["data.alpha"],
        )

    def model_config(self, dim, d_a, d_z, scalar_names, variant=None):
        v = self.values
        return ModelConfig(
            dim=dim, d_a=d_a, d_z=d_z, scalar_names=tuple(scalar_names), d_h=v["model.d_h"],
            n_heads=v["model.n_heads"], d_e=v["model.d_e"], n_supernodes=v["model.n_supernodes"],
            n_latent=v["model.n_latent"], n_enc=v["model.n_enc"], n_app=v["model.n_app"], n_dec=v["model.n_dec"],
            mlp_ratio=v["model.mlp_ratio"], grid_size=v["model.grid_size"], extent=v["model.extent"],
            radius=v["model.radius"], max_neighbors=v["model.max_neighbors"],
            supernode_strategy=v["model.supernode_strategy"], variant=variant or v["model.variant"], pe=v["model.pe"],
            gate_init=v["model.gate_init"], gate_clamp=v["model.gate_clamp"], time_scale=v["model.time_scale"],
            scalar_scale=v["model.scalar_scale"], seed=v["model.seed"],
        )

    def train_config(self, n_datasets=1, mix=None):
        v = self.values
        budgets = v["train.node_budget"]
        if len(budgets) == 1:
            budgets = budgets * n_datasets
        if len(budgets) != n_datasets:
            raise ConfigError(f"train.node_budget lists {len(budgets)} values for {n_datasets} datasets")
        mix = list(mix) if mix else (v["train.mix"] or None)
        if mix is not None and len(mix) != n_datasets:
            raise ConfigError(f"{len(mix)} mix weights for {n_datasets} datasets")
        return TrainConfig(
            epochs=v["train.epochs"], batch_size=v["train.batch"], node_budget=budgets,
            steps_per_epoch=v["train.steps_per_epoch"], lr=v["train.lr"], weight_decay=v["train.weight_decay"],
            optimizer=v["train.optimizer"], schedule=v["train.schedule"], warmup=v["train.warmup"], p=v["train.p"],
            eps=v["train.eps"], clip=v["train.clip"], seed=v["train.seed"], mix=mix, val_every=v["train.val_every"],
            val_max_samples=v["train.val_max_samples"], time_limit=v["train.time_limit"],
        )


def help_text():
    """One line per key: name, default and description."""
    width = max(len(k.name) for k in _KEYS)
    lines = []
    for k in _KEYS:
        extra = f" [{'|'.join(k.choices)}]" if k.choices and k.kind == "str" else ""
        lines.append(f"  {k.name:<{width}}  = {_format(k.kind, k.default):<16} {k.doc}{extra}")
    return "\n".join(lines)
