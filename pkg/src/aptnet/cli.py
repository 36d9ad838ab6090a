"""Command-line entry point: ``aptnet datagen | train | eval``.

Exit codes: 0 ok, 2 configuration, 3 data, 4 numerical (NaN), 5 I/O.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
from pathlib import Path
import sys

import numpy as np

from .config import RunConfig, help_text
from .errors import ConfigError, DataError, NumericalError, ProtocolError, SchemaError
from .tensor import precision

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4, 5
log = logging.getLogger("aptnet")


def _threads():
    """Cap BLAS threads at ``APT_THREADS`` when set."""
    n = os.environ.get("APT_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(n)))


def _load_split(data_dir, name):
    from .dataio import read_dataset

    path = Path(data_dir) / f"{name}.aptds"
    if not path.exists():
        raise DataError(f"{path} not found")
    return read_dataset(path)


def _load_run_config(args):
    return RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()


# -- datagen --------------------------------------------------------------

def cmd_datagen(args):
    from .datagen import build_dataset

    cfg = _load_run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = build_dataset(cfg.datagen_config(), out)
    (out / "config.echo").write_text(cfg.echo())
    for split in ("train", "val", "test"):
        print(f"{split}: {sum(1 for s in manifest['scenarios'] if s['split'] == split)} samples, "
              f"classes {','.join(manifest['classes'][split])}")
    return EXIT_OK


# -- train ----------------------------------------------------------------

def _train_data(cfg, data_dirs):
    from .training import TrainData

    datasets, schema = [], None
    for d in data_dirs:
        tr, va = _load_split(d, "train"), _load_split(d, "val")
        this = (tr.dim, tr.d_a, tr.d_z, tr.scalar_names)
        if schema is not None and this != schema:
            raise SchemaError(f"dataset {d} has schema {this}, expected {schema}")
        schema = this
        datasets.append(TrainData.from_raw(Path(d).name or str(d), tr.samples, va.samples))
    return datasets, schema


def cmd_train(args):
    from .dataio import load_checkpoint, save_checkpoint
    from .model import APT
    from .training import NormalizationStats, TrainResult, make_optimizer, train, write_loss_log

    cfg = _load_run_config(args)
    mix = [float(x) for x in args.mix.split(",")] if args.mix else None
    tcfg = cfg.train_config(len(args.data), mix)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with precision(cfg["train.precision"]):
        datasets, (dim, d_a, d_z, names) = _train_data(cfg, args.data)
        mcfg = cfg.model_config(dim, d_a, d_z, names, args.variant)
        model = APT(mcfg)
        optimizer = make_optimizer(tcfg.optimizer, model.named_parameters(), tcfg.weight_decay)
        result = TrainResult()
        if args.resume:
            model, ck = load_checkpoint(args.resume, model)
            optimizer.load_state_dict(ck.optimizer)
            st = ck.state
            result = TrainResult(history=list(st.get("history", [])), draws=list(st.get("draws", [])),
                                 best_val=float(st.get("best_val", float("inf"))), best_epoch=int(st.get("best_epoch", -1)),
                                 step=int(st["step"]), epoch=int(st["epoch"]))
            for d in datasets:  # keep the stats the run started with
                if d.name in ck.stats:
                    d.stats = NormalizationStats.from_dict(ck.stats[d.name])
        echo = {"run": cfg.to_dict(), "model": mcfg.to_dict(), "datasets": [d.name for d in datasets],
                "mix": tcfg.mix, "variant": mcfg.variant}
        stats = {d.name: d.stats.to_dict() for d in datasets}
        best_before = result.best_epoch

        def state(res):
            return {"step": res.step, "epoch": res.epoch, "best_val": res.best_val, "best_epoch": res.best_epoch,
                    "history": res.history, "draws": res.draws}

        result, optimizer = train(model, datasets, tcfg, optimizer, out / cfg["paths.loss_log"], result)
        save_checkpoint(out / cfg["paths.final_checkpoint"], model, stats, echo, state(result), optimizer.state_dict())
        if result.best_epoch != best_before or not (out / cfg["paths.best_checkpoint"]).exists():
            final = model.state_dict()
            model.load_state_dict(result.best_state)
            save_checkpoint(out / cfg["paths.best_checkpoint"], model, stats, echo, state(result))
            model.load_state_dict(final)
    write_loss_log(out / cfg["paths.loss_log"], result.history)
    draws = np.bincount(result.draws, minlength=len(datasets)).tolist() if result.draws else [0] * len(datasets)
    manifest = {"datasets": [str(d) for d in args.data], "dataset_ids": [d.name for d in datasets],
                "mix": tcfg.mix, "variant": mcfg.variant, "steps": result.step, "epochs": result.epoch,
                "draws_per_dataset": draws, "best_val": result.best_val, "best_epoch": result.best_epoch,
                "resumed_from": str(args.resume) if args.resume else None}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (out / "config.echo").write_text(cfg.echo())
    print(f"trained {result.step} steps; best validation rel-L2 {result.best_val:.4g} at epoch {result.best_epoch}")
    return EXIT_OK


# -- eval -----------------------------------------------------------------

def _stats_for(ck, data_dir):
    from .training import NormalizationStats

    if not ck.stats:
        raise SchemaError("checkpoint carries no normalization stats")
    key = Path(data_dir).name
    return NormalizationStats.from_dict(ck.stats.get(key, next(iter(ck.stats.values()))))


def _check_schema(model, ds, where):
    cfg = model.cfg
    want = (cfg.dim, cfg.d_a, cfg.d_z, tuple(cfg.scalar_names))
    got = (ds.dim, ds.d_a, ds.d_z, tuple(ds.scalar_names))
    if want != got:
        labels = ("dim", "d_a", "d_z", "scalars")
        diff = [f"{k}: expected {a}, found {b}" for k, a, b in zip(labels, want, got) if a != b]
        raise SchemaError(f"{where} does not match the checkpoint: " + "; ".join(diff))


def cmd_eval(args):
    from .dataio import load_checkpoint
    from .protocols import run_ablation, run_crossdataset, run_ood, run_plain, run_superres

    cfg = _load_run_config(args)
    protocol = args.protocol or cfg["eval.protocol"]
    out = Path(args.out or Path(args.checkpoint).parent)
    out.mkdir(parents=True, exist_ok=True)
    with precision(cfg["train.precision"]):
        model, ck = load_checkpoint(args.checkpoint)
        data = args.data[0]
        if protocol == "plain":
            ds = _load_split(data, cfg["eval.split"])
            _check_schema(model, ds, data)
            report = run_plain(model, _stats_for(ck, data), ds.samples, group=cfg["eval.split"])
        elif protocol == "superres":
            full_path = Path(data) / "test_full.aptds"
            if not full_path.exists():
                raise ProtocolError(f"super-resolution needs dual-resolution data; {full_path} is missing")
            low, high = _load_split(data, "test"), _load_split(data, "test_full")
            _check_schema(model, low, data)
            report = run_superres(model, _stats_for(ck, data), low.samples, high.samples)
        elif protocol == "ood":
            tr, te = _load_split(data, "train"), _load_split(data, "test")
            _check_schema(model, te, data)
            report, _, _ = run_ood(tr.samples, [], te.samples, model.cfg, None, model, _stats_for(ck, data))
        elif protocol == "ablate":
            tr, va, te = (_load_split(data, s) for s in ("train", "val", "test"))
            _check_schema(model, tr, data)
            report, _, _ = run_ablation(tr.samples, va.samples, te.samples, model.cfg, cfg.train_config(1))
        elif protocol == "crossdataset":
            if len(args.data) != 2:
                raise ProtocolError("crossdataset needs --data TARGET AUXILIARY")
            target = [_load_split(args.data[0], s).samples for s in ("train", "val", "test")]
            aux = [_load_split(args.data[1], s).samples for s in ("train", "val", "test")]
            budgets = cfg["train.node_budget"] * (2 if len(cfg["train.node_budget"]) == 1 else 1)
            mix = [float(x) for x in args.mix.split(",")] if args.mix else (cfg["train.mix"] or [0.5, 0.5])
            report, _ = run_crossdataset(target, aux, model.cfg, cfg.train_config(1), mix, budgets[:2])
        else:
            raise ConfigError(f"unknown protocol {protocol!r}")
    report.metadata.setdefault("checkpoint", str(args.checkpoint))
    report.write(out / cfg["paths.report"])
    print(report.table(), end="")
    return EXIT_OK


# -- entry ----------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="aptnet",
        description="Adaptive physics transformer: data generation, training and evaluation.",
        epilog="configuration keys (key = value, one per line):\n" + help_text()
        + "\n\nexit codes: 0 ok, 2 config, 3 data, 4 numerical, 5 io; APT_THREADS caps worker threads.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate oracle datasets")
    p.add_argument("--config", help="run config file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="run config file")
    p.add_argument("--data", nargs="+", required=True, help="dataset directories (train.aptds, val.aptds)")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--variant", choices=("fused", "global-only", "local-only"), help="override model.variant")
    p.add_argument("--mix", help="comma-separated draw weights, one per dataset")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run an evaluation protocol")
    p.add_argument("--config", help="run config file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", nargs="+", required=True, help="dataset directory (two for crossdataset)")
    p.add_argument("--protocol", choices=("plain", "ablate", "superres", "ood", "crossdataset"))
    p.add_argument("--mix", help="crossdataset draw weights")
    p.add_argument("--out", help="report directory (default: the checkpoint's)")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _threads():
            return args.func(args)
    except ConfigError as exc:
        print("configuration error:", file=sys.stderr)
        for p in exc.problems:
            print(f"  {p}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, SchemaError, ProtocolError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
