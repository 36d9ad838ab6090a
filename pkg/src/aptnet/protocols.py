"""Evaluation reports and experiment protocols: plain evaluation, branch
ablation, super-resolution, held-out field class and cross-dataset training."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import math
from pathlib import Path

import numpy as np

from .dataio import atomic_write
from .errors import ProtocolError
from .metrics import max_buildup, plume_error, r_squared, rel_l2, rel_pressure_error
from .model import APT
from .training import TrainData, predict_sample, train

METRICS = ("r2", "rel_l2", "plume", "buildup")
ROW_FIELDS = ("sample_id", "t", "metric", "value", "variant", "group")
PLUME_THRESHOLD = 0.01


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


@dataclass
class EvalReport:
    """Metric rows plus aggregates that must be recomputable from them.

    A row is ``(sample_id, t, metric, value, variant, group)``; ``group``
    names the column group of the protocol (a resolution, a split, a
    training regime). NaN rows mark undefined metrics and are left out of
    the aggregates.
    """

    protocol: str
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    aggregates: dict = field(default_factory=dict)

    def add(self, sample_id, t, metric, value, variant, group):
        self.rows.append({"sample_id": str(sample_id), "t": str(t), "metric": metric, "value": float(value),
                          "variant": variant, "group": group})

    def compute_aggregates(self):
        buckets = {}
        for r in self.rows:
            buckets.setdefault((r["variant"], r["group"], r["metric"]), []).append(r["value"])
        out = {}
        for key, vals in buckets.items():
            v = np.array([x for x in vals if np.isfinite(x)])
            out[key] = (float(v.mean()) if v.size else float("nan"), float(v.std()) if v.size else float("nan"), int(v.size))
        return out

    def finalize(self):
        self.aggregates = self.compute_aggregates()
        return self

    def verify(self, rel=1e-12):
        """True if every stored aggregate equals the recomputation from rows."""
        fresh = self.compute_aggregates()
        if set(fresh) != set(self.aggregates):
            return False
        for key, (m, s, n) in self.aggregates.items():
            fm, fs, fn = fresh[key]
            if n != fn:
                return False
            for a, b in ((m, fm), (s, fs)):
                if not (math.isnan(a) and math.isnan(b)) and not math.isclose(a, b, rel_tol=rel, abs_tol=1e-300):
                    return False
        return True

    def mean(self, metric, variant=None, group=None):
        keys = [k for k in self.aggregates if k[2] == metric and (variant is None or k[0] == variant)
                and (group is None or k[1] == group)]
        if len(keys) != 1:
            raise KeyError(f"{len(keys)} aggregates match metric={metric} variant={variant} group={group}")
        return self.aggregates[keys[0]][0]

    def variants(self):
        return sorted({r["variant"] for r in self.rows})

    def groups(self):
        return list(dict.fromkeys(r["group"] for r in self.rows))

    # -- text formats ----------------------------------------------------
    def to_tsv(self):
        """Machine format: ``#key=value`` metadata lines, then tab-separated
        ``row`` and ``aggregate`` records with a fixed field order."""
        lines = [f"#protocol={self.protocol}"]
        lines += [f"#{k}={v}" for k, v in sorted(self.metadata.items())]
        lines.append("\t".join(("kind",) + ROW_FIELDS))
        for r in self.rows:
            lines.append("\t".join(["row"] + [_fmt(r[f]) for f in ROW_FIELDS]))
        lines.append("\t".join(("kind", "variant", "group", "metric", "mean", "std", "n")))
        for (v, g, m), (mean, std, n) in sorted(self.aggregates.items()):
            lines.append("\t".join(["aggregate", v, g, m, _fmt(mean), _fmt(std), str(n)]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_tsv(cls, text):
        meta, rows, aggs = {}, [], {}
        protocol = ""
        for line in text.splitlines():
            if line.startswith("#"):
                k, v = line[1:].split("=", 1)
                if k == "protocol":
                    protocol = v
                else:
                    meta[k] = v
                continue
            parts = line.split("\t")
            if parts[0] == "row":
                r = dict(zip(ROW_FIELDS, parts[1:]))
                r["value"] = float(r["value"])
                rows.append(r)
            elif parts[0] == "aggregate":
                v, g, m, mean, std, n = parts[1:]
                aggs[(v, g, m)] = (float(mean), float(std), int(n))
        return cls(protocol, rows, meta, aggs)

    def table(self):
        """Aligned human-readable table of the aggregates (mean +- std)."""
        metrics = [m for m in METRICS if any(k[2] == m for k in self.aggregates)]
        metrics += sorted({k[2] for k in self.aggregates} - set(metrics))
        cols = ["variant", "group"] + metrics
        body = []
        for v in self.variants():
            for g in self.groups():
                if not any(k[0] == v and k[1] == g for k in self.aggregates):
                    continue
                cells = [v, g]
                for m in metrics:
                    a = self.aggregates.get((v, g, m))
                    cells.append("-" if a is None else f"{a[0]:.4f} +- {a[1]:.4f}")
                body.append(cells)
        widths = [max(len(str(r[i])) for r in [cols] + body) for i in range(len(cols))]
        fmt = "  ".join(f"{{:<{w}}}" for w in widths)
        out = [f"protocol: {self.protocol}", fmt.format(*cols), fmt.format(*("-" * w for w in widths))]
        out += [fmt.format(*r) for r in body]
        for k, v in sorted(self.metadata.items()):
            out.append(f"{k}: {v}")
        return "\n".join(out) + "\n"

    def write(self, prefix):
        """Write ``<prefix>.tsv`` (machine) and ``<prefix>.txt`` (table)."""
        prefix = Path(prefix)
        atomic_write(prefix.with_suffix(".tsv"), self.to_tsv().encode("utf-8"))
        atomic_write(prefix.with_suffix(".txt"), self.table().encode("utf-8"))

    @classmethod
    def read(cls, path):
        return cls.from_tsv(Path(path).read_text(encoding="utf-8"))


# -- evaluation -----------------------------------------------------------

def sample_metrics(truth, pred, threshold=PLUME_THRESHOLD):
    """Metric values for one sample's stacked physical fields (initial state zero)."""
    ref = max_buildup(truth, 0.0)
    return {
        "r2": r_squared(truth, pred),
        "rel_l2": rel_l2(truth, pred),
        "plume": plume_error(truth, pred, threshold),
        "buildup": rel_pressure_error(truth, pred, ref) if ref > 0 else float("nan"),
    }


def evaluate(model, stats, samples, report, variant="fused", group="test", seed=0, threshold=PLUME_THRESHOLD):
    """Append per-sample metric rows for raw (physical) ``samples``."""
    for i, s in enumerate(samples):
        pred = predict_sample(model, stats.apply(s), seed)
        if s.mesh_mode == "static":
            truth, p = s.fields, stats.invert_fields(pred)
        else:
            truth, p = np.concatenate(s.fields), stats.invert_fields(np.concatenate(pred))
        sid = s.metadata.get("scenario_id", str(i))
        for name, value in sample_metrics(truth, p, threshold).items():
            report.add(sid, "all", name, value, variant, group)
    return report


def run_plain(model, stats, samples, variant=None, group="test"):
    report = EvalReport("plain", metadata={"n_samples": len(samples)})
    return evaluate(model, stats, samples, report, variant or model.cfg.variant, group).finalize()


def _fresh(model_cfg, **changes):
    return APT(replace(model_cfg, **changes))


def run_ablation(train_samples, val_samples, test_samples, model_cfg, train_cfg, variants=("global-only", "local-only", "fused")):
    """Train each encoder variant with identical seeds and data, evaluate on the test split."""
    report = EvalReport("ablate", metadata={"variants": ",".join(variants), "n_test": len(test_samples)})
    data = TrainData.from_raw("ablate", train_samples, val_samples)
    models = {}
    for v in variants:
        model = _fresh(model_cfg, variant=v)
        result, _ = train(model, [data], train_cfg)
        model.load_state_dict(result.best_state)
        evaluate(model, data.stats, test_samples, report, v, "test")
        models[v] = model
    report.finalize()
    if set(variants) >= {"fused", "global-only", "local-only"}:
        fused = report.mean("rel_l2", "fused")
        single = min(report.mean("rel_l2", "global-only"), report.mean("rel_l2", "local-only"))
        report.metadata["trend_fused_best"] = str(fused <= single)
    return report, models, data.stats


def _check_dual(train_res, full_res):
    if len(train_res) != len(full_res) or not train_res:
        raise ProtocolError(f"need paired resolutions, got {len(train_res)} and {len(full_res)} samples")
    for a, b in zip(train_res, full_res):
        if a.metadata.get("resolution") != "train" or b.metadata.get("resolution") != "full":
            raise ProtocolError("resolution metadata missing or wrong; super-resolution needs dual-resolution data")
        if a.metadata.get("scenario_id") != b.metadata.get("scenario_id"):
            raise ProtocolError(f"scenario ids differ: {a.metadata.get('scenario_id')} vs {b.metadata.get('scenario_id')}")


def run_superres(model, stats, train_res, full_res):
    """Evaluate one model at its training node count and at full resolution."""
    _check_dual(train_res, full_res)
    report = EvalReport("superres", metadata={
        "train_nodes": train_res[0].node_counts()[0], "full_nodes": full_res[0].node_counts()[0],
        "n_samples": len(train_res),
    })
    evaluate(model, stats, train_res, report, model.cfg.variant, "train-res")
    evaluate(model, stats, full_res, report, model.cfg.variant, "full-res")
    report.finalize()
    delta = report.mean("r2", group="full-res") - report.mean("r2", group="train-res")
    report.metadata["delta_r2"] = repr(delta)
    return report


def superres_delta(report):
    """Full-resolution minus training-resolution mean R2, recomputed from rows."""
    fresh = EvalReport(report.protocol, list(report.rows)).finalize()
    return fresh.mean("r2", group="full-res") - fresh.mean("r2", group="train-res")


def check_class_disjoint(train_samples, test_samples):
    train_cls = {s.metadata.get("field_class") for s in train_samples}
    test_cls = {s.metadata.get("field_class") for s in test_samples}
    overlap = train_cls & test_cls
    if overlap or None in train_cls | test_cls:
        raise ProtocolError(f"train/test field classes must be disjoint and labelled; overlap {sorted(map(str, overlap))}")
    return sorted(train_cls), sorted(test_cls)


def run_ood(train_samples, val_samples, test_samples, model_cfg, train_cfg, model=None, stats=None):
    """Train on the mixture classes (unless a trained model is given) and
    report training-split and held-out-class metrics side by side."""
    train_cls, test_cls = check_class_disjoint(train_samples, test_samples)
    if model is None:
        data = TrainData.from_raw("ood", train_samples, val_samples)
        model = APT(model_cfg)
        result, _ = train(model, [data], train_cfg)
        model.load_state_dict(result.best_state)
        stats = data.stats
    report = EvalReport("ood", metadata={"train_classes": ",".join(train_cls), "test_classes": ",".join(test_cls)})
    evaluate(model, stats, train_samples, report, model.cfg.variant, "train")
    evaluate(model, stats, test_samples, report, model.cfg.variant, "test-ood")
    report.finalize()
    report.metadata["r2_gap"] = repr(report.mean("r2", group="train") - report.mean("r2", group="test-ood"))
    return report, model, stats


def run_crossdataset(target, auxiliary, model_cfg, train_cfg, mix=(0.5, 0.5), budgets=None):
    """Target-only versus joint training, both scored on the target test split.

    ``target`` and ``auxiliary`` are ``(train, val, test)`` sample lists; they
    may differ in node count and field class. ``budgets`` gives the node
    budget for (target, auxiliary).
    """
    t_train, t_val, t_test = target
    a_train, a_val, _ = auxiliary
    d_target = TrainData.from_raw("target", t_train, t_val)
    d_aux = TrainData.from_raw("auxiliary", a_train, a_val)
    budgets = budgets or (train_cfg.budgets(1)[0],) * 2
    report = EvalReport("crossdataset", metadata={
        "target_nodes": t_train[0].node_counts()[0], "auxiliary_nodes": a_train[0].node_counts()[0],
        "target_classes": ",".join(sorted({s.metadata.get("field_class", "?") for s in t_train})),
        "auxiliary_classes": ",".join(sorted({s.metadata.get("field_class", "?") for s in a_train})),
        "mix": ",".join(map(str, mix)), "n_target_test": len(t_test),
    })
    solo = APT(model_cfg)
    res_solo, _ = train(solo, [d_target], replace(train_cfg, node_budget=budgets[0], mix=None))
    solo.load_state_dict(res_solo.best_state)
    evaluate(solo, d_target.stats, t_test, report, model_cfg.variant, "target-only")
    joint = APT(model_cfg)
    res_joint, _ = train(joint, [d_target, d_aux], replace(train_cfg, node_budget=list(budgets), mix=list(mix)))
    joint.load_state_dict(res_joint.best_state)
    evaluate(joint, d_target.stats, t_test, report, model_cfg.variant, "joint")
    report.finalize()
    draws = np.bincount(res_joint.draws, minlength=2)
    report.metadata["joint_draws"] = f"target={draws[0]},auxiliary={draws[1]}"
    ratio = report.mean("rel_l2", group="target-only") / report.mean("rel_l2", group="joint")
    report.metadata["improvement_ratio"] = repr(ratio)
    report.metadata["trend_joint_better"] = str(ratio > 1)
    return report, {"target-only": res_solo, "joint": res_joint}
