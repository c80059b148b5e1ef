"""Regression metrics, per-depth tables and the enhancement x head ablation.

Depths are handled in millimetres.  RMSE is stored in mm; the x10^-2 display
scaling of the published tables is applied only when rendering text.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import EmptyBatch, UnknownDepth, ZeroTarget, ZeroVariance

UM_PER_MM = 1000.0


def _pair(pred, target):
    pred = np.asarray(pred, dtype=float).ravel()
    target = np.asarray(target, dtype=float).ravel()
    if pred.size == 0 or pred.shape != target.shape:
        raise EmptyBatch(f"need equal non-empty inputs, got {pred.shape} and {target.shape}")
    return pred, target


def rmse(pred, target):
    p, y = _pair(pred, target)
    r = p - y
    return math.sqrt(float(np.sum(r * r)) / r.size)


def mae(pred, target):
    p, y = _pair(pred, target)
    return float(np.sum(np.abs(p - y))) / p.size


def mape(pred, target):
    p, y = _pair(pred, target)
    if np.any(y == 0):
        raise ZeroTarget("MAPE is undefined for zero targets")
    return 100.0 * float(np.sum(np.abs(p - y) / np.abs(y))) / p.size


def r2_score(pred, target):
    p, y = _pair(pred, target)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise ZeroVariance("R^2 is undefined when every target is equal")
    return 1.0 - float(np.sum((p - y) ** 2)) / ss_tot


@dataclass
class OverallMetrics:
    rmse: float  # mm
    mae: float  # um
    mape: float | None  # %
    r2: float | None
    count: int


def metrics(pred, target) -> OverallMetrics:
    """Overall metrics; MAPE / R^2 come back as ``None`` when undefined."""
    p, y = _pair(pred, target)
    try:
        mp = mape(p, y)
    except ZeroTarget:
        mp = None
    try:
        r2 = r2_score(p, y)
    except ZeroVariance:
        r2 = None
    return OverallMetrics(rmse(p, y), mae(p, y) * UM_PER_MM, mp, r2, int(p.size))


@dataclass
class DepthRow:
    depth: float  # mm
    mae: float  # um
    mape: float  # %
    mean_pred: float  # mm
    count: int


@dataclass
class EvalReport:
    overall: OverallMetrics
    per_depth: list = field(default_factory=list)

    def to_dict(self):
        return {"overall": asdict(self.overall), "per_depth": [asdict(r) for r in self.per_depth]}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def overall_csv(self):
        o = self.overall
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rmse_mm", "mae_um", "mape_pct", "r2", "count"])
        w.writerow([_fmt(o.rmse), _fmt(o.mae), _fmt(o.mape), _fmt(o.r2), o.count])
        return buf.getvalue()

    def per_depth_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["depth_mm", "mae_um", "mape_pct", "mean_pred_mm", "count"])
        for r in self.per_depth:
            w.writerow([f"{r.depth:.2f}", _fmt(r.mae), _fmt(r.mape), _fmt(r.mean_pred), r.count])
        return buf.getvalue()

    def render_text(self):
        o = self.overall
        lines = [
            f"{'RMSE (x1e-2)':>14} {'MAE (um)':>10} {'MAPE (%)':>10} {'R2':>8} {'n':>6}",
            f"{o.rmse * 100:>14.3f} {o.mae:>10.2f} {_txt(o.mape, '.3f'):>10} "
            f"{_txt(o.r2, '.4f'):>8} {o.count:>6}",
        ]
        if self.per_depth:
            lines.append("")
            lines.append("depth (mm) " + " ".join(f"{r.depth:>7.2f}" for r in self.per_depth))
            lines.append("MAE (um)   " + " ".join(f"{r.mae:>7.2f}" for r in self.per_depth))
            lines.append("MAPE (%)   " + " ".join(f"{r.mape:>7.2f}" for r in self.per_depth))
            lines.append("mean (mm)  " + " ".join(f"{r.mean_pred:>7.3f}" for r in self.per_depth))
        return "\n".join(lines) + "\n"


def _fmt(v):
    return "" if v is None else repr(float(v))


def _txt(v, spec):
    return "n/a" if v is None else format(v, spec)


def per_depth_report(pred, target, depth_set=None, decimals=6) -> EvalReport:
    """Overall metrics plus one row per true depth, ordered shallow to deep.

    ``depth_set`` (mm) restricts the admissible labels; anything else raises
    :class:`UnknownDepth`.  Labels are grouped after rounding to ``decimals``.
    """
    p, y = _pair(pred, target)
    keys = np.round(y, decimals)
    if depth_set is not None:
        allowed = set(np.round(np.asarray(depth_set, dtype=float), decimals).tolist())
        unknown = sorted(set(keys.tolist()) - allowed)
        if unknown:
            raise UnknownDepth(f"depth label(s) {unknown} not in the configured depth set")
    rows = []
    for d in sorted(set(keys.tolist())):
        sel = keys == d
        pp, yy = p[sel], y[sel]
        rows.append(
            DepthRow(
                depth=float(d),
                mae=float(np.sum(np.abs(pp - yy))) / pp.size * UM_PER_MM,
                mape=100.0 * float(np.sum(np.abs(pp - yy) / np.abs(yy))) / pp.size,
                mean_pred=float(np.mean(pp)),
                count=int(pp.size),
            )
        )
    return EvalReport(metrics(p, y), rows)


# -- ablation ----------------------------------------------------------------

ARMS = (
    ("1", False, False),
    ("2", True, False),
    ("3", False, True),
    ("4", True, True),
)


@dataclass
class AblationGrid:
    rows: dict  # arm id -> {"enhance", "rrh", "report", "test_index"}

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["arm", "enhance", "rrh", "rmse", "mae_um", "mape_pct", "r2"])
        for arm, enhance, rrh in ARMS:
            o = self.rows[arm]["report"].overall
            w.writerow([arm, int(enhance), int(rrh), _fmt(o.rmse), _fmt(o.mae), _fmt(o.mape), _fmt(o.r2)])
        return buf.getvalue()

    def render_text(self):
        lines = [f"{'arm':>3} {'enh':>4} {'rrh':>4} {'RMSE(x1e-2)':>12} {'MAE(um)':>9} {'MAPE(%)':>8} {'R2':>8}"]
        for arm, enhance, rrh in ARMS:
            o = self.rows[arm]["report"].overall
            lines.append(
                f"{arm:>3} {'y' if enhance else 'n':>4} {'y' if rrh else 'n':>4} {o.rmse * 100:>12.3f} "
                f"{o.mae:>9.2f} {_txt(o.mape, '.3f'):>8} {_txt(o.r2, '.4f'):>8}"
            )
        return "\n".join(lines) + "\n"


def run_ablation(curves, labels_mm, train_cfg, pipeline_opts, model_cfg, depth_set=None, progress=None):
    """Train and evaluate the four enhancement x head arms.

    Every arm uses the same split (derived from ``train_cfg.seed``) and the
    same training seed; only the input pipeline and the head differ.
    """
    from dataclasses import replace

    from .model import DepthRegressor
    from .reconstruct import model_input
    from .training import split_dataset, train

    labels_mm = np.asarray(labels_mm, dtype=float)
    tr, va, te = split_dataset(labels_mm, train_cfg.split, train_cfg.seed)
    inputs = {}
    rows = {}
    for arm, enhance, rrh in ARMS:
        if enhance not in inputs:
            opts = replace(pipeline_opts, enhance=enhance)
            inputs[enhance] = np.array([model_input(c, opts) for c in curves])
        x = inputs[enhance]
        mcfg = replace(model_cfg, head="rrh" if rrh else "linear", input_size=pipeline_opts.input_size)
        result = train(train_cfg, x[tr], labels_mm[tr], x[va], labels_mm[va], mcfg)
        pred = DepthRegressor(mcfg).predict(result.params, x[te])
        report = per_depth_report(pred, labels_mm[te], depth_set)
        rows[arm] = {
            "enhance": enhance,
            "rrh": rrh,
            "report": report,
            "test_index": te,
            "history": result.history,
        }
        if progress:
            progress(arm, report)
    return AblationGrid(rows)
