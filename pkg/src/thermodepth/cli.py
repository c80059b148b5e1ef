"""Command-line entry point: ``thermodepth <command> ...``.

Exit codes::

    0  success
    2  configuration error (bad flag, bad config field)
    3  I/O error (unreadable input, unwritable output)
    4  simulation error
    5  non-finite values during training

Diagnostics go to stderr; stdout carries one JSON summary per command.
Set ``THERMODEPTH_LOG_LEVEL`` (e.g. ``INFO``) for progress logging.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from . import __version__
from .datasets import (
    load_curves,
    load_images,
    read_json,
    sample_stem,
    save_curve_dataset,
    save_image,
    sha256_file,
    write_json,
)
from .errors import ConfigError, NonFinite, ThermoDepthError
from .evaluation import per_depth_report, run_ablation
from .heatsim import GridParams, config_from_dict, generate_dataset
from .model import DepthRegressor, ModelConfig, load_checkpoint, save_checkpoint
from .reconstruct import PipelineOptions, normalize, prepare_image
from .training import LossHistory, SchedulerConfig, TrainConfig, split_dataset, train

log = logging.getLogger("thermodepth")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_SIM, EXIT_NONFINITE = 0, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


# -- helpers -----------------------------------------------------------------

def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as err:
        raise CliError(EXIT_IO, f"cannot read config {path}: {err.strerror}") from err
    except json.JSONDecodeError as err:
        raise CliError(EXIT_CONFIG, f"config {path} is not valid JSON: {err}") from err
    if not isinstance(doc, dict):
        raise CliError(EXIT_CONFIG, f"config {path} must be a JSON object")
    return doc


def _prepare_out(out):
    if out is None:
        raise CliError(EXIT_CONFIG, "--out is required")
    parent = os.path.dirname(os.path.abspath(out))
    if not os.path.isdir(parent):
        raise CliError(EXIT_IO, f"parent directory of --out does not exist: {parent}")
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as err:
        raise CliError(EXIT_IO, f"cannot create output directory {out}: {err.strerror}") from err
    return out


def _require_dir(path, what):
    if path is None:
        raise CliError(EXIT_CONFIG, f"--{what} is required")
    if not os.path.isfile(os.path.join(path, "manifest.json")):
        raise CliError(EXIT_IO, f"no manifest.json found in {what} directory {path}")
    return path


def _pipeline_options(args, section):
    base = dict(section or {})
    flags = {
        "stride": args.stride,
        "target_len": args.target_len,
        "smooth_window": args.smooth_window,
        "poly_degree": args.poly_degree,
        "input_size": args.input_size,
    }
    base.update({k: v for k, v in flags.items() if v is not None})
    if args.no_enhance:
        base["enhance"] = False
    try:
        return PipelineOptions(**base)
    except TypeError as err:
        raise CliError(EXIT_CONFIG, f"pipeline: {err}") from err


def _train_config(args, section):
    body = dict(section or {})
    sched = dict(body.pop("scheduler", {}) or {})
    flags = {
        "lam": args.lam,
        "lr": args.lr,
        "weight_decay": args.weight_decay,
        "batch_size": args.batch_size,
        "epochs": args.epochs,
        "clip_max_norm": args.clip_max_norm,
        "seed": args.seed,
    }
    body.update({k: v for k, v in flags.items() if v is not None})
    for k, v in (("factor", args.factor), ("patience", args.patience), ("min_improve", args.min_improve)):
        if v is not None:
            sched[k] = v
    try:
        return TrainConfig.from_dict({**body, "scheduler": SchedulerConfig(**sched)})
    except (TypeError, ValueError) as err:
        raise CliError(EXIT_CONFIG, f"training: {err}") from err


def _model_config(args, section, input_size):
    body = dict(section or {})
    if args.head is not None:
        body["head"] = args.head
    if args.dropout is not None:
        body["dropout"] = args.dropout
    body["input_size"] = input_size
    try:
        return ModelConfig.from_dict(body)
    except (TypeError, ValueError) as err:
        raise CliError(EXIT_CONFIG, f"model: {err}") from err


def _run_manifest(out, command, config, seeds, inputs, outputs):
    files = {os.path.relpath(p, out): sha256_file(p) for p in sorted(outputs)}
    doc = {
        "tool": "thermodepth",
        "version": __version__,
        "command": command,
        "config": config,
        "seeds": seeds,
        "inputs": inputs,
        "outputs": files,
        "created_at": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    write_json(os.path.join(out, "run_manifest.json"), doc)
    return doc


def _emit(summary):
    sys.stdout.write(json.dumps(summary, sort_keys=True) + "\n")


# -- commands ----------------------------------------------------------------

def cmd_simulate(args):
    doc = _load_config(args.config)
    try:
        spec, exc, cam = config_from_dict(doc)
    except ConfigError as err:
        raise CliError(EXIT_CONFIG, str(err)) from err
    gen = dict(doc.get("generation") or {})
    ppd = args.pixels_per_depth if args.pixels_per_depth is not None else gen.get("pixels_per_depth", 197)
    seed = args.seed if args.seed is not None else gen.get("master_seed", 0)
    jitter = args.flux_jitter if args.flux_jitter is not None else gen.get("flux_jitter", 0.02)
    out = _prepare_out(args.out)
    try:
        ds = generate_dataset(spec, exc, cam, int(ppd), int(seed), float(jitter), GridParams())
    except ConfigError as err:
        raise CliError(EXIT_CONFIG, str(err)) from err
    except ThermoDepthError as err:
        raise CliError(EXIT_SIM, f"simulation failed: {err}") from err
    try:
        manifest = save_curve_dataset(ds, out, exc.frame_rate)
    except OSError as err:
        raise CliError(EXIT_IO, f"cannot write dataset to {out}: {err}") from err
    outputs = [os.path.join(out, s["file"]) for s in manifest["samples"]]
    outputs.append(os.path.join(out, "manifest.json"))
    _run_manifest(out, "simulate", ds.config, {"master_seed": int(seed)}, {}, outputs)
    _emit({"command": "simulate", "out": out, "curves": len(ds), "calibration": list(ds.calibration)})


def cmd_prepare(args):
    data = _require_dir(args.data, "data")
    doc = _load_config(args.config)
    opts = _pipeline_options(args, doc.get("pipeline"))
    out = _prepare_out(args.out)
    try:
        curves, src = load_curves(data)
    except (OSError, ValueError, KeyError) as err:
        raise CliError(EXIT_IO, f"cannot load curves from {data}: {err}") from err
    os.makedirs(os.path.join(out, "images"), exist_ok=True)
    samples = []
    for curve, s in zip(curves, src["samples"]):
        rel = os.path.join("images", sample_stem(s["label_m"], s["pixel_index"]) + ".pgm")
        try:
            img = prepare_image(curve, opts)
        except ThermoDepthError as err:
            raise CliError(EXIT_CONFIG, f"{s['file']}: {err}") from err
        try:
            digest = save_image(os.path.join(out, rel), img)
        except OSError as err:
            raise CliError(EXIT_IO, f"cannot write {rel}: {err}") from err
        samples.append({**{k: s[k] for k in ("label_m", "depth_index", "pixel_index", "seed")},
                        "file": rel, "source": s["file"], "sha256": digest})
    manifest = {
        "format_version": 1,
        "kind": "images",
        "pipeline": asdict(opts),
        "source_config": src["config"],
        "samples": samples,
    }
    write_json(os.path.join(out, "manifest.json"), manifest)
    outputs = [os.path.join(out, s["file"]) for s in samples] + [os.path.join(out, "manifest.json")]
    _run_manifest(out, "prepare", {"pipeline": asdict(opts)}, {}, {"data": os.path.abspath(data)}, outputs)
    _emit({"command": "prepare", "out": out, "images": len(samples), "input_size": opts.input_size})


def _load_prepared(data):
    try:
        imgs, labels_m, doc = load_images(data)
    except (OSError, ValueError, KeyError) as err:
        raise CliError(EXIT_IO, f"cannot load images from {data}: {err}") from err
    return normalize(imgs), labels_m * 1e3, doc


def cmd_train(args):
    data = _require_dir(args.data, "data")
    doc = _load_config(args.config)
    x, y_mm, manifest = _load_prepared(data)
    tcfg = _train_config(args, doc.get("training"))
    mcfg = _model_config(args, doc.get("model"), x.shape[-1])
    out = _prepare_out(args.out)
    tr, va, te = split_dataset(y_mm, tcfg.split, tcfg.seed)
    try:
        result = train(tcfg, x[tr], y_mm[tr], x[va], y_mm[va], mcfg)
    except NonFinite as err:
        raise CliError(EXIT_NONFINITE, f"training aborted: {err} context={err.context}") from err
    files = [s["file"] for s in manifest["samples"]]
    split = {"train": [files[i] for i in tr], "val": [files[i] for i in va], "test": [files[i] for i in te]}
    extra = {"training": tcfg.to_dict(), "best_epoch": result.best_epoch, "split": split}
    ckpt = os.path.join(out, "checkpoint.json")
    final = os.path.join(out, "checkpoint_final.json")
    hist = os.path.join(out, "loss_history.csv")
    save_checkpoint(ckpt, result.params, mcfg, tcfg.seed, extra)
    save_checkpoint(final, result.final_params, mcfg, tcfg.seed, extra)
    result.history.to_csv(hist)
    _run_manifest(out, "train", {"training": tcfg.to_dict(), "model": asdict(mcfg)}, {"seed": tcfg.seed},
                  {"data": os.path.abspath(data)}, [ckpt, final, hist])
    _emit({"command": "train", "out": out, "epochs": len(result.history), "best_epoch": result.best_epoch,
           "best_val_loss": min(result.history.val_loss) if len(result.history) else None})


def cmd_eval(args):
    data = _require_dir(args.data, "data")
    if args.checkpoint is None:
        raise CliError(EXIT_CONFIG, "--checkpoint is required")
    try:
        params, mcfg, ck = load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError) as err:
        raise CliError(EXIT_IO, f"cannot load checkpoint {args.checkpoint}: {err}") from err
    x, y_mm, manifest = _load_prepared(data)
    files = [s["file"] for s in manifest["samples"]]
    split = (ck.get("extra") or {}).get("split")
    if args.split == "all":
        idx = np.arange(len(files))
    elif split is not None:
        pos = {f: i for i, f in enumerate(files)}
        try:
            idx = np.array([pos[f] for f in split[args.split]], dtype=int)
        except KeyError as err:
            raise CliError(EXIT_CONFIG, f"checkpoint split refers to unknown file {err}") from err
    else:
        tcfg = TrainConfig(seed=ck.get("seed") or 0)
        idx = dict(zip(("train", "val", "test"), split_dataset(y_mm, tcfg.split, tcfg.seed)))[args.split]
    out = _prepare_out(args.out)
    model = DepthRegressor(mcfg)
    pred = model.predict(params, x[idx])
    depth_set = [d * 1e3 for d in manifest["source_config"]["specimen"]["defect_depths"]]
    report = per_depth_report(pred, y_mm[idx], depth_set)
    paths = [os.path.join(out, n) for n in ("report_overall.csv", "report_per_depth.csv", "report.json")]
    with open(paths[0], "w") as fh:
        fh.write(report.overall_csv())
    with open(paths[1], "w") as fh:
        fh.write(report.per_depth_csv())
    with open(paths[2], "w") as fh:
        fh.write(report.to_json() + "\n")
    _run_manifest(out, "eval", {"split": args.split}, {}, {"data": os.path.abspath(data),
                  "checkpoint": os.path.abspath(args.checkpoint)}, paths)
    sys.stderr.write(report.render_text())
    _emit({"command": "eval", "out": out, **asdict(report.overall), "depths": len(report.per_depth)})


def cmd_ablate(args):
    data = _require_dir(args.data, "data")
    doc = _load_config(args.config)
    opts = _pipeline_options(args, doc.get("pipeline"))
    tcfg = _train_config(args, doc.get("training"))
    mcfg = _model_config(args, doc.get("model"), opts.input_size)
    try:
        curves, src = load_curves(data)
    except (OSError, ValueError, KeyError) as err:
        raise CliError(EXIT_IO, f"cannot load curves from {data}: {err}") from err
    out = _prepare_out(args.out)
    labels_mm = np.array([c.label_depth for c in curves]) * 1e3
    depth_set = [d * 1e3 for d in src["config"]["specimen"]["defect_depths"]]
    try:
        grid = run_ablation(curves, labels_mm, tcfg, opts, mcfg, depth_set,
                            progress=lambda arm, r: log.info("arm %s MAE %.2f um", arm, r.overall.mae))
    except NonFinite as err:
        raise CliError(EXIT_NONFINITE, f"training aborted: {err} context={err.context}") from err
    paths = [os.path.join(out, "ablation.csv")]
    with open(paths[0], "w") as fh:
        fh.write(grid.to_csv())
    for arm in grid.rows:
        p = os.path.join(out, f"loss_history_arm{arm}.csv")
        grid.rows[arm]["history"].to_csv(p)
        paths.append(p)
    _run_manifest(out, "ablate", {"training": tcfg.to_dict(), "pipeline": asdict(opts), "model": asdict(mcfg)},
                  {"seed": tcfg.seed}, {"data": os.path.abspath(data)}, paths)
    sys.stderr.write(grid.render_text())
    _emit({"command": "ablate", "out": out,
           "mae_um": {a: grid.rows[a]["report"].overall.mae for a in grid.rows}})


def cmd_report(args):
    """Print aligned text for whatever reports exist under ``--out``."""
    src = args.out or args.data
    if src is None or not os.path.isdir(src):
        raise CliError(EXIT_IO, f"report directory not found: {src}")
    shown = 0
    rj = os.path.join(src, "report.json")
    if os.path.isfile(rj):
        from .evaluation import DepthRow, EvalReport, OverallMetrics

        d = read_json(rj)
        rep = EvalReport(OverallMetrics(**d["overall"]), [DepthRow(**r) for r in d["per_depth"]])
        sys.stdout.write(rep.render_text())
        shown += 1
    ab = os.path.join(src, "ablation.csv")
    if os.path.isfile(ab):
        with open(ab) as fh:
            sys.stdout.write(fh.read())
        shown += 1
    hist = os.path.join(src, "loss_history.csv")
    if os.path.isfile(hist):
        h = LossHistory.from_csv(hist)
        if len(h):
            best = int(np.argmin(h.val_loss))
            sys.stdout.write(
                f"epochs {len(h)}  best epoch {h.epoch[best]}  best val {h.val_loss[best]:.6g}  "
                f"final lr {h.lr[-1]:.3g}\n"
            )
        shown += 1
    if not shown:
        raise CliError(EXIT_IO, f"no report.json, ablation.csv or loss_history.csv in {src}")


# -- parser ------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="master / training seed")
    common.add_argument("--config", help="JSON config document")
    common.add_argument("--out", help="output directory")

    pipe = argparse.ArgumentParser(add_help=False)
    pipe.add_argument("--stride", type=int)
    pipe.add_argument("--target-len", type=int)
    pipe.add_argument("--no-enhance", action="store_true", help="skip the log enhancement")
    pipe.add_argument("--input-size", type=int)
    pipe.add_argument("--smooth-window", type=int)
    pipe.add_argument("--poly-degree", type=int)

    trn = argparse.ArgumentParser(add_help=False)
    trn.add_argument("--lam", type=float, help="MSE weight in the hybrid loss")
    trn.add_argument("--lr", type=float)
    trn.add_argument("--weight-decay", type=float)
    trn.add_argument("--batch-size", type=int)
    trn.add_argument("--epochs", type=int)
    trn.add_argument("--clip-max-norm", type=float)
    trn.add_argument("--factor", type=float, help="plateau LR factor")
    trn.add_argument("--patience", type=int)
    trn.add_argument("--min-improve", type=float)
    trn.add_argument("--head", choices=("rrh", "linear"))
    trn.add_argument("--dropout", type=float)

    p = argparse.ArgumentParser(prog="thermodepth", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic curve dataset")
    s.add_argument("--pixels-per-depth", type=int)
    s.add_argument("--flux-jitter", type=float)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("prepare", parents=[common, pipe], help="curves -> stripe-image PGMs")
    s.add_argument("--data", help="curve dataset directory")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", parents=[common, trn], help="train on a prepared dataset")
    s.add_argument("--data", help="prepared dataset directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="per-depth report for a checkpoint")
    s.add_argument("--data", help="prepared dataset directory")
    s.add_argument("--checkpoint")
    s.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", parents=[common, pipe, trn], help="enhancement x head ablation")
    s.add_argument("--data", help="curve dataset directory")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("report", parents=[common], help="print reports found in --out")
    s.add_argument("--data", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    level = os.environ.get("THERMODEPTH_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except CliError as err:
        sys.stderr.write(f"thermodepth {args.command}: {err}\n")
        return err.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
