"""On-disk layout of curve datasets and prepared stripe-image datasets.

Curve dataset (``simulate``)::

    manifest.json
    curves/<depth_um>_<pixel_idx>.csv      frame_index,value

Prepared dataset (``prepare``)::

    manifest.json
    images/<depth_um>_<pixel_idx>.pgm      8-bit P5, S x S

Manifests are deterministic (sorted keys, no timestamps) and carry a
SHA-256 digest of every file they list.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os

import numpy as np

from .heatsim import PixelCurve
from .pgm import read_pgm, write_pgm

FORMAT_VERSION = 1


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def sample_stem(label_m, pixel_idx):
    return f"{int(round(label_m * 1e6))}_{int(pixel_idx)}"


def write_curve_csv(path, curve: PixelCurve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_index", "value"])
        for i, v in enumerate(curve.values):
            w.writerow([i, int(v) if float(v).is_integer() else repr(float(v))])


def read_curve_csv(path, frame_rate, label_depth=None) -> PixelCurve:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["frame_index", "value"]:
            raise ValueError(f"{path}: expected header frame_index,value, got {header}")
        values = []
        for n, row in enumerate(reader):
            if int(row[0]) != n:
                raise ValueError(f"{path}: frame index {row[0]} out of sequence at row {n}")
            values.append(float(row[1]))
    return PixelCurve(np.array(values), frame_rate, label_depth)


def write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def save_curve_dataset(ds, out_dir, frame_rate):
    """Write every curve as CSV plus ``manifest.json``; returns the manifest."""
    os.makedirs(os.path.join(out_dir, "curves"), exist_ok=True)
    samples = []
    for curve, di, pi, seed in zip(ds.curves, ds.depth_index, ds.pixel_index, ds.seeds):
        rel = os.path.join("curves", sample_stem(curve.label_depth, pi) + ".csv")
        path = os.path.join(out_dir, rel)
        write_curve_csv(path, curve)
        samples.append({
            "file": rel,
            "label_m": curve.label_depth,
            "depth_index": di,
            "pixel_index": pi,
            "seed": seed,
            "sha256": sha256_file(path),
        })
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "curves",
        "frame_rate": frame_rate,
        "calibration": {"calib_min": ds.calibration[0], "calib_max": ds.calibration[1]},
        "config": ds.config,
        "samples": samples,
    }
    write_json(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest


def load_manifest(data_dir, kind):
    path = os.path.join(data_dir, "manifest.json")
    doc = read_json(path)
    if doc.get("kind") != kind:
        raise ValueError(f"{path}: expected a {kind!r} manifest, found {doc.get('kind')!r}")
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format_version {doc.get('format_version')!r}")
    return doc


def load_curves(data_dir):
    """Returns ``(curves, manifest)``."""
    doc = load_manifest(data_dir, "curves")
    curves = [
        read_curve_csv(os.path.join(data_dir, s["file"]), doc["frame_rate"], s["label_m"])
        for s in doc["samples"]
    ]
    return curves, doc


def load_images(data_dir):
    """Returns ``(images uint8 [n, S, S], labels_m, manifest)``."""
    doc = load_manifest(data_dir, "images")
    imgs = np.array([read_pgm(os.path.join(data_dir, s["file"])) for s in doc["samples"]])
    labels = np.array([s["label_m"] for s in doc["samples"]], dtype=float)
    return imgs, labels, doc


def save_image(path, img):
    write_pgm(path, img)
    return sha256_file(path)
