"""Depth regressor written directly in numpy (float64, CPU).

Architecture::

    input (S x S) -> 3 x [conv3x3/2 -> relu]   (SE gate after stages 2 and 3)
                  -> global average pool (64)
                  -> head

The default head is the residual regression head (RRH)::

    r = p + dropout(relu(W1 p + b1))         # stage 1, residual skip
    h = dropout(relu(W2 r + b2))             # stage 2
    z = W3 h + b3                            # stage 3
    y = gamma * z + beta                     # learnable output affine

``LinearHead`` replaces it with a single ``FC(64 -> 1)`` for ablations.
Parameters live in a flat ``dict[str, ndarray]`` keyed ``"<block>.<name>"``.
Targets are depths in millimetres.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import EmptyBatch, NonFinite

FORMAT_VERSION = 1


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"non-finite activation in {where}", {"layer": where})


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# -- convolution -------------------------------------------------------------

def conv2d_forward(x, w, b, stride=2, pad=1):
    """``x``: (B, C, H, W); ``w``: (F, C, k, k).  Returns output and im2col cache."""
    bsz, c, hgt, wid = x.shape
    f, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * ho * wo, c * k * k)
    out = cols @ w.reshape(f, -1).T + b
    out = out.reshape(bsz, ho, wo, f).transpose(0, 3, 1, 2)
    return out, (cols, xp.shape, ho, wo)


def conv2d_backward(dout, w, cache, stride=2, pad=1, need_dx=True):
    cols, xp_shape, ho, wo = cache
    f, c, k, _ = w.shape
    bsz = dout.shape[0]
    dflat = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (dflat.T @ cols).reshape(w.shape)
    db = dflat.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (dflat @ w.reshape(f, -1)).reshape(bsz, ho, wo, c, k, k)
    dcols = np.ascontiguousarray(dcols.transpose(0, 3, 4, 5, 1, 2))
    dxp = np.zeros(xp_shape)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
    hgt, wid = xp_shape[2] - 2 * pad, xp_shape[3] - 2 * pad
    return dxp[:, :, pad:pad + hgt, pad:pad + wid], dw, db


# -- squeeze and excitation --------------------------------------------------

def se_forward(a, w1, w2):
    """Channel gate ``g = sigmoid(W2 relu(W1 avgpool(a)))``; returns ``g * a``."""
    if a.shape[1] != w1.shape[1] or w2.shape != (w1.shape[1], w1.shape[0]):
        raise ValueError(
            f"SE parameters {w1.shape}/{w2.shape} do not match {a.shape[1]} channels"
        )
    s = a.mean(axis=(2, 3))
    hz = s @ w1.T
    h = np.maximum(hz, 0.0)
    g = _sigmoid(h @ w2.T)
    return a * g[:, :, None, None], (a, s, hz, h, g)


def se_backward(dout, w1, w2, cache):
    a, s, hz, h, g = cache
    da = dout * g[:, :, None, None]
    dg = (dout * a).sum(axis=(2, 3))
    dgz = dg * g * (1.0 - g)
    dw2 = dgz.T @ h
    dhz = (dgz @ w2) * (hz > 0)
    dw1 = dhz.T @ s
    ds = dhz @ w1
    da += ds[:, :, None, None] / (a.shape[2] * a.shape[3])
    return da, dw1, dw2


def se_block(features, w1, w2):
    """SE gating for a single (C, H, W) map or a (B, C, H, W) batch."""
    f = np.asarray(features, dtype=float)
    single = f.ndim == 3
    out, _ = se_forward(f[None] if single else f, np.asarray(w1), np.asarray(w2))
    return out[0] if single else out


# -- encoder -----------------------------------------------------------------

@dataclass(frozen=True)
class EncoderConfig:
    channels: tuple = (16, 32, 64)
    se_stages: tuple = (2, 3)
    reduction: int = 4


class SEConvEncoder:
    """Three stride-2 conv stages with SE gates; the reference backbone.

    Any object with the same ``init``/``forward``/``backward``/``out_dim``
    surface can stand in for it.
    """

    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        self.cfg = cfg

    @property
    def out_dim(self):
        return self.cfg.channels[-1]

    def init(self, rng):
        p = {}
        c_in = 1
        for i, c in enumerate(self.cfg.channels, start=1):
            p[f"conv{i}.w"] = _he(rng, (c, c_in, 3, 3), c_in * 9)
            p[f"conv{i}.b"] = np.zeros(c)
            if i in self.cfg.se_stages:
                mid = max(1, c // self.cfg.reduction)
                p[f"se{i}.w1"] = _he(rng, (mid, c), c)
                p[f"se{i}.w2"] = _he(rng, (c, mid), mid)
            c_in = c
        return p

    def forward(self, p, x):
        a = x[:, None, :, :] if x.ndim == 3 else x
        caches = []
        for i in range(1, len(self.cfg.channels) + 1):
            z, cc = conv2d_forward(a, p[f"conv{i}.w"], p[f"conv{i}.b"])
            _check_finite(z, f"conv{i}")
            a = np.maximum(z, 0.0)
            sc = None
            if i in self.cfg.se_stages:
                a, sc = se_forward(a, p[f"se{i}.w1"], p[f"se{i}.w2"])
            caches.append((z, cc, sc))
        pooled = a.mean(axis=(2, 3))
        return pooled, (caches, a.shape)

    def backward(self, p, cache, dpooled):
        caches, shape = cache
        grads = {}
        da = np.broadcast_to(dpooled[:, :, None, None] / (shape[2] * shape[3]), shape).copy()
        for i in range(len(self.cfg.channels), 0, -1):
            z, cc, sc = caches[i - 1]
            if sc is not None:
                da, grads[f"se{i}.w1"], grads[f"se{i}.w2"] = se_backward(
                    da, p[f"se{i}.w1"], p[f"se{i}.w2"], sc
                )
            dz = da * (z > 0)
            da, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = conv2d_backward(
                dz, p[f"conv{i}.w"], cc, need_dx=i > 1
            )
        return grads


# -- heads -------------------------------------------------------------------

class ResidualRegressionHead:
    kind = "rrh"

    def __init__(self, in_dim=64, widths=(64, 32), dropout=0.2):
        if widths[0] != in_dim:
            raise ValueError("the residual stage must preserve the feature width")
        self.in_dim, self.widths, self.dropout = in_dim, tuple(widths), float(dropout)

    def init(self, rng, label_mean=0.0):
        w1, w2 = self.widths
        return {
            "head.fc1.w": _he(rng, (w1, self.in_dim), self.in_dim),
            "head.fc1.b": np.zeros(w1),
            "head.fc2.w": _he(rng, (w2, w1), w1),
            "head.fc2.b": np.zeros(w2),
            "head.fc3.w": _he(rng, (1, w2), w2),
            "head.fc3.b": np.zeros(1),
            "head.gamma": np.array(1.0),
            "head.beta": np.array(float(label_mean)),
        }

    def _mask(self, rng, shape, train, masks, key):
        if masks is not None and key in masks:
            return masks[key]
        if not train or self.dropout == 0:
            return None
        keep = 1.0 - self.dropout
        return (rng.random(shape) < keep) / keep

    def forward(self, p, feat, train=False, rng=None, masks=None):
        m1 = self._mask(rng, (feat.shape[0], self.widths[0]), train, masks, "head.drop1")
        u1 = feat @ p["head.fc1.w"].T + p["head.fc1.b"]
        h1 = np.maximum(u1, 0.0)
        d1 = h1 if m1 is None else h1 * m1
        r = feat + d1
        m2 = self._mask(rng, (feat.shape[0], self.widths[1]), train, masks, "head.drop2")
        u2 = r @ p["head.fc2.w"].T + p["head.fc2.b"]
        h2 = np.maximum(u2, 0.0)
        d2 = h2 if m2 is None else h2 * m2
        z = (d2 @ p["head.fc3.w"].T + p["head.fc3.b"])[:, 0]
        y = p["head.gamma"] * z + p["head.beta"]
        _check_finite(y, "head")
        used = {k: v for k, v in (("head.drop1", m1), ("head.drop2", m2)) if v is not None}
        return y, (feat, u1, m1, r, u2, m2, d2, z), used

    def backward(self, p, cache, dy):
        feat, u1, m1, r, u2, m2, d2, z = cache
        g = {
            "head.gamma": np.array(np.dot(dy, z)),
            "head.beta": np.array(dy.sum()),
        }
        dz = dy * p["head.gamma"]
        g["head.fc3.w"] = dz[None, :] @ d2
        g["head.fc3.b"] = np.array([dz.sum()])
        dd2 = dz[:, None] * p["head.fc3.w"]
        du2 = (dd2 if m2 is None else dd2 * m2) * (u2 > 0)
        g["head.fc2.w"] = du2.T @ r
        g["head.fc2.b"] = du2.sum(axis=0)
        dr = du2 @ p["head.fc2.w"]
        du1 = (dr if m1 is None else dr * m1) * (u1 > 0)
        g["head.fc1.w"] = du1.T @ feat
        g["head.fc1.b"] = du1.sum(axis=0)
        dfeat = dr + du1 @ p["head.fc1.w"]
        return g, dfeat


class LinearHead:
    """Single ``FC(in_dim -> 1)``; the bias starts at the label mean."""

    kind = "linear"

    def __init__(self, in_dim=64):
        self.in_dim = in_dim

    def init(self, rng, label_mean=0.0):
        return {
            "head.fc.w": _he(rng, (1, self.in_dim), self.in_dim),
            "head.fc.b": np.array([float(label_mean)]),
        }

    def forward(self, p, feat, train=False, rng=None, masks=None):
        y = (feat @ p["head.fc.w"].T + p["head.fc.b"])[:, 0]
        _check_finite(y, "head")
        return y, feat, {}

    def backward(self, p, feat, dy):
        g = {"head.fc.w": dy[None, :] @ feat, "head.fc.b": np.array([dy.sum()])}
        return g, dy[:, None] * p["head.fc.w"]


# -- full model --------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    channels: tuple = (16, 32, 64)
    reduction: int = 4
    se_stages: tuple = (2, 3)
    head: str = "rrh"  # "rrh" | "linear"
    head_widths: tuple = (64, 32)
    dropout: float = 0.2

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("channels", "se_stages", "head_widths"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class ForwardTrace:
    """Everything the backward pass needs, plus the dropout masks used."""

    enc_cache: tuple
    head_cache: tuple
    masks: dict = field(default_factory=dict)


def hybrid_loss_and_grad(pred, target, lam):
    """Weighted MSE + MAE and its derivative w.r.t. ``pred`` (sign(0) = 0)."""
    r = np.asarray(pred, dtype=float) - np.asarray(target, dtype=float)
    n = r.size
    loss = lam * np.mean(r * r) + (1.0 - lam) * np.mean(np.abs(r))
    return float(loss), (2.0 * lam * r + (1.0 - lam) * np.sign(r)) / n


class DepthRegressor:
    def __init__(self, cfg: ModelConfig = ModelConfig(), encoder=None):
        self.cfg = cfg
        self.encoder = encoder or SEConvEncoder(
            EncoderConfig(tuple(cfg.channels), tuple(cfg.se_stages), cfg.reduction)
        )
        if cfg.head == "rrh":
            self.head = ResidualRegressionHead(self.encoder.out_dim, cfg.head_widths, cfg.dropout)
        elif cfg.head == "linear":
            self.head = LinearHead(self.encoder.out_dim)
        else:
            raise ValueError(f"unknown head {cfg.head!r}")

    def init_params(self, seed=0, labels=None):
        """He-normal weights, zero biases, ``gamma = 1``; ``beta`` (or the
        linear head's bias) is the mean of ``labels`` when given, else 0."""
        rng = np.random.default_rng(seed)
        p = self.encoder.init(rng)
        label_mean = float(np.mean(labels)) if labels is not None and len(labels) else 0.0
        p.update(self.head.init(rng, label_mean))
        return p

    def _check_input(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 2:
            x = x[None]
        s = self.cfg.input_size
        if x.shape[-2:] != (s, s):
            raise ValueError(f"expected {s}x{s} inputs, got {x.shape[-2:]}")
        return x

    def forward(self, params, x, mode="eval", rng=None, masks=None):
        """Predicted depths for a batch (or a single image).

        ``mode="train"`` samples dropout masks from ``rng`` unless ``masks``
        supplies them; the masks actually used come back in the trace.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = self._check_input(x)
        train = mode == "train"
        if train and rng is None and masks is None and getattr(self.head, "dropout", 0):
            rng = np.random.default_rng()
        feat, enc_cache = self.encoder.forward(params, x)
        y, head_cache, used = self.head.forward(params, feat, train, rng, masks)
        return y, ForwardTrace(enc_cache, head_cache, used)

    def predict(self, params, x, batch_size=64):
        x = self._check_input(x)
        out = [self.forward(params, x[i:i + batch_size])[0] for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0)

    def backward(self, params, trace, dy):
        grads, dfeat = self.head.backward(params, trace.head_cache, dy)
        grads.update(self.encoder.backward(params, trace.enc_cache, dfeat))
        return {k: grads[k] for k in params}

    def gradients(self, params, x, y, lam=0.5, rng=None, masks=None, mode="train"):
        """Hybrid loss on a batch and its exact gradient for every parameter.

        Returns ``(loss, grads, masks)``; pass ``masks`` back in to replay the
        same dropout pattern.
        """
        y = np.asarray(y, dtype=float)
        if y.size == 0:
            raise EmptyBatch("gradients() needs at least one sample")
        pred, trace = self.forward(params, x, mode, rng, masks)
        loss, dy = hybrid_loss_and_grad(pred, y, lam)
        grads = self.backward(params, trace, dy)
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFinite(f"non-finite gradient for {k}", {"parameter": k})
        return loss, grads, trace.masks


def save_checkpoint(path, params, cfg: ModelConfig, seed=None, extra=None):
    doc = {
        "format_version": FORMAT_VERSION,
        "config": asdict(cfg),
        "seed": seed,
        "params": {
            k: {"shape": list(np.shape(v)), "data": np.asarray(v, dtype=float).ravel().tolist()}
            for k, v in params.items()
        },
    }
    if extra:
        doc["extra"] = extra
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def load_checkpoint(path):
    """Returns ``(params, ModelConfig, doc)``."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {doc.get('format_version')!r}")
    params = {
        k: np.array(v["data"], dtype=float).reshape(v["shape"]) for k, v in doc["params"].items()
    }
    return params, ModelConfig.from_dict(doc["config"]), doc
