"""Central finite differences of the hybrid loss, independent of backprop."""

import numpy as np


def _pattern(trace, residual):
    """Which side of every kink (ReLU, |.|) the evaluation sits on."""
    bits = []
    caches, _ = trace.enc_cache
    for z, _, se in caches:
        bits.append(z.ravel() > 0)
        if se is not None:
            bits.append(se[2].ravel() > 0)
    hc = trace.head_cache
    if isinstance(hc, tuple):
        bits.extend([hc[1].ravel() > 0, hc[4].ravel() > 0])
    bits.append(residual > 0)
    return np.concatenate(bits)


def loss_at(model, params, x, y, lam, masks):
    pred, trace = model.forward(params, x, "train", masks=masks)
    r = pred - y
    return lam * np.mean(r * r) + (1.0 - lam) * np.mean(np.abs(r)), _pattern(trace, r)


def _central(model, params, x, y, lam, masks, key, idx, step):
    p = params[key]
    old = p[idx]
    p[idx] = old + step
    up, pat_up = loss_at(model, params, x, y, lam, masks)
    p[idx] = old - step
    down, pat_down = loss_at(model, params, x, y, lam, masks)
    p[idx] = old
    return (up - down) / (2 * step), pat_up, pat_down


def fd_gradient(model, params, x, y, lam, masks, key, indices, step=1e-4, shrink=100.0, retries=2):
    """Central differences with step ``step``.

    A stencil that straddles a kink is not a valid oracle for the derivative
    at the centre; such components are recomputed with the step divided by
    ``shrink`` (at most ``retries`` times).
    """
    _, centre = loss_at(model, params, x, y, lam, masks)
    out = []
    for idx in indices:
        h = step
        for _ in range(retries + 1):
            d, up, down = _central(model, params, x, y, lam, masks, key, idx, h)
            if np.array_equal(up, centre) and np.array_equal(down, centre):
                break
            h /= shrink
        out.append(d)
    return np.array(out)


def rel_error(analytic, numeric, floor=1e-8):
    """``|a - n| / max(|a|, |n|, floor)`` per component.

    The floor keeps components that are zero to rounding (dead ReLU units)
    from dividing by noise.
    """
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_groups(model, params, x, y, lam, masks, grads, per_group=None, rng=None):
    """Worst relative error per parameter group.

    ``per_group=None`` checks every component; otherwise that many random
    components per group (all of them for small groups).
    """
    rng = rng or np.random.default_rng(0)
    worst = {}
    for key, g in grads.items():
        all_idx = list(np.ndindex(g.shape)) if g.shape else [()]
        if per_group is not None and len(all_idx) > per_group:
            pick = rng.choice(len(all_idx), size=per_group, replace=False)
            all_idx = [all_idx[i] for i in pick]
        num = fd_gradient(model, params, x, y, lam, masks, key, all_idx)
        ana = np.array([g[i] for i in all_idx])
        worst[key] = float(np.max(rel_error(ana, num)))
    return worst
