"""Reference computations the tests check the package against.

Nothing here imports the code paths under test except to call the function
being checked; each oracle is written out longhand.
"""
from __future__ import annotations

import math

import numpy as np

REL_FLOOR = 1e-6


def rel_error(analytic: float, numeric: float, floor: float = REL_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_difference_check(loss_fn, arrays, grads, n_coords, rng, h=1e-5):
    """Max relative error between ``grads`` and central differences of ``loss_fn``.

    ``arrays`` are the raw data buffers that ``loss_fn`` reads (perturbed in
    place); ``grads`` the analytic gradients aligned with them. ``n_coords``
    coordinates are drawn uniformly over all arrays, weighted by size.
    """
    sizes = np.array([a.size for a in arrays])
    picks = rng.choice(sizes.sum(), size=min(n_coords, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = np.unravel_index(int(flat - offsets[k]), arrays[k].shape)
        arr = arrays[k]
        orig = arr[idx]
        arr[idx] = orig + h
        up = loss_fn()
        arr[idx] = orig - h
        down = loss_fn()
        arr[idx] = orig
        numeric = (up - down) / (2 * h)
        worst = max(worst, rel_error(float(grads[k][idx]), numeric))
    return worst


def conv1d_loops(x, w, b=None, padding=0, stride=1):
    """Triple-loop zero-padded cross-correlation."""
    bsz, cin, length = x.shape
    cout, _, k = w.shape
    xp = np.zeros((bsz, cin, length + 2 * padding))
    xp[:, :, padding:padding + length] = x
    lout = (length + 2 * padding - k) // stride + 1
    out = np.zeros((bsz, cout, lout))
    for n in range(bsz):
        for o in range(cout):
            for l in range(lout):
                acc = 0.0
                for c in range(cin):
                    for j in range(k):
                        acc += w[o, c, j] * xp[n, c, l * stride + j]
                out[n, o, l] = acc + (b[o] if b is not None else 0.0)
    return out


def group_norm_loops(x, groups, eps):
    out = np.empty_like(x)
    bsz, ch, _ = x.shape
    per = ch // groups
    for n in range(bsz):
        for g in range(groups):
            block = x[n, g * per:(g + 1) * per, :]
            vals = block.reshape(-1).tolist()
            mean = math.fsum(vals) / len(vals)
            var = math.fsum((v - mean) ** 2 for v in vals) / len(vals)
            out[n, g * per:(g + 1) * per, :] = (block - mean) / math.sqrt(var + eps)
    return out


def cosine_alpha_bar(i: int, n: int, s: float = 0.008) -> float:
    f = lambda t: math.cos(((t / n + s) / (1 + s)) * math.pi / 2) ** 2
    return f(i) / f(0)


def posterior_variance(alpha_bar_prev: float, alpha_bar: float, beta: float) -> float:
    return (1 - alpha_bar_prev) / (1 - alpha_bar) * beta


def reverse_mean_formula(tau, eps, alpha, alpha_bar, beta):
    return (tau - beta / math.sqrt(1 - alpha_bar) * eps) / math.sqrt(alpha)


def one_sided_z_pvalue(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2))
