"""Numba kernels for tile binning and front-to-back compositing.

Per-Gaussian gradient columns in the backward pass:
0-1 mean2d, 2-4 conic (a, b, c), 5 opacity, 6-8 color, 9 depth.
"""
import os

import numba as nb
import numpy as np

if "NUMBA_THREADING_LAYER" not in os.environ:
    # the system TBB is too old for numba; avoid the warning and fall back
    nb.config.THREADING_LAYER = "workqueue"

N_GRAD = 10


@nb.njit(cache=True)
def bin_tiles(order, rects, tile, tiles_x, tiles_y):
    """Per-tile Gaussian lists, each in the global depth order given by ``order``."""
    n_tiles = tiles_x * tiles_y
    counts = np.zeros(n_tiles + 1, np.int64)
    for g in order:
        x0, y0, x1, y1 = rects[g, 0], rects[g, 1], rects[g, 2], rects[g, 3]
        for ty in range(y0 // tile, y1 // tile + 1):
            for tx in range(x0 // tile, x1 // tile + 1):
                counts[ty * tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    ids = np.empty(offsets[-1], np.int32)
    fill = offsets[:-1].copy()
    for g in order:
        x0, y0, x1, y1 = rects[g, 0], rects[g, 1], rects[g, 2], rects[g, 3]
        for ty in range(y0 // tile, y1 // tile + 1):
            for tx in range(x0 // tile, x1 // tile + 1):
                t = ty * tiles_x + tx
                ids[fill[t]] = g
                fill[t] += 1
    return offsets, ids


@nb.njit(parallel=True, cache=True)
def forward(means, conics, opac, colors, depths, rects, offsets, ids, tile, tiles_x, width, height,
            alpha_max, min_t):
    dt = means.dtype
    out_c = np.zeros((height, width, 3), dt)
    out_d = np.zeros((height, width), dt)
    out_a = np.zeros((height, width), dt)
    t_final = np.ones((height, width), dt)
    n_last = np.zeros((height, width), np.int64)
    n_tiles = offsets.shape[0] - 1
    for t in nb.prange(n_tiles):
        ty, tx = t // tiles_x, t % tiles_x
        start, end = offsets[t], offsets[t + 1]
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                trans = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                dep = 0.0
                acc = 0.0
                last = start
                for k in range(start, end):
                    g = ids[k]
                    if px < rects[g, 0] or px > rects[g, 2] or py < rects[g, 1] or py > rects[g, 3]:
                        continue
                    dx = px - means[g, 0]
                    dy = py - means[g, 1]
                    power = -0.5 * (conics[g, 0] * dx * dx + 2.0 * conics[g, 1] * dx * dy + conics[g, 2] * dy * dy)
                    al = opac[g] * np.exp(power)
                    if al > alpha_max:
                        al = alpha_max
                    t_next = trans * (1.0 - al)
                    if t_next < min_t:
                        break
                    wt = al * trans
                    c0 += colors[g, 0] * wt
                    c1 += colors[g, 1] * wt
                    c2 += colors[g, 2] * wt
                    dep += depths[g] * wt
                    acc += wt
                    trans = t_next
                    last = k + 1
                out_c[py, px, 0] = c0
                out_c[py, px, 1] = c1
                out_c[py, px, 2] = c2
                out_d[py, px] = dep
                out_a[py, px] = acc
                t_final[py, px] = trans
                n_last[py, px] = last
    return out_c, out_d, out_a, t_final, n_last


@nb.njit(parallel=True, cache=True)
def backward(means, conics, opac, colors, depths, rects, offsets, ids, tile, tiles_x, width, height,
             alpha_max, t_final, n_last, g_c, g_d, g_a):
    """Gradients per (tile, list entry); each tile owns its slice, so no races."""
    grads = np.zeros((ids.shape[0], N_GRAD), means.dtype)
    n_tiles = offsets.shape[0] - 1
    for t in nb.prange(n_tiles):
        ty, tx = t // tiles_x, t % tiles_x
        start = offsets[t]
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                trans = t_final[py, px]
                gc0, gc1, gc2 = g_c[py, px, 0], g_c[py, px, 1], g_c[py, px, 2]
                gd = g_d[py, px]
                ga = g_a[py, px]
                acc_c0 = 0.0
                acc_c1 = 0.0
                acc_c2 = 0.0
                acc_d = 0.0
                acc_a = 0.0
                for k in range(n_last[py, px] - 1, start - 1, -1):
                    g = ids[k]
                    if px < rects[g, 0] or px > rects[g, 2] or py < rects[g, 1] or py > rects[g, 3]:
                        continue
                    dx = px - means[g, 0]
                    dy = py - means[g, 1]
                    ca, cb, cc = conics[g, 0], conics[g, 1], conics[g, 2]
                    power = -0.5 * (ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy)
                    w = np.exp(power)
                    al = opac[g] * w
                    clamped = al > alpha_max
                    if clamped:
                        al = alpha_max
                    one_m = 1.0 - al
                    trans = trans / one_m
                    wt = al * trans
                    grads[k, 6] += gc0 * wt
                    grads[k, 7] += gc1 * wt
                    grads[k, 8] += gc2 * wt
                    grads[k, 9] += gd * wt
                    d_al = (
                        gc0 * (colors[g, 0] * trans - acc_c0 / one_m)
                        + gc1 * (colors[g, 1] * trans - acc_c1 / one_m)
                        + gc2 * (colors[g, 2] * trans - acc_c2 / one_m)
                        + gd * (depths[g] * trans - acc_d / one_m)
                        + ga * (trans - acc_a / one_m)
                    )
                    acc_c0 += colors[g, 0] * wt
                    acc_c1 += colors[g, 1] * wt
                    acc_c2 += colors[g, 2] * wt
                    acc_d += depths[g] * wt
                    acc_a += wt
                    if clamped:
                        continue
                    grads[k, 5] += d_al * w
                    d_pow = d_al * opac[g] * w
                    grads[k, 0] += d_pow * (ca * dx + cb * dy)
                    grads[k, 1] += d_pow * (cb * dx + cc * dy)
                    grads[k, 2] += d_pow * (-0.5 * dx * dx)
                    grads[k, 3] += d_pow * (-dx * dy)
                    grads[k, 4] += d_pow * (-0.5 * dy * dy)
    return grads


@nb.njit(cache=True)
def reduce_grads(grads, ids, n):
    out = np.zeros((n, grads.shape[1]), grads.dtype)
    for k in range(ids.shape[0]):
        g = ids[k]
        for j in range(grads.shape[1]):
            out[g, j] += grads[k, j]
    return out
