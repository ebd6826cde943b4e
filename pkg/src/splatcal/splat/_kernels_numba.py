"""Per-tile compositing kernels compiled with numba.

Layout shared with the numpy fallback in ``_kernels_numpy``:

* ``conic`` rows are ``(A, B, C)`` with ``power = -0.5 (A dx^2 + C dy^2) - B dx dy``;
* ``offsets``/``ids`` form a CSR list of Gaussians per tile, each tile's slice
  already sorted front to back;
* backward returns one gradient row per tile entry with columns
  ``[color(3), opacity, mean2d(2), conic(3), depth]``.

Every tile writes only its own pixels and its own entry rows, so results are
independent of the thread count.
"""

import numpy as np
from numba import njit, prange

N_ENTRY_GRADS = 10


@njit(cache=True)
def _gather(mean2d, conic, opac, ids, start, end, amin):
    # contiguous copy of one tile's entries; column 5 is a conservative
    # log-space cutoff so that most sub-threshold pairs skip the exp
    loc = np.empty((end - start, 6))
    for e in range(start, end):
        i = ids[e]
        j = e - start
        loc[j, 0] = mean2d[i, 0]
        loc[j, 1] = mean2d[i, 1]
        loc[j, 2] = conic[i, 0]
        loc[j, 3] = conic[i, 1]
        loc[j, 4] = conic[i, 2]
        loc[j, 5] = np.log(amin / opac[i]) - 1e-6
    return loc


@njit(parallel=True, cache=True)
def composite_forward(mean2d, conic, opac, colors, zdep, offsets, ids,
                      height, width, tile, amax, amin):
    rgb = np.zeros((height, width, 3))
    alpha = np.zeros((height, width))
    depth = np.zeros((height, width))
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    for t in prange(ntx * nty):
        tx = t % ntx
        ty = t // ntx
        start = offsets[t]
        end = offsets[t + 1]
        if start == end:
            continue
        loc = _gather(mean2d, conic, opac, ids, start, end, amin)
        for py in range(ty * tile, min(height, (ty + 1) * tile)):
            for px in range(tx * tile, min(width, (tx + 1) * tile)):
                fx = px + 0.5
                fy = py + 0.5
                T = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                d = 0.0
                for e in range(start, end):
                    j = e - start
                    dx = fx - loc[j, 0]
                    dy = fy - loc[j, 1]
                    power = -0.5 * (loc[j, 2] * dx * dx + loc[j, 4] * dy * dy) \
                        - loc[j, 3] * dx * dy
                    if power < loc[j, 5]:
                        continue
                    i = ids[e]
                    a = opac[i] * np.exp(power)
                    if a > amax:
                        a = amax
                    if a < amin:
                        continue
                    w = a * T
                    r += colors[i, 0] * w
                    g += colors[i, 1] * w
                    b += colors[i, 2] * w
                    d += zdep[i] * w
                    T *= 1.0 - a
                rgb[py, px, 0] = r
                rgb[py, px, 1] = g
                rgb[py, px, 2] = b
                al = 1.0 - T
                alpha[py, px] = al
                if al > 0.0:
                    depth[py, px] = d / al
    return rgb, alpha, depth


@njit(parallel=True, cache=True)
def composite_backward(mean2d, conic, opac, colors, zdep, offsets, ids,
                       height, width, tile, amax, amin,
                       grad_rgb, grad_depth, use_depth):
    egrad = np.zeros((ids.shape[0], N_ENTRY_GRADS))
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    for t in prange(ntx * nty):
        tx = t % ntx
        ty = t // ntx
        start = offsets[t]
        end = offsets[t + 1]
        n = end - start
        if n == 0:
            continue
        loc = _gather(mean2d, conic, opac, ids, start, end, amin)
        ebuf = np.empty(n, np.int64)
        abuf = np.empty(n)
        tbuf = np.empty(n)
        gbuf = np.empty(n)
        dxbuf = np.empty(n)
        dybuf = np.empty(n)
        cbuf = np.empty(n, np.bool_)
        for py in range(ty * tile, min(height, (ty + 1) * tile)):
            for px in range(tx * tile, min(width, (tx + 1) * tile)):
                fx = px + 0.5
                fy = py + 0.5
                # replay the forward pass, keeping per-contribution state
                T = 1.0
                D = 0.0
                cnt = 0
                for e in range(start, end):
                    j = e - start
                    dx = fx - loc[j, 0]
                    dy = fy - loc[j, 1]
                    power = -0.5 * (loc[j, 2] * dx * dx + loc[j, 4] * dy * dy) \
                        - loc[j, 3] * dx * dy
                    if power < loc[j, 5]:
                        continue
                    i = ids[e]
                    gw = np.exp(power)
                    a = opac[i] * gw
                    clamped = False
                    if a > amax:
                        a = amax
                        clamped = True
                    if a < amin:
                        continue
                    ebuf[cnt] = e
                    abuf[cnt] = a
                    tbuf[cnt] = T
                    gbuf[cnt] = gw
                    dxbuf[cnt] = dx
                    dybuf[cnt] = dy
                    cbuf[cnt] = clamped
                    D += zdep[i] * a * T
                    T *= 1.0 - a
                    cnt += 1
                if cnt == 0:
                    continue
                t_final = T
                acc = 1.0 - t_final
                gr = grad_rgb[py, px, 0]
                gg = grad_rgb[py, px, 1]
                gb = grad_rgb[py, px, 2]
                g_num = 0.0
                g_acc = 0.0
                if use_depth and acc > 0.0:
                    gdep = grad_depth[py, px]
                    g_num = gdep / acc
                    g_acc = -gdep * D / (acc * acc)
                s_r = 0.0
                s_g = 0.0
                s_b = 0.0
                s_d = 0.0
                for k in range(cnt - 1, -1, -1):
                    e = ebuf[k]
                    i = ids[e]
                    a = abuf[k]
                    Tk = tbuf[k]
                    w = a * Tk
                    inv = 1.0 / (1.0 - a)
                    egrad[e, 0] += gr * w
                    egrad[e, 1] += gg * w
                    egrad[e, 2] += gb * w
                    da = (gr * (colors[i, 0] * Tk - s_r * inv)
                          + gg * (colors[i, 1] * Tk - s_g * inv)
                          + gb * (colors[i, 2] * Tk - s_b * inv))
                    if use_depth:
                        da += g_num * (zdep[i] * Tk - s_d * inv) + g_acc * t_final * inv
                        egrad[e, 9] += g_num * w
                    s_r += colors[i, 0] * w
                    s_g += colors[i, 1] * w
                    s_b += colors[i, 2] * w
                    s_d += zdep[i] * w
                    if not cbuf[k]:
                        gw = gbuf[k]
                        egrad[e, 3] += da * gw
                        dpow = da * opac[i] * gw
                        dx = dxbuf[k]
                        dy = dybuf[k]
                        egrad[e, 4] += dpow * (conic[i, 0] * dx + conic[i, 1] * dy)
                        egrad[e, 5] += dpow * (conic[i, 1] * dx + conic[i, 2] * dy)
                        egrad[e, 6] += dpow * (-0.5 * dx * dx)
                        egrad[e, 7] += dpow * (-dx * dy)
                        egrad[e, 8] += dpow * (-0.5 * dy * dy)
    return egrad
