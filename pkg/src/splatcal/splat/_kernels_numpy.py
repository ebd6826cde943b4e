"""Pure-numpy compositing kernels, same contract as ``_kernels_numba``.

Each tile is processed with its pixels vectorized and a Python loop over the
tile's depth-sorted Gaussians.  Skipped contributions are encoded as
``alpha = 0``, which leaves transmittance and color untouched.
"""

import numpy as np

N_ENTRY_GRADS = 10


def _tile_pixels(t, ntx, height, width, tile):
    tx, ty = t % ntx, t // ntx
    ys = np.arange(ty * tile, min(height, (ty + 1) * tile))
    xs = np.arange(tx * tile, min(width, (tx + 1) * tile))
    py, px = np.meshgrid(ys, xs, indexing="ij")
    return py.ravel(), px.ravel()


def _alphas(i, fx, fy, mean2d, conic, opac, amax, amin):
    dx = fx - mean2d[i, 0]
    dy = fy - mean2d[i, 1]
    power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
    gw = np.exp(power)
    a = opac[i] * gw
    clamped = a > amax
    a = np.where(clamped, amax, a)
    a = np.where(a < amin, 0.0, a)
    return a, gw, dx, dy, clamped


def composite_forward(mean2d, conic, opac, colors, zdep, offsets, ids,
                      height, width, tile, amax, amin):
    rgb = np.zeros((height, width, 3))
    alpha = np.zeros((height, width))
    depth = np.zeros((height, width))
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    for t in range(ntx * nty):
        start, end = offsets[t], offsets[t + 1]
        if start == end:
            continue
        py, px = _tile_pixels(t, ntx, height, width, tile)
        fx, fy = px + 0.5, py + 0.5
        T = np.ones(py.size)
        col = np.zeros((py.size, 3))
        d = np.zeros(py.size)
        for e in range(start, end):
            i = ids[e]
            a = _alphas(i, fx, fy, mean2d, conic, opac, amax, amin)[0]
            w = a * T
            col += w[:, None] * colors[i]
            d += zdep[i] * w
            T = T * (1.0 - a)
        acc = 1.0 - T
        rgb[py, px] = col
        alpha[py, px] = acc
        depth[py, px] = np.where(acc > 0, d / np.where(acc > 0, acc, 1.0), 0.0)
    return rgb, alpha, depth


def composite_backward(mean2d, conic, opac, colors, zdep, offsets, ids,
                       height, width, tile, amax, amin,
                       grad_rgb, grad_depth, use_depth):
    egrad = np.zeros((ids.shape[0], N_ENTRY_GRADS))
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    for t in range(ntx * nty):
        start, end = offsets[t], offsets[t + 1]
        n = end - start
        if n == 0:
            continue
        py, px = _tile_pixels(t, ntx, height, width, tile)
        fx, fy = px + 0.5, py + 0.5
        P = py.size
        A = np.empty((n, P))
        Tb = np.empty((n, P))
        G = np.empty((n, P))
        DX = np.empty((n, P))
        DY = np.empty((n, P))
        CL = np.empty((n, P), dtype=bool)
        T = np.ones(P)
        D = np.zeros(P)
        for k, e in enumerate(range(start, end)):
            a, gw, dx, dy, cl = _alphas(ids[e], fx, fy, mean2d, conic, opac, amax, amin)
            A[k], Tb[k], G[k], DX[k], DY[k], CL[k] = a, T, gw, dx, dy, cl
            D += zdep[ids[e]] * a * T
            T = T * (1.0 - a)
        t_final = T
        acc = 1.0 - t_final
        grgb = grad_rgb[py, px]
        g_num = np.zeros(P)
        g_acc = np.zeros(P)
        if use_depth:
            ok = acc > 0
            safe = np.where(ok, acc, 1.0)
            gdep = grad_depth[py, px]
            g_num = np.where(ok, gdep / safe, 0.0)
            g_acc = np.where(ok, -gdep * D / safe**2, 0.0)
        S = np.zeros((P, 3))
        SD = np.zeros(P)
        for k in range(n - 1, -1, -1):
            e = start + k
            i = ids[e]
            a, Tk = A[k], Tb[k]
            live = a > 0
            w = a * Tk
            inv = 1.0 / (1.0 - a)
            egrad[e, 0:3] += w @ grgb
            da = np.einsum("pc,pc->p", grgb, colors[i][None, :] * Tk[:, None] - S * inv[:, None])
            if use_depth:
                da += g_num * (zdep[i] * Tk - SD * inv) + g_acc * t_final * inv
                egrad[e, 9] += np.sum(g_num * w)
            S += w[:, None] * colors[i]
            SD += zdep[i] * w
            da = np.where(live & ~CL[k], da, 0.0)
            gw, dx, dy = G[k], DX[k], DY[k]
            egrad[e, 3] += np.sum(da * gw)
            dpow = da * opac[i] * gw
            egrad[e, 4] += np.sum(dpow * (conic[i, 0] * dx + conic[i, 1] * dy))
            egrad[e, 5] += np.sum(dpow * (conic[i, 1] * dx + conic[i, 2] * dy))
            egrad[e, 6] += np.sum(dpow * (-0.5 * dx * dx))
            egrad[e, 7] += np.sum(dpow * (-dx * dy))
            egrad[e, 8] += np.sum(dpow * (-0.5 * dy * dy))
    return egrad
