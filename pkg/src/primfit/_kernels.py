"""Compiled tile-parallel kernels for the forward and backward passes.

Everything here operates on plain arrays unpacked from the scene: the
parameter columns, a flattened template atlas, CSR tile bins, and CSR
per-pixel contribution lists. Tiles are the unit of parallelism; a tile
owns its pixel rectangle exclusively, so no kernel ever writes a cell
another thread can touch. Gradient accumulation goes to a per-tile
partial buffer and is reduced later in fixed tile order, which keeps
results bit-identical for any thread count.

The inverse transform, inside-box test, and bilinear weights are spelled
identically in every kernel; the equivalence tests against the naive
renderer rely on that.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit, prange

# Slot order in gradient buffers; mirrors the packed parameter layout.
_GX, _GY, _GS, _GR, _GN, _GC0 = 0, 1, 2, 3, 4, 5


@njit(cache=True, inline="always")
def _sigmoid(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(cache=True, inline="always")
def _texel(tex, base, wt, ht, u0, v0, ch):
    # zero padding outside the template box
    if u0 < 0 or u0 > wt - 1 or v0 < 0 or v0 > ht - 1:
        return 0.0
    return tex[base + v0 * wt + u0, ch]


@njit(cache=True, inline="always")
def _sample_channel(tex, base, wt, ht, U, V, ch):
    u0 = int(math.floor(U))
    v0 = int(math.floor(V))
    wu = U - u0
    wv = V - v0
    p00 = _texel(tex, base, wt, ht, u0, v0, ch)
    p01 = _texel(tex, base, wt, ht, u0 + 1, v0, ch)
    p10 = _texel(tex, base, wt, ht, u0, v0 + 1, ch)
    p11 = _texel(tex, base, wt, ht, u0 + 1, v0 + 1, ch)
    return (
        (1.0 - wu) * (1.0 - wv) * p00
        + wu * (1.0 - wv) * p01
        + (1.0 - wu) * wv * p10
        + wu * wv * p11
    )


@njit(cache=True, inline="always")
def _sample_channel_grad(tex, base, wt, ht, U, V, ch):
    u0 = int(math.floor(U))
    v0 = int(math.floor(V))
    wu = U - u0
    wv = V - v0
    p00 = _texel(tex, base, wt, ht, u0, v0, ch)
    p01 = _texel(tex, base, wt, ht, u0 + 1, v0, ch)
    p10 = _texel(tex, base, wt, ht, u0, v0 + 1, ch)
    p11 = _texel(tex, base, wt, ht, u0 + 1, v0 + 1, ch)
    gu = (1.0 - wv) * (p01 - p00) + wv * (p11 - p10)
    gv = (1.0 - wu) * (p10 - p00) + wu * (p11 - p01)
    return gu, gv


@njit(parallel=True, cache=True)
def forward_nosave(
    px, py, ps, pr, pnu, pcv, tid, qv,
    tex, toff, tw, th,
    bin_off, bin_idx,
    bg,
    alpha_max, mu_blend, eps_skip,
    tile, ntx, nty, W, H,
    out_img, out_alpha,
):
    nt = ntx * nty
    for t in prange(nt):
        tx = t % ntx
        ty = t // ntx
        x1 = min((tx + 1) * tile, W)
        y1 = min((ty + 1) * tile, H)
        b0 = bin_off[t]
        b1 = bin_off[t + 1]
        for yy in range(ty * tile, y1):
            for xx in range(tx * tile, x1):
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                for bi in range(b0, b1):
                    i = bin_idx[bi]
                    tt = tid[i]
                    wt = tw[tt]
                    ht = th[tt]
                    base = toff[tt]
                    s = ps[i]
                    ct = math.cos(pr[i])
                    st = math.sin(pr[i])
                    dx = xx - px[i]
                    dy = yy - py[i]
                    u = (ct * dx + st * dy) / s
                    v = (-st * dx + ct * dy) / (s * qv[i])
                    U = (u + 1.0) * 0.5 * (wt - 1)
                    V = (v + 1.0) * 0.5 * (ht - 1)
                    if U < 0.0 or U > wt - 1.0 or V < 0.0 or V > ht - 1.0:
                        continue
                    m = _sample_channel(tex, base, wt, ht, U, V, 3)
                    if m < eps_skip:
                        continue
                    a = alpha_max * _sigmoid(pnu[i]) * m
                    r = (1.0 - mu_blend) * _sigmoid(pcv[i, 0])
                    g = (1.0 - mu_blend) * _sigmoid(pcv[i, 1])
                    b = (1.0 - mu_blend) * _sigmoid(pcv[i, 2])
                    if mu_blend > 0.0:
                        r += mu_blend * _sample_channel(tex, base, wt, ht, U, V, 0)
                        g += mu_blend * _sample_channel(tex, base, wt, ht, U, V, 1)
                        b += mu_blend * _sample_channel(tex, base, wt, ht, U, V, 2)
                    Ta = T * a
                    c0 += Ta * r
                    c1 += Ta * g
                    c2 += Ta * b
                    T *= 1.0 - a
                out_img[yy, xx, 0] = c0 + T * bg[yy, xx, 0]
                out_img[yy, xx, 1] = c1 + T * bg[yy, xx, 1]
                out_img[yy, xx, 2] = c2 + T * bg[yy, xx, 2]
                out_alpha[yy, xx] = 1.0 - T


@njit(parallel=True, cache=True)
def count_entries(
    px, py, ps, pr, tid, qv,
    tex, toff, tw, th,
    bin_off, bin_idx,
    eps_skip,
    tile, ntx, nty, W, H,
    counts,
):
    nt = ntx * nty
    for t in prange(nt):
        tx = t % ntx
        ty = t // ntx
        x1 = min((tx + 1) * tile, W)
        y1 = min((ty + 1) * tile, H)
        b0 = bin_off[t]
        b1 = bin_off[t + 1]
        for yy in range(ty * tile, y1):
            for xx in range(tx * tile, x1):
                n = 0
                for bi in range(b0, b1):
                    i = bin_idx[bi]
                    tt = tid[i]
                    wt = tw[tt]
                    ht = th[tt]
                    base = toff[tt]
                    s = ps[i]
                    ct = math.cos(pr[i])
                    st = math.sin(pr[i])
                    dx = xx - px[i]
                    dy = yy - py[i]
                    u = (ct * dx + st * dy) / s
                    v = (-st * dx + ct * dy) / (s * qv[i])
                    U = (u + 1.0) * 0.5 * (wt - 1)
                    V = (v + 1.0) * 0.5 * (ht - 1)
                    if U < 0.0 or U > wt - 1.0 or V < 0.0 or V > ht - 1.0:
                        continue
                    m = _sample_channel(tex, base, wt, ht, U, V, 3)
                    if m < eps_skip:
                        continue
                    n += 1
                counts[yy * W + xx] = n


@njit(parallel=True, cache=True)
def fill_entries(
    px, py, ps, pr, pnu, pcv, tid, qv,
    tex, toff, tw, th,
    bin_off, bin_idx,
    bg,
    alpha_max, mu_blend, eps_skip,
    tile, ntx, nty, W, H,
    ent_off,
    ent_prim, ent_alpha, ent_color, ent_mask, ent_U, ent_V,
    out_img, out_alpha,
):
    nt = ntx * nty
    for t in prange(nt):
        tx = t % ntx
        ty = t // ntx
        x1 = min((tx + 1) * tile, W)
        y1 = min((ty + 1) * tile, H)
        b0 = bin_off[t]
        b1 = bin_off[t + 1]
        for yy in range(ty * tile, y1):
            for xx in range(tx * tile, x1):
                slot = ent_off[yy * W + xx]
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                for bi in range(b0, b1):
                    i = bin_idx[bi]
                    tt = tid[i]
                    wt = tw[tt]
                    ht = th[tt]
                    base = toff[tt]
                    s = ps[i]
                    ct = math.cos(pr[i])
                    st = math.sin(pr[i])
                    dx = xx - px[i]
                    dy = yy - py[i]
                    u = (ct * dx + st * dy) / s
                    v = (-st * dx + ct * dy) / (s * qv[i])
                    U = (u + 1.0) * 0.5 * (wt - 1)
                    V = (v + 1.0) * 0.5 * (ht - 1)
                    if U < 0.0 or U > wt - 1.0 or V < 0.0 or V > ht - 1.0:
                        continue
                    m = _sample_channel(tex, base, wt, ht, U, V, 3)
                    if m < eps_skip:
                        continue
                    a = alpha_max * _sigmoid(pnu[i]) * m
                    r = (1.0 - mu_blend) * _sigmoid(pcv[i, 0])
                    g = (1.0 - mu_blend) * _sigmoid(pcv[i, 1])
                    b = (1.0 - mu_blend) * _sigmoid(pcv[i, 2])
                    if mu_blend > 0.0:
                        r += mu_blend * _sample_channel(tex, base, wt, ht, U, V, 0)
                        g += mu_blend * _sample_channel(tex, base, wt, ht, U, V, 1)
                        b += mu_blend * _sample_channel(tex, base, wt, ht, U, V, 2)
                    ent_prim[slot] = i
                    ent_alpha[slot] = a
                    ent_color[slot, 0] = r
                    ent_color[slot, 1] = g
                    ent_color[slot, 2] = b
                    ent_mask[slot] = m
                    ent_U[slot] = U
                    ent_V[slot] = V
                    slot += 1
                    Ta = T * a
                    c0 += Ta * r
                    c1 += Ta * g
                    c2 += Ta * b
                    T *= 1.0 - a
                out_img[yy, xx, 0] = c0 + T * bg[yy, xx, 0]
                out_img[yy, xx, 1] = c1 + T * bg[yy, xx, 1]
                out_img[yy, xx, 2] = c2 + T * bg[yy, xx, 2]
                out_alpha[yy, xx] = 1.0 - T


@njit(parallel=True, cache=True)
def backward_tiles(
    ps, pr, pnu, pcv, tid, qv,
    tex, toff, tw, th,
    ent_off, ent_prim, ent_alpha, ent_color, ent_mask, ent_U, ent_V,
    bg, dL_dI, dL_dA,
    alpha_max, mu_blend,
    tile, ntx, nty, W, H,
    partials,
):
    nt = ntx * nty
    for t in prange(nt):
        tx = t % ntx
        ty = t // ntx
        x0 = tx * tile
        y0 = ty * tile
        x1 = min(x0 + tile, W)
        y1 = min(y0 + tile, H)
        # shared transmittance buffer, sized for the deepest pixel here
        emax = 0
        for yy in range(y0, y1):
            for xx in range(x0, x1):
                p = yy * W + xx
                n = ent_off[p + 1] - ent_off[p]
                if n > emax:
                    emax = n
        if emax == 0:
            continue
        Tbuf = np.empty(emax, dtype=np.float64)
        for yy in range(y0, y1):
            for xx in range(x0, x1):
                p = yy * W + xx
                e0 = ent_off[p]
                ne = ent_off[p + 1] - e0
                if ne == 0:
                    continue
                T = 1.0
                for e in range(ne):
                    Tbuf[e] = T
                    T *= 1.0 - ent_alpha[e0 + e]
                dI0 = dL_dI[yy, xx, 0]
                dI1 = dL_dI[yy, xx, 1]
                dI2 = dL_dI[yy, xx, 2]
                dA = dL_dA[yy, xx]
                bg0 = bg[yy, xx, 0]
                bg1 = bg[yy, xx, 1]
                bg2 = bg[yy, xx, 2]
                # suffix color sum (relative form) and back-product
                S0 = 0.0
                S1 = 0.0
                S2 = 0.0
                B = 1.0
                for e in range(ne - 1, -1, -1):
                    idx = e0 + e
                    i = ent_prim[idx]
                    a = ent_alpha[idx]
                    m = ent_mask[idx]
                    ck0 = ent_color[idx, 0]
                    ck1 = ent_color[idx, 1]
                    ck2 = ent_color[idx, 2]
                    Tk = Tbuf[e]
                    g = (
                        dI0 * (ck0 - S0 - bg0 * B)
                        + dI1 * (ck1 - S1 - bg1 * B)
                        + dI2 * (ck2 - S2 - bg2 * B)
                        + dA * B
                    )
                    dalpha = Tk * g
                    sig = _sigmoid(pnu[i])
                    partials[t, i, _GN] += dalpha * alpha_max * sig * (1.0 - sig) * m
                    if mu_blend < 1.0:
                        wc = Tk * a * (1.0 - mu_blend)
                        sc0 = _sigmoid(pcv[i, 0])
                        sc1 = _sigmoid(pcv[i, 1])
                        sc2 = _sigmoid(pcv[i, 2])
                        partials[t, i, _GC0] += dI0 * wc * sc0 * (1.0 - sc0)
                        partials[t, i, _GC0 + 1] += dI1 * wc * sc1 * (1.0 - sc1)
                        partials[t, i, _GC0 + 2] += dI2 * wc * sc2 * (1.0 - sc2)
                    # geometry via the mask's bilinear gradient
                    dm = dalpha * alpha_max * sig
                    tt = tid[i]
                    wt = tw[tt]
                    ht = th[tt]
                    U = ent_U[idx]
                    V = ent_V[idx]
                    gU, gV = _sample_channel_grad(tex, toff[tt], wt, ht, U, V, 3)
                    mu_u = gU * 0.5 * (wt - 1)
                    mu_v = gV * 0.5 * (ht - 1)
                    u = U / (0.5 * (wt - 1)) - 1.0
                    v = V / (0.5 * (ht - 1)) - 1.0
                    s = ps[i]
                    ct = math.cos(pr[i])
                    st = math.sin(pr[i])
                    q = qv[i]
                    partials[t, i, _GX] += dm * (
                        mu_u * (-ct / s) + mu_v * (st / (s * q))
                    )
                    partials[t, i, _GY] += dm * (
                        mu_u * (-st / s) + mu_v * (-ct / (s * q))
                    )
                    partials[t, i, _GS] += dm * (mu_u * (-u / s) + mu_v * (-v / s))
                    partials[t, i, _GR] += dm * (mu_u * (v * q) + mu_v * (-u / q))
                    S0 = a * ck0 + (1.0 - a) * S0
                    S1 = a * ck1 + (1.0 - a) * S1
                    S2 = a * ck2 + (1.0 - a) * S2
                    B *= 1.0 - a
