"""Pure-python rasterization kernels.

Semantics match the compiled extension exactly: same traversal order, same
scalar arithmetic, same per-tile gradient reduction order, so outputs agree
bit-for-bit with the compiled backend. Intended for small problems, tests and
the backend benchmark; the compiled kernel covers training-scale work.
"""

from __future__ import annotations

import math

import numpy as np

ALPHA_CLAMP = 0.99
T_STOP = 1e-4


def forward(means2d, icov, opac, qskip, depth, normal, color, sem, bbox,
            tile_gauss, tile_offsets, starts, caps, ids, alphas, trans,
            H, W, tile_size, threads=1):
    """Front-to-back compositing of depth-sorted projected gaussians.

    Cache records are written into the caller-allocated id/alpha/trans arrays
    at the per-pixel `starts` offsets. Returns (rgb, dep, nrm, semb, alpha,
    counts, gauss_counts); `threads` is accepted for interface parity.
    """
    M = means2d.shape[0]
    C = sem.shape[1]
    rgb = np.zeros((H, W, 3))
    dep = np.zeros((H, W))
    nrm = np.zeros((H, W, 3))
    semb = np.zeros((H, W, C))
    alpha = np.zeros((H, W))
    counts = np.zeros(H * W, dtype=np.int64)
    gauss_counts = np.zeros(M, dtype=np.int64)

    ntx = (W + tile_size - 1) // tile_size
    nty = (H + tile_size - 1) // tile_size

    for t in range(ntx * nty):
        lo, hi = int(tile_offsets[t]), int(tile_offsets[t + 1])
        if lo == hi:
            continue
        ty, tx = divmod(t, ntx)
        y0, y1 = ty * tile_size, min((ty + 1) * tile_size, H)
        x0, x1 = tx * tile_size, min((tx + 1) * tile_size, W)
        for py in range(y0, y1):
            cyp = py + 0.5
            for px in range(x0, x1):
                cxp = px + 0.5
                T_ = 1.0
                pix = py * W + px
                base = int(starts[pix])
                cnt = 0
                r = g = b = 0.0
                dsum = 0.0
                nx = ny = nz = 0.0
                svals = semb[py, px]
                asum = 0.0
                for jj in range(lo, hi):
                    if T_ < T_STOP:
                        break
                    k = int(tile_gauss[jj])
                    if not (bbox[k, 0] <= px < bbox[k, 1]
                            and bbox[k, 2] <= py < bbox[k, 3]):
                        continue
                    dx = cxp - means2d[k, 0]
                    dy = cyp - means2d[k, 1]
                    q = (icov[k, 0] * dx * dx + 2.0 * icov[k, 1] * dx * dy
                         + icov[k, 2] * dy * dy)
                    if q > qskip[k]:
                        continue
                    a = opac[k] * math.exp(-0.5 * q)
                    if a > ALPHA_CLAMP:
                        a = ALPHA_CLAMP
                    w = a * T_
                    r += w * color[k, 0]
                    g += w * color[k, 1]
                    b += w * color[k, 2]
                    dsum += w * depth[k]
                    nx += w * normal[k, 0]
                    ny += w * normal[k, 1]
                    nz += w * normal[k, 2]
                    for c in range(C):
                        svals[c] += w * sem[k, c]
                    asum += w
                    ids[base + cnt] = k
                    alphas[base + cnt] = a
                    trans[base + cnt] = T_
                    cnt += 1
                    gauss_counts[k] += 1
                    T_ = T_ * (1.0 - a)
                counts[pix] = cnt
                ids[base + cnt:base + int(caps[pix])] = -1
                rgb[py, px, 0] = r
                rgb[py, px, 1] = g
                rgb[py, px, 2] = b
                nrm[py, px, 0] = nx
                nrm[py, px, 1] = ny
                nrm[py, px, 2] = nz
                alpha[py, px] = asum
                dep[py, px] = dsum / asum if asum > 0.0 else 0.0

    return rgb, dep, nrm, semb, alpha, counts, gauss_counts


def backward(means2d, icov, opac, depth, normal, color, sem, bbox,
             tile_gauss, tile_offsets, starts, counts, ids, alphas, trans,
             g_rgb, g_dep, g_nrm, g_sem, g_alpha,
             H, W, tile_size, threads=1):
    """Reverse-mode of `forward` onto the projected per-gaussian quantities.

    Gradient accumulation is per (tile, gaussian) slot followed by a reduce in
    slot order, matching the compiled kernel's deterministic reduction.
    """
    M = means2d.shape[0]
    C = sem.shape[1]
    P = int(tile_offsets[-1])
    loc_mean = np.zeros((P, 2))
    loc_icov = np.zeros((P, 3))
    loc_op = np.zeros(P)
    loc_z = np.zeros(P)
    loc_nrm = np.zeros((P, 3))
    loc_col = np.zeros((P, 3))
    loc_sem = np.zeros((P, C))

    ntx = (W + tile_size - 1) // tile_size
    nty = (H + tile_size - 1) // tile_size
    has_galpha = g_alpha is not None

    for t in range(ntx * nty):
        lo, hi = int(tile_offsets[t]), int(tile_offsets[t + 1])
        if lo == hi:
            continue
        ty, tx = divmod(t, ntx)
        y0, y1 = ty * tile_size, min((ty + 1) * tile_size, H)
        x0, x1 = tx * tile_size, min((tx + 1) * tile_size, W)
        for py in range(y0, y1):
            cyp = py + 0.5
            for px in range(x0, x1):
                cxp = px + 0.5
                pix = py * W + px
                r0 = int(starts[pix])
                r1 = r0 + int(counts[pix])
                if r0 == r1:
                    continue
                # recompute the raw blended sums needed by depth normalization
                s_w = 0.0
                s_z = 0.0
                for r in range(r0, r1):
                    w = alphas[r] * trans[r]
                    s_w += w
                    s_z += w * depth[ids[r]]
                gd = g_dep[py, px]
                g_sz = gd / s_w if s_w > 0.0 else 0.0
                g_sw = -gd * s_z / (s_w * s_w) if s_w > 0.0 else 0.0
                if has_galpha:
                    g_sw += g_alpha[py, px]
                gr = g_rgb[py, px]
                gn = g_nrm[py, px]
                gs = g_sem[py, px]

                s_u = 0.0
                jj = hi - 1
                for r in range(r1 - 1, r0 - 1, -1):
                    k = int(ids[r])
                    while tile_gauss[jj] != k:
                        jj -= 1
                    a = alphas[r]
                    T_ = trans[r]
                    w = a * T_
                    u = (gr[0] * color[k, 0] + gr[1] * color[k, 1]
                         + gr[2] * color[k, 2]
                         + gn[0] * normal[k, 0] + gn[1] * normal[k, 1]
                         + gn[2] * normal[k, 2]
                         + g_sz * depth[k] + g_sw)
                    for c in range(C):
                        u += gs[c] * sem[k, c]
                    loc_col[jj, 0] += w * gr[0]
                    loc_col[jj, 1] += w * gr[1]
                    loc_col[jj, 2] += w * gr[2]
                    loc_nrm[jj, 0] += w * gn[0]
                    loc_nrm[jj, 1] += w * gn[1]
                    loc_nrm[jj, 2] += w * gn[2]
                    for c in range(C):
                        loc_sem[jj, c] += w * gs[c]
                    loc_z[jj] += w * g_sz
                    ga = T_ * u - s_u / (1.0 - a)
                    s_u += w * u
                    if a >= ALPHA_CLAMP:
                        jj -= 1
                        continue  # clamp is flat: no geometry/opacity gradient
                    loc_op[jj] += (a / opac[k]) * ga
                    gq = -0.5 * a * ga
                    dx = cxp - means2d[k, 0]
                    dy = cyp - means2d[k, 1]
                    loc_icov[jj, 0] += gq * dx * dx
                    loc_icov[jj, 1] += gq * 2.0 * dx * dy
                    loc_icov[jj, 2] += gq * dy * dy
                    gdx = gq * (2.0 * (icov[k, 0] * dx + icov[k, 1] * dy))
                    gdy = gq * (2.0 * (icov[k, 1] * dx + icov[k, 2] * dy))
                    loc_mean[jj, 0] += -gdx
                    loc_mean[jj, 1] += -gdy
                    jj -= 1

    g_mean = np.zeros((M, 2))
    g_icov = np.zeros((M, 3))
    g_op = np.zeros(M)
    g_z = np.zeros(M)
    g_normal = np.zeros((M, 3))
    g_color = np.zeros((M, 3))
    g_semv = np.zeros((M, C))
    for jj in range(P):
        k = int(tile_gauss[jj])
        g_mean[k] += loc_mean[jj]
        g_icov[k] += loc_icov[jj]
        g_op[k] += loc_op[jj]
        g_z[k] += loc_z[jj]
        g_normal[k] += loc_nrm[jj]
        g_color[k] += loc_col[jj]
        g_semv[k] += loc_sem[jj]
    return g_mean, g_icov, g_op, g_z, g_normal, g_color, g_semv


def nn_distances(queries, refs):
    """Exact nearest-neighbor distance per query, brute force, blockwise."""
    queries = np.asarray(queries, dtype=np.float64)
    refs = np.asarray(refs, dtype=np.float64)
    out = np.empty(len(queries))
    block = max(1, int(2e7 // max(len(refs), 1)))
    for i0 in range(0, len(queries), block):
        q = queries[i0:i0 + block]
        d0 = q[:, 0, None] - refs[None, :, 0]
        d1 = q[:, 1, None] - refs[None, :, 1]
        d2 = q[:, 2, None] - refs[None, :, 2]
        dist2 = d0 * d0 + d1 * d1 + d2 * d2
        out[i0:i0 + block] = np.sqrt(dist2.min(axis=1))
    return out
