# cython: boundscheck=False, wraparound=False, cdivision=True
# cython: initializedcheck=False, language_level=3
"""Compiled rasterization kernels.

Mirrors semsplat.backend.reference operation for operation: identical
traversal order, identical scalar arithmetic, and per-(tile, gaussian)
accumulation slots reduced in fixed order, so results are bit-identical to
the reference backend and independent of thread count.
"""

import numpy as np

cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport exp, sqrt

cnp.import_array()

cdef double ALPHA_CLAMP = 0.99
cdef double T_STOP = 1e-4


cdef inline cnp.int64_t _i64abs(cnp.int64_t v) noexcept nogil:
    return -v if v < 0 else v


cdef inline void _tile_bounds(int t, int ntx, int tile_size, int H, int W,
                              int *x0, int *x1, int *y0, int *y1) noexcept nogil:
    cdef int ty = t // ntx
    cdef int tx = t - ty * ntx
    y0[0] = ty * tile_size
    y1[0] = min((ty + 1) * tile_size, H)
    x0[0] = tx * tile_size
    x1[0] = min((tx + 1) * tile_size, W)


cdef void _fill_tile(int t, int ntx, int tile_size, int H, int W, int C,
                     double[:, ::1] means2d, double[:, ::1] icov,
                     double[::1] opac, double[::1] qskip, double[::1] depth,
                     double[:, ::1] normal, double[:, ::1] color,
                     double[:, ::1] sem, int[:, ::1] bbox,
                     int[::1] tile_gauss, cnp.int64_t[::1] tile_offsets,
                     cnp.int64_t[::1] starts, cnp.int64_t[::1] caps,
                     cnp.int64_t[::1] counts,
                     double[:, :, ::1] rgb, double[:, ::1] dep,
                     double[:, :, ::1] nrm, double[:, :, ::1] semb,
                     double[:, ::1] alpha,
                     int[::1] ids, double[::1] alphas, double[::1] trans,
                     cnp.int64_t[::1] loc_cnt) noexcept nogil:
    cdef int x0, x1, y0, y1, px, py, k, c
    cdef cnp.int64_t jj, base, cnt
    cdef cnp.int64_t lo = tile_offsets[t], hi = tile_offsets[t + 1]
    cdef double T_, dx, dy, q, a, w, cxp, cyp
    cdef double r, g, b, dsum, nx, ny, nz, asum
    cdef double* semb_p
    cdef double* sem_k
    if lo == hi:
        return
    _tile_bounds(t, ntx, tile_size, H, W, &x0, &x1, &y0, &y1)
    for py in range(y0, y1):
        cyp = py + 0.5
        for px in range(x0, x1):
            cxp = px + 0.5
            T_ = 1.0
            base = starts[py * W + px]
            cnt = 0
            semb_p = &semb[py, px, 0]
            r = 0.0
            g = 0.0
            b = 0.0
            dsum = 0.0
            nx = 0.0
            ny = 0.0
            nz = 0.0
            asum = 0.0
            for jj in range(lo, hi):
                if T_ < T_STOP:
                    break
                k = tile_gauss[jj]
                if px < bbox[k, 0] or px >= bbox[k, 1] \
                        or py < bbox[k, 2] or py >= bbox[k, 3]:
                    continue
                dx = cxp - means2d[k, 0]
                dy = cyp - means2d[k, 1]
                q = (icov[k, 0] * dx * dx + 2.0 * icov[k, 1] * dx * dy
                     + icov[k, 2] * dy * dy)
                if q > qskip[k]:
                    continue
                a = opac[k] * exp(-0.5 * q)
                if a > ALPHA_CLAMP:
                    a = ALPHA_CLAMP
                w = a * T_
                r = r + w * color[k, 0]
                g = g + w * color[k, 1]
                b = b + w * color[k, 2]
                dsum = dsum + w * depth[k]
                nx = nx + w * normal[k, 0]
                ny = ny + w * normal[k, 1]
                nz = nz + w * normal[k, 2]
                sem_k = &sem[k, 0]
                for c in range(C):
                    semb_p[c] = semb_p[c] + w * sem_k[c]
                asum = asum + w
                ids[base + cnt] = k
                alphas[base + cnt] = a
                trans[base + cnt] = T_
                cnt = cnt + 1
                loc_cnt[jj] += 1
                T_ = T_ * (1.0 - a)
            counts[py * W + px] = cnt
            for jj in range(cnt, caps[py * W + px]):
                ids[base + jj] = -1
            rgb[py, px, 0] = r
            rgb[py, px, 1] = g
            rgb[py, px, 2] = b
            nrm[py, px, 0] = nx
            nrm[py, px, 1] = ny
            nrm[py, px, 2] = nz
            alpha[py, px] = asum
            dep[py, px] = dsum / asum if asum > 0.0 else 0.0


def forward(double[:, ::1] means2d, double[:, ::1] icov, double[::1] opac,
            double[::1] qskip, double[::1] depth, double[:, ::1] normal,
            double[:, ::1] color, double[:, ::1] sem, int[:, ::1] bbox,
            int[::1] tile_gauss, cnp.int64_t[::1] tile_offsets,
            cnp.int64_t[::1] starts, cnp.int64_t[::1] caps, int[::1] ids,
            double[::1] alphas,
            double[::1] trans, int H, int W, int tile_size, int threads):
    cdef int M = means2d.shape[0]
    cdef int C = sem.shape[1]
    cdef int n_tiles = tile_offsets.shape[0] - 1
    cdef int ntx = (W + tile_size - 1) // tile_size
    cdef cnp.int64_t P = tile_offsets[n_tiles]
    cdef int t
    cdef cnp.int64_t jj

    rgb = np.zeros((H, W, 3))
    dep = np.zeros((H, W))
    nrm = np.zeros((H, W, 3))
    semb = np.zeros((H, W, C))
    alpha = np.zeros((H, W))
    counts_arr = np.zeros(H * W, dtype=np.int64)
    loc_cnt_arr = np.zeros(P, dtype=np.int64)
    gauss_counts = np.zeros(M, dtype=np.int64)
    cdef double[:, :, ::1] rgb_v = rgb
    cdef double[:, ::1] dep_v = dep
    cdef double[:, :, ::1] nrm_v = nrm
    cdef double[:, :, ::1] semb_v = semb
    cdef double[:, ::1] alpha_v = alpha
    cdef cnp.int64_t[::1] counts = counts_arr
    cdef cnp.int64_t[::1] loc_cnt = loc_cnt_arr
    cdef cnp.int64_t[::1] gcnt = gauss_counts

    for t in prange(n_tiles, nogil=True, num_threads=threads,
                    schedule="dynamic", chunksize=1):
        _fill_tile(t, ntx, tile_size, H, W, C, means2d, icov, opac, qskip,
                   depth, normal, color, sem, bbox, tile_gauss, tile_offsets,
                   starts, caps, counts, rgb_v, dep_v, nrm_v, semb_v, alpha_v,
                   ids, alphas, trans, loc_cnt)

    with nogil:
        for jj in range(P):
            gcnt[tile_gauss[jj]] += loc_cnt[jj]

    return rgb, dep, nrm, semb, alpha, counts_arr, gauss_counts


cdef void _backward_tile(int t, int ntx, int tile_size, int H, int W, int C,
                         double[:, ::1] means2d, double[:, ::1] icov,
                         double[::1] opac, double[::1] depth,
                         double[:, ::1] normal, double[:, ::1] color,
                         double[:, ::1] sem, int[:, ::1] bbox,
                         int[::1] tile_gauss, cnp.int64_t[::1] tile_offsets,
                         cnp.int64_t[::1] starts, cnp.int64_t[::1] counts,
                         int[::1] ids, double[::1] alphas, double[::1] trans,
                         double[:, :, ::1] g_rgb, double[:, ::1] g_dep,
                         double[:, :, ::1] g_nrm, double[:, :, ::1] g_sem,
                         double[:, ::1] g_alpha, int has_galpha,
                         double[:, ::1] loc_mean, double[:, ::1] loc_icov,
                         double[::1] loc_op, double[::1] loc_z,
                         double[:, ::1] loc_nrm, double[:, ::1] loc_col,
                         double[:, ::1] loc_sem) noexcept nogil:
    cdef int x0, x1, y0, y1, px, py, k, c
    cdef cnp.int64_t jj, r, r0, r1
    cdef cnp.int64_t lo = tile_offsets[t], hi = tile_offsets[t + 1]
    cdef cnp.int64_t pix
    cdef double T_, dx, dy, a, w, u, ga, gq, gdx, gdy, cxp, cyp
    cdef double s_w, s_z, g_sz, g_sw, s_u, gd
    cdef double gr0, gr1, gr2, gn0, gn1, gn2
    cdef double* gsem_p
    cdef double* sem_k
    cdef double* locsem_p
    if lo == hi:
        return
    _tile_bounds(t, ntx, tile_size, H, W, &x0, &x1, &y0, &y1)
    for py in range(y0, y1):
        cyp = py + 0.5
        for px in range(x0, x1):
            cxp = px + 0.5
            pix = py * W + px
            r0 = starts[pix]
            r1 = r0 + counts[pix]
            if r0 == r1:
                continue
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
                g_sw = g_sw + g_alpha[py, px]
            gr0 = g_rgb[py, px, 0]
            gr1 = g_rgb[py, px, 1]
            gr2 = g_rgb[py, px, 2]
            gn0 = g_nrm[py, px, 0]
            gn1 = g_nrm[py, px, 1]
            gn2 = g_nrm[py, px, 2]
            gsem_p = &g_sem[py, px, 0]

            s_u = 0.0
            jj = hi - 1
            for r in range(r1 - 1, r0 - 1, -1):
                k = ids[r]
                while tile_gauss[jj] != k:
                    jj = jj - 1
                a = alphas[r]
                T_ = trans[r]
                w = a * T_
                sem_k = &sem[k, 0]
                u = (gr0 * color[k, 0]
                     + gr1 * color[k, 1]
                     + gr2 * color[k, 2]
                     + gn0 * normal[k, 0]
                     + gn1 * normal[k, 1]
                     + gn2 * normal[k, 2]
                     + g_sz * depth[k] + g_sw)
                for c in range(C):
                    u = u + gsem_p[c] * sem_k[c]
                loc_col[jj, 0] += w * gr0
                loc_col[jj, 1] += w * gr1
                loc_col[jj, 2] += w * gr2
                loc_nrm[jj, 0] += w * gn0
                loc_nrm[jj, 1] += w * gn1
                loc_nrm[jj, 2] += w * gn2
                locsem_p = &loc_sem[jj, 0]
                for c in range(C):
                    locsem_p[c] += w * gsem_p[c]
                loc_z[jj] += w * g_sz
                ga = T_ * u - s_u / (1.0 - a)
                s_u = s_u + w * u
                if a >= ALPHA_CLAMP:
                    jj = jj - 1
                    continue
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
                jj = jj - 1


def backward(double[:, ::1] means2d, double[:, ::1] icov, double[::1] opac,
             double[::1] depth, double[:, ::1] normal, double[:, ::1] color,
             double[:, ::1] sem, int[:, ::1] bbox, int[::1] tile_gauss,
             cnp.int64_t[::1] tile_offsets, cnp.int64_t[::1] starts,
             cnp.int64_t[::1] counts, int[::1] ids, double[::1] alphas,
             double[::1] trans, g_rgb_in, g_dep_in, g_nrm_in, g_sem_in,
             g_alpha_in, int H, int W, int tile_size, int threads):
    cdef int M = means2d.shape[0]
    cdef int C = sem.shape[1]
    cdef int n_tiles = tile_offsets.shape[0] - 1
    cdef int ntx = (W + tile_size - 1) // tile_size
    cdef cnp.int64_t P = tile_offsets[n_tiles]
    cdef int t
    cdef cnp.int64_t jj
    cdef int k, c

    cdef double[:, :, ::1] g_rgb = np.ascontiguousarray(g_rgb_in)
    cdef double[:, ::1] g_dep = np.ascontiguousarray(g_dep_in)
    cdef double[:, :, ::1] g_nrm = np.ascontiguousarray(g_nrm_in)
    cdef double[:, :, ::1] g_sem = np.ascontiguousarray(g_sem_in)
    cdef int has_galpha = g_alpha_in is not None
    cdef double[:, ::1] g_alpha = (
        np.ascontiguousarray(g_alpha_in) if has_galpha
        else np.zeros((1, 1)))

    loc_mean_a = np.zeros((P, 2))
    loc_icov_a = np.zeros((P, 3))
    loc_op_a = np.zeros(P)
    loc_z_a = np.zeros(P)
    loc_nrm_a = np.zeros((P, 3))
    loc_col_a = np.zeros((P, 3))
    loc_sem_a = np.zeros((P, C))
    cdef double[:, ::1] loc_mean = loc_mean_a
    cdef double[:, ::1] loc_icov = loc_icov_a
    cdef double[::1] loc_op = loc_op_a
    cdef double[::1] loc_z = loc_z_a
    cdef double[:, ::1] loc_nrm = loc_nrm_a
    cdef double[:, ::1] loc_col = loc_col_a
    cdef double[:, ::1] loc_sem = loc_sem_a

    for t in prange(n_tiles, nogil=True, num_threads=threads,
                    schedule="dynamic", chunksize=1):
        _backward_tile(t, ntx, tile_size, H, W, C, means2d, icov, opac,
                       depth, normal, color, sem, bbox, tile_gauss,
                       tile_offsets, starts, counts, ids, alphas, trans,
                       g_rgb, g_dep, g_nrm, g_sem, g_alpha, has_galpha,
                       loc_mean, loc_icov, loc_op, loc_z, loc_nrm, loc_col,
                       loc_sem)

    g_mean_a = np.zeros((M, 2))
    g_icov_a = np.zeros((M, 3))
    g_op_a = np.zeros(M)
    g_z_a = np.zeros(M)
    g_normal_a = np.zeros((M, 3))
    g_color_a = np.zeros((M, 3))
    g_semv_a = np.zeros((M, C))
    cdef double[:, ::1] g_mean = g_mean_a
    cdef double[:, ::1] g_icov_o = g_icov_a
    cdef double[::1] g_op = g_op_a
    cdef double[::1] g_z = g_z_a
    cdef double[:, ::1] g_normal = g_normal_a
    cdef double[:, ::1] g_color = g_color_a
    cdef double[:, ::1] g_semv = g_semv_a

    # deterministic reduction: fixed (tile, slot) order regardless of threads
    with nogil:
        for jj in range(P):
            k = tile_gauss[jj]
            g_mean[k, 0] += loc_mean[jj, 0]
            g_mean[k, 1] += loc_mean[jj, 1]
            g_icov_o[k, 0] += loc_icov[jj, 0]
            g_icov_o[k, 1] += loc_icov[jj, 1]
            g_icov_o[k, 2] += loc_icov[jj, 2]
            g_op[k] += loc_op[jj]
            g_z[k] += loc_z[jj]
            g_normal[k, 0] += loc_nrm[jj, 0]
            g_normal[k, 1] += loc_nrm[jj, 1]
            g_normal[k, 2] += loc_nrm[jj, 2]
            g_color[k, 0] += loc_col[jj, 0]
            g_color[k, 1] += loc_col[jj, 1]
            g_color[k, 2] += loc_col[jj, 2]
            for c in range(C):
                g_semv[k, c] += loc_sem[jj, c]

    return g_mean_a, g_icov_a, g_op_a, g_z_a, g_normal_a, g_color_a, g_semv_a


def nn_distances(double[:, ::1] queries, double[:, ::1] refs, int threads=1):
    """Exact nearest-neighbor distances via a uniform spatial grid.

    Squared distances use the same expression as the brute-force oracle, so
    results agree with it bit for bit.
    """
    cdef cnp.int64_t n = queries.shape[0]
    cdef cnp.int64_t m = refs.shape[0]
    lo = np.min(refs, axis=0)
    hi = np.max(refs, axis=0)
    extent = float(np.max(hi - lo))
    cdef int per_axis = int(min(128, max(1, round(m ** (1.0 / 3.0)))))
    cdef double cell = extent / per_axis if extent > 0 else 1.0
    dims_a = np.minimum(
        np.maximum(np.ceil((hi - lo) / cell), 1), 256).astype(np.int64)
    cdef cnp.int64_t gx = dims_a[0], gy = dims_a[1], gz = dims_a[2]

    ref_cell = np.minimum(
        ((np.asarray(refs) - lo) / cell).astype(np.int64),
        dims_a - 1)
    ref_cell = np.maximum(ref_cell, 0)
    flat = (ref_cell[:, 0] * gy + ref_cell[:, 1]) * gz + ref_cell[:, 2]
    order = np.argsort(flat, kind="stable")
    sorted_ref = np.ascontiguousarray(np.asarray(refs)[order])
    cell_off = np.zeros(gx * gy * gz + 1, dtype=np.int64)
    np.cumsum(np.bincount(flat, minlength=gx * gy * gz), out=cell_off[1:])

    out_a = np.empty(n)
    cdef double[::1] out = out_a
    cdef double[:, ::1] sref = sorted_ref
    cdef cnp.int64_t[::1] coff = cell_off
    cdef double lox = float(lo[0]), loy = float(lo[1]), loz = float(lo[2])
    cdef cnp.int64_t i, j, c0, c1
    cdef cnp.int64_t cx, cy, cz, ix, iy, iz, x_lo, x_hi, y_lo, y_hi, z_lo, z_hi
    cdef cnp.int64_t ring, rmax, cheb
    cdef double best, dx, dy, dz, d2, qx, qy, qz, bound

    for i in prange(n, nogil=True, num_threads=threads,
                    schedule="dynamic", chunksize=64):
        qx = queries[i, 0]
        qy = queries[i, 1]
        qz = queries[i, 2]
        cx = <cnp.int64_t>((qx - lox) / cell)
        cy = <cnp.int64_t>((qy - loy) / cell)
        cz = <cnp.int64_t>((qz - loz) / cell)
        if cx < 0:
            cx = 0
        if cx > gx - 1:
            cx = gx - 1
        if cy < 0:
            cy = 0
        if cy > gy - 1:
            cy = gy - 1
        if cz < 0:
            cz = 0
        if cz > gz - 1:
            cz = gz - 1
        rmax = max(max(cx, gx - 1 - cx), max(cy, gy - 1 - cy))
        rmax = max(rmax, max(cz, gz - 1 - cz))
        best = -1.0
        for ring in range(rmax + 1):
            if best >= 0.0 and ring >= 2:
                bound = (ring - 1) * cell
                if bound * bound > best:
                    break
            x_lo = max(cx - ring, 0)
            x_hi = min(cx + ring, gx - 1)
            y_lo = max(cy - ring, 0)
            y_hi = min(cy + ring, gy - 1)
            z_lo = max(cz - ring, 0)
            z_hi = min(cz + ring, gz - 1)
            for ix in range(x_lo, x_hi + 1):
                for iy in range(y_lo, y_hi + 1):
                    for iz in range(z_lo, z_hi + 1):
                        cheb = _i64abs(ix - cx)
                        if _i64abs(iy - cy) > cheb:
                            cheb = _i64abs(iy - cy)
                        if _i64abs(iz - cz) > cheb:
                            cheb = _i64abs(iz - cz)
                        if cheb != ring:
                            continue
                        c0 = coff[(ix * gy + iy) * gz + iz]
                        c1 = coff[(ix * gy + iy) * gz + iz + 1]
                        for j in range(c0, c1):
                            dx = qx - sref[j, 0]
                            dy = qy - sref[j, 1]
                            dz = qz - sref[j, 2]
                            d2 = dx * dx + dy * dy + dz * dz
                            if best < 0.0 or d2 < best:
                                best = d2
        out[i] = sqrt(best)
    return out_a
