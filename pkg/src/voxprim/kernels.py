"""Numba kernels for ray/box intersection, quadrature marching and its adjoint.

Every ray runs the same deterministic program:

1. gather boxes whose slab interval [t0, t1] (clipped to [near, far]) is
   nonempty, via the BVH or exhaustively;
2. sort them by (t0, index);
3. merge overlapping intervals into segments [a, b]; within a segment samples
   sit at the midpoints of pieces [a + m*step, min(a + (m+1)*step, b)];
4. at each sample, every box whose interval contains t contributes its
   trilinear payload; densities add and colors blend density-weighted;
5. composite front to back, stopping once transmittance drops below eps.

The backward pass replays 1-5 and differentiates the result with respect to
payload voxels and box half-extents. Half-extents enter through the local
coordinates of each sample and through the segment endpoints a and b.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit, prange

INF = np.inf


@njit(cache=True, inline="always")
def _box_hit(p, o, d, near, far, centers, rotm, half, n, hidx, ht0, ht1, hql, hel, hdt, hax):
    tn = -INF
    tf = INF
    ea = -1
    xa = -1
    dtn = 0.0
    dtf = 0.0
    for i in range(3):
        q = (rotm[p, 0, i] * (o[0] - centers[p, 0]) + rotm[p, 1, i] * (o[1] - centers[p, 1])
             + rotm[p, 2, i] * (o[2] - centers[p, 2]))
        e = rotm[p, 0, i] * d[0] + rotm[p, 1, i] * d[1] + rotm[p, 2, i] * d[2]
        h = half[p, i]
        hql[n, i] = q / h
        hel[n, i] = e / h
        if e == 0.0:
            if q < -h or q > h:
                return False
            continue
        ta = (-h - q) / e
        tb = (h - q) / e
        if ta > tb:
            ta, tb = tb, ta
        if ta > tn:
            tn = ta
            ea = i
            dtn = -1.0 / abs(e)
        if tb < tf:
            tf = tb
            xa = i
            dtf = 1.0 / abs(e)
    if near > tn:
        tn = near
        ea = -1
    if far < tf:
        tf = far
        xa = -1
    if not (tn < tf):
        return False
    hidx[n] = p
    ht0[n] = tn
    ht1[n] = tf
    hax[n, 0] = ea
    hax[n, 1] = xa
    hdt[n, 0] = dtn
    hdt[n, 1] = dtf
    return True


@njit(cache=True, inline="always")
def _aabb_hit(o, d, lo, hi, node, near, far):
    tmin = near
    tmax = far
    for i in range(3):
        if d[i] == 0.0:
            if o[i] < lo[node, i] or o[i] > hi[node, i]:
                return False
        else:
            t1 = (lo[node, i] - o[i]) / d[i]
            t2 = (hi[node, i] - o[i]) / d[i]
            if t1 > t2:
                t1, t2 = t2, t1
            if t1 > tmin:
                tmin = t1
            if t2 < tmax:
                tmax = t2
    return tmin <= tmax


@njit(cache=True)
def gather_hits(o, d, near, far, centers, rotm, half, lo, hi, left, right, start, count, order,
                use_bvh, stack, hidx, ht0, ht1, hql, hel, hdt, hax, perm):
    """Collect intersected boxes into the hit buffers and sort them; returns the hit count."""
    n = 0
    if use_bvh:
        sp = 0
        stack[0] = 0
        sp = 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if not _aabb_hit(o, d, lo, hi, node, near, far):
                continue
            c = count[node]
            if c > 0:
                s = start[node]
                for q in range(s, s + c):
                    if _box_hit(order[q], o, d, near, far, centers, rotm, half, n,
                                hidx, ht0, ht1, hql, hel, hdt, hax):
                        n += 1
            else:
                stack[sp] = right[node]
                stack[sp + 1] = left[node]
                sp += 2
    else:
        for p in range(centers.shape[0]):
            if _box_hit(p, o, d, near, far, centers, rotm, half, n, hidx, ht0, ht1, hql, hel, hdt, hax):
                n += 1
    # insertion sort by (t0, primitive index)
    for i in range(n):
        perm[i] = i
    for i in range(1, n):
        key = perm[i]
        kt = ht0[key]
        kp = hidx[key]
        j = i - 1
        while j >= 0 and (ht0[perm[j]] > kt or (ht0[perm[j]] == kt and hidx[perm[j]] > kp)):
            perm[j + 1] = perm[j]
            j -= 1
        perm[j + 1] = key
    return n


@njit(cache=True, inline="always")
def _axis(x, S):
    f = (x + 1.0) * 0.5 * S - 0.5
    g = 0.5 * S
    if f < 0.0:
        f = 0.0
        g = 0.0
    elif f > S - 1.0:
        f = S - 1.0
        g = 0.0
    i = int(f)
    if i > S - 2:
        i = S - 2
    return i, f - i, g


@njit(cache=True)
def trilerp(color, density, p, x0, x1, x2, S):
    """Clamped trilinear payload lookup at local coordinates; returns (sigma, r, g, b)."""
    i, wx, _ = _axis(x0, S)
    j, wy, _ = _axis(x1, S)
    k, wz, _ = _axis(x2, S)
    sig = 0.0
    c0 = 0.0
    c1 = 0.0
    c2 = 0.0
    for a in range(2):
        wa = wx if a == 1 else 1.0 - wx
        for b in range(2):
            wb = wy if b == 1 else 1.0 - wy
            for c in range(2):
                wc = wz if c == 1 else 1.0 - wz
                w = wa * wb * wc
                sig += w * density[p, i + a, j + b, k + c]
                c0 += w * color[p, 0, i + a, j + b, k + c]
                c1 += w * color[p, 1, i + a, j + b, k + c]
                c2 += w * color[p, 2, i + a, j + b, k + c]
    return sig, c0, c1, c2


@njit(cache=True)
def _trilerp_grad(color, density, p, x0, x1, x2, S, wk):
    """Value and local-coordinate gradient. wk[0]=sigma, wk[1:4]=rgb,
    wk[4:7]=dsigma/dx, wk[7+3*ch+ax]=d color_ch/dx_ax."""
    i, wx, gx = _axis(x0, S)
    j, wy, gy = _axis(x1, S)
    k, wz, gz = _axis(x2, S)
    for q in range(16):
        wk[q] = 0.0
    for a in range(2):
        wa = wx if a == 1 else 1.0 - wx
        da = 1.0 if a == 1 else -1.0
        for b in range(2):
            wb = wy if b == 1 else 1.0 - wy
            db = 1.0 if b == 1 else -1.0
            for c in range(2):
                wc = wz if c == 1 else 1.0 - wz
                dc = 1.0 if c == 1 else -1.0
                w = wa * wb * wc
                g0 = da * wb * wc * gx
                g1 = wa * db * wc * gy
                g2 = wa * wb * dc * gz
                v = density[p, i + a, j + b, k + c]
                wk[0] += w * v
                wk[4] += g0 * v
                wk[5] += g1 * v
                wk[6] += g2 * v
                for ch in range(3):
                    v = color[p, ch, i + a, j + b, k + c]
                    wk[1 + ch] += w * v
                    wk[7 + 3 * ch] += g0 * v
                    wk[8 + 3 * ch] += g1 * v
                    wk[9 + 3 * ch] += g2 * v


@njit(cache=True)
def _trilerp_scatter(dcol, dden, p, x0, x1, x2, S, gs, gc0, gc1, gc2):
    i, wx, _ = _axis(x0, S)
    j, wy, _ = _axis(x1, S)
    k, wz, _ = _axis(x2, S)
    for a in range(2):
        wa = wx if a == 1 else 1.0 - wx
        for b in range(2):
            wb = wy if b == 1 else 1.0 - wy
            for c in range(2):
                wc = wz if c == 1 else 1.0 - wz
                w = wa * wb * wc
                dden[p, i + a, j + b, k + c] += w * gs
                dcol[p, 0, i + a, j + b, k + c] += w * gc0
                dcol[p, 1, i + a, j + b, k + c] += w * gc1
                dcol[p, 2, i + a, j + b, k + c] += w * gc2


@njit(cache=True, inline="always")
def _field_at(t, lo_h, hi_h, perm, hidx, ht0, ht1, hql, hel, color, density, S):
    sig = 0.0
    s0 = 0.0
    s1 = 0.0
    s2 = 0.0
    for h in range(lo_h, hi_h):
        q = perm[h]
        if ht0[q] > t:
            break
        if t > ht1[q]:
            continue
        sp, r, g, b = trilerp(color, density, hidx[q], hql[q, 0] + t * hel[q, 0],
                              hql[q, 1] + t * hel[q, 1], hql[q, 2] + t * hel[q, 2], S)
        sig += sp
        s0 += sp * r
        s1 += sp * g
        s2 += sp * b
    return sig, s0, s1, s2


@njit(cache=True)
def march_forward(n, perm, hidx, ht0, ht1, hql, hel, color, density, S, step, eps):
    """Composite one ray; returns (T_final, C_r, C_g, C_b, depth_accumulator)."""
    T = 1.0
    C0 = 0.0
    C1 = 0.0
    C2 = 0.0
    dep = 0.0
    i_next = 0
    while i_next < n and T >= eps:
        a = ht0[perm[i_next]]
        b = ht1[perm[i_next]]
        j = i_next + 1
        while j < n and ht0[perm[j]] <= b:
            if ht1[perm[j]] > b:
                b = ht1[perm[j]]
            j += 1
        m = 0
        while T >= eps:
            ts = a + m * step
            if not (ts < b):
                break
            dlen = b - ts
            if dlen >= step:
                dlen = step
            t = ts + 0.5 * dlen
            sig, s0, s1, s2 = _field_at(t, i_next, j, perm, hidx, ht0, ht1, hql, hel, color, density, S)
            ea = math.exp(-sig * dlen)
            w = T * (1.0 - ea)
            if sig > 0.0:
                inv = 1.0 / sig
                C0 += w * (s0 * inv)
                C1 += w * (s1 * inv)
                C2 += w * (s2 * inv)
            dep += w * t
            T = T * ea
            m += 1
        i_next = j
    return T, C0, C1, C2, dep


@njit(cache=True)
def march_backward(n, perm, hidx, ht0, ht1, hql, hel, hdt, hax, half, color, density, S, step, eps,
                   T_final, C0f, C1f, C2f, g0, g1, g2, g_alpha, bg, dcol, dden, dhalf, wk):
    """Accumulate d loss / d payload and d loss / d half-extent for one ray.

    (g0, g1, g2) and g_alpha are the upstream gradients of the composited pixel
    (background included) and of alpha = 1 - T_final.
    """
    T = 1.0
    A0 = 0.0
    A1 = 0.0
    A2 = 0.0
    g_bg = g0 * bg[0] + g1 * bg[1] + g2 * bg[2]
    g_T_final = g_alpha * T_final - T_final * g_bg
    i_next = 0
    while i_next < n and T >= eps:
        qa = perm[i_next]
        qb = qa
        a = ht0[qa]
        b = ht1[qa]
        j = i_next + 1
        while j < n and ht0[perm[j]] <= b:
            if ht1[perm[j]] > b:
                b = ht1[perm[j]]
                qb = perm[j]
            j += 1
        dLda = 0.0
        dLdb = 0.0
        m = 0
        while T >= eps:
            ts = a + m * step
            if not (ts < b):
                break
            dlen = b - ts
            last = dlen < step
            if not last:
                dlen = step
            t = ts + 0.5 * dlen
            sig, s0, s1, s2 = _field_at(t, i_next, j, perm, hidx, ht0, ht1, hql, hel, color, density, S)
            c0 = 0.0
            c1 = 0.0
            c2 = 0.0
            if sig > 0.0:
                inv = 1.0 / sig
                c0 = s0 * inv
                c1 = s1 * inv
                c2 = s2 * inv
            ea = math.exp(-sig * dlen)
            alpha_i = 1.0 - ea
            Tn = T * ea
            w = T * alpha_i
            A0 += w * c0
            A1 += w * c1
            A2 += w * c2
            # d loss / d (sigma * dlen) of this sample
            dLdtau = (g0 * (Tn * c0 - (C0f - A0)) + g1 * (Tn * c1 - (C1f - A1))
                      + g2 * (Tn * c2 - (C2f - A2)) + g_T_final)
            dLdsig = dLdtau * dlen
            dLddlen = dLdtau * sig
            ratio = alpha_i / sig if sig > 0.0 else dlen
            gc0 = g0 * T * ratio
            gc1 = g1 * T * ratio
            gc2 = g2 * T * ratio
            dLdt = 0.0
            for h in range(i_next, j):
                q = perm[h]
                if ht0[q] > t:
                    break
                if t > ht1[q]:
                    continue
                p = hidx[q]
                x0 = hql[q, 0] + t * hel[q, 0]
                x1 = hql[q, 1] + t * hel[q, 1]
                x2 = hql[q, 2] + t * hel[q, 2]
                _trilerp_grad(color, density, p, x0, x1, x2, S, wk)
                sp = wk[0]
                gs = dLdsig + gc0 * (wk[1] - c0) + gc1 * (wk[2] - c1) + gc2 * (wk[3] - c2)
                gcp0 = gc0 * sp
                gcp1 = gc1 * sp
                gcp2 = gc2 * sp
                _trilerp_scatter(dcol, dden, p, x0, x1, x2, S, gs, gcp0, gcp1, gcp2)
                gx0 = gs * wk[4] + gcp0 * wk[7] + gcp1 * wk[10] + gcp2 * wk[13]
                gx1 = gs * wk[5] + gcp0 * wk[8] + gcp1 * wk[11] + gcp2 * wk[14]
                gx2 = gs * wk[6] + gcp0 * wk[9] + gcp1 * wk[12] + gcp2 * wk[15]
                # x_i = (q_i + t e_i) / h_i at a fixed world point
                dhalf[p, 0] -= gx0 * x0 / half[p, 0]
                dhalf[p, 1] -= gx1 * x1 / half[p, 1]
                dhalf[p, 2] -= gx2 * x2 / half[p, 2]
                dLdt += gx0 * hel[q, 0] + gx1 * hel[q, 1] + gx2 * hel[q, 2]
            if last:
                dLda += 0.5 * dLdt - dLddlen
                dLdb += 0.5 * dLdt + dLddlen
            else:
                dLda += dLdt
            T = Tn
            m += 1
        if hax[qa, 0] >= 0:
            dhalf[hidx[qa], hax[qa, 0]] += dLda * hdt[qa, 0]
        if hax[qb, 1] >= 0:
            dhalf[hidx[qb], hax[qb, 1]] += dLdb * hdt[qb, 1]
        i_next = j


@njit(parallel=True, cache=True)
def render_rays(ro, rd, near, far, centers, rotm, half, color, density, lo, hi, left, right, start,
                count, order, use_bvh, step, eps, bg, out_rgb, out_alpha, out_depth, block):
    N = ro.shape[0]
    K = centers.shape[0]
    S = density.shape[1]
    nblocks = (N + block - 1) // block
    for bi in prange(nblocks):
        stack = np.empty(128, dtype=np.int64)
        hidx = np.empty(K, dtype=np.int64)
        perm = np.empty(K, dtype=np.int64)
        ht0 = np.empty(K)
        ht1 = np.empty(K)
        hql = np.empty((K, 3))
        hel = np.empty((K, 3))
        hdt = np.empty((K, 2))
        hax = np.empty((K, 2), dtype=np.int64)
        r_end = min(N, (bi + 1) * block)
        for r in range(bi * block, r_end):
            o = ro[r]
            d = rd[r]
            n = gather_hits(o, d, near[r], far[r], centers, rotm, half, lo, hi, left, right, start, count,
                            order, use_bvh, stack, hidx, ht0, ht1, hql, hel, hdt, hax, perm)
            T, C0, C1, C2, dep = march_forward(n, perm, hidx, ht0, ht1, hql, hel, color, density, S, step, eps)
            alpha = 1.0 - T
            out_rgb[r, 0] = C0 + T * bg[0]
            out_rgb[r, 1] = C1 + T * bg[1]
            out_rgb[r, 2] = C2 + T * bg[2]
            out_alpha[r] = alpha
            out_depth[r] = dep / alpha if alpha >= 1e-4 else far[r]


@njit(parallel=True, cache=True)
def backward_rays(ro, rd, near, far, centers, rotm, half, color, density, lo, hi, left, right, start,
                  count, order, use_bvh, step, eps, bg, g_rgb, g_alpha, dcol, dden, dhalf):
    """Payload/half-extent gradients for given per-ray upstream gradients.

    Rays are split into ``dcol.shape[0]`` contiguous chunks, each accumulating
    into its own buffer; the caller reduces buffers in index order so results do
    not depend on thread scheduling.
    """
    N = ro.shape[0]
    K = centers.shape[0]
    S = density.shape[1]
    n_chunks = dcol.shape[0]
    for ci in prange(n_chunks):
        stack = np.empty(128, dtype=np.int64)
        hidx = np.empty(K, dtype=np.int64)
        perm = np.empty(K, dtype=np.int64)
        ht0 = np.empty(K)
        ht1 = np.empty(K)
        hql = np.empty((K, 3))
        hel = np.empty((K, 3))
        hdt = np.empty((K, 2))
        hax = np.empty((K, 2), dtype=np.int64)
        wk = np.empty(16)
        r0 = (N * ci) // n_chunks
        r1 = (N * (ci + 1)) // n_chunks
        for r in range(r0, r1):
            if g_rgb[r, 0] == 0.0 and g_rgb[r, 1] == 0.0 and g_rgb[r, 2] == 0.0 and g_alpha[r] == 0.0:
                continue
            o = ro[r]
            d = rd[r]
            n = gather_hits(o, d, near[r], far[r], centers, rotm, half, lo, hi, left, right, start, count,
                            order, use_bvh, stack, hidx, ht0, ht1, hql, hel, hdt, hax, perm)
            if n == 0:
                continue
            T, C0, C1, C2, _ = march_forward(n, perm, hidx, ht0, ht1, hql, hel, color, density, S, step, eps)
            march_backward(n, perm, hidx, ht0, ht1, hql, hel, hdt, hax, half, color, density, S, step, eps,
                           T, C0, C1, C2, g_rgb[r, 0], g_rgb[r, 1], g_rgb[r, 2], g_alpha[r], bg,
                           dcol[ci], dden[ci], dhalf[ci], wk)


@njit(parallel=True, cache=True)
def fit_rays(ro, rd, near, far, centers, rotm, half, color, density, lo, hi, left, right, start,
             count, order, step, eps, bg, tgt_rgb, tgt_mask, w_rgb, w_sil, dcol, dden, dhalf, sums):
    """Fused forward, squared-error losses and backward over a ray batch.

    Upstream gradients are w_rgb * 2 (rgb - target) and w_sil * 2 (alpha - mask).
    ``sums[ci]`` receives the chunk's summed squared RGB and silhouette errors.
    """
    N = ro.shape[0]
    K = centers.shape[0]
    S = density.shape[1]
    n_chunks = dcol.shape[0]
    for ci in prange(n_chunks):
        stack = np.empty(128, dtype=np.int64)
        hidx = np.empty(K, dtype=np.int64)
        perm = np.empty(K, dtype=np.int64)
        ht0 = np.empty(K)
        ht1 = np.empty(K)
        hql = np.empty((K, 3))
        hel = np.empty((K, 3))
        hdt = np.empty((K, 2))
        hax = np.empty((K, 2), dtype=np.int64)
        wk = np.empty(16)
        r0 = (N * ci) // n_chunks
        r1 = (N * (ci + 1)) // n_chunks
        e_rgb = 0.0
        e_sil = 0.0
        for r in range(r0, r1):
            o = ro[r]
            d = rd[r]
            n = gather_hits(o, d, near[r], far[r], centers, rotm, half, lo, hi, left, right, start, count,
                            order, True, stack, hidx, ht0, ht1, hql, hel, hdt, hax, perm)
            T, C0, C1, C2, _ = march_forward(n, perm, hidx, ht0, ht1, hql, hel, color, density, S, step, eps)
            d0 = C0 + T * bg[0] - tgt_rgb[r, 0]
            d1 = C1 + T * bg[1] - tgt_rgb[r, 1]
            d2 = C2 + T * bg[2] - tgt_rgb[r, 2]
            da = (1.0 - T) - tgt_mask[r]
            e_rgb += d0 * d0 + d1 * d1 + d2 * d2
            e_sil += da * da
            if n == 0:
                continue
            march_backward(n, perm, hidx, ht0, ht1, hql, hel, hdt, hax, half, color, density, S, step, eps,
                           T, C0, C1, C2, 2.0 * w_rgb * d0, 2.0 * w_rgb * d1, 2.0 * w_rgb * d2,
                           2.0 * w_sil * da, bg, dcol[ci], dden[ci], dhalf[ci], wk)
        sums[ci, 0] = e_rgb
        sums[ci, 1] = e_sil
