"""Numba kernels: ray traversal, compositing, analytical gradients.

All geometry and accumulation run in float64; leaf payloads are read from
their float32 store and widened. Parallel kernels write only disjoint
per-ray slices, so results are bitwise independent of the thread count.
The per-leaf gradient/signal reduction is a separate serial kernel that
visits segments in a fixed global order.
"""

import numpy as np
from numba import njit, prange

# Probe offset past a cell boundary, relative to the root half extent.
# Segments shorter than the resulting nudge can be absorbed into their
# successor; their length is never lost.
NUDGE_REL = 2e-12

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199


@njit(cache=True, inline="always")
def _sigmoid(x):
    if x >= 0.0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


@njit(cache=True)
def _eval_basis(degree, x, y, z, out):
    out[0] = SH_C0
    if degree >= 1:
        out[1] = -SH_C1 * y
        out[2] = SH_C1 * z
        out[3] = -SH_C1 * x
    if degree >= 2:
        xx = x * x
        yy = y * y
        zz = z * z
        out[4] = 1.0925484305920792 * x * y
        out[5] = -1.0925484305920792 * y * z
        out[6] = 0.31539156525252005 * (2.0 * zz - xx - yy)
        out[7] = -1.0925484305920792 * x * z
        out[8] = 0.5462742152960396 * (xx - yy)
        if degree >= 3:
            out[9] = -0.5900435899266435 * y * (3.0 * xx - yy)
            out[10] = 2.890611442640554 * x * y * z
            out[11] = -0.4570457994644658 * y * (4.0 * zz - xx - yy)
            out[12] = 0.3731763325901154 * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
            out[13] = -0.4570457994644658 * x * (4.0 * zz - xx - yy)
            out[14] = 1.445305721320277 * z * (xx - yy)
            out[15] = -0.5900435899266435 * x * (xx - 3.0 * yy)


@njit(cache=True, inline="always")
def _descend(child, leaf, center, px, py, pz):
    node = 0
    while leaf[node] == 0:
        o = 0
        if px >= center[node, 0]:
            o |= 1
        if py >= center[node, 1]:
            o |= 2
        if pz >= center[node, 2]:
            o |= 4
        node = child[node, o]
    return node


@njit(cache=True)
def _trace_ray(child, leaf, center, depth, half_tab,
               ox, oy, oz, dx, dy, dz, t_near, t_far,
               seg_leaf, seg_t, seg_delta, base, store):
    """Walk one ray through the tree, one exact segment per leaf cube.

    Returns the segment count; when ``store`` is set, segments land in
    seg_* starting at ``base``.
    """
    root_half = half_tab[0]
    t0 = t_near
    t1 = t_far

    # Clip to the root cube (half-open slabs).
    for axis in range(3):
        if axis == 0:
            o, d, c = ox, dx, center[0, 0]
        elif axis == 1:
            o, d, c = oy, dy, center[0, 1]
        else:
            o, d, c = oz, dz, center[0, 2]
        lo = c - root_half
        hi = c + root_half
        if d != 0.0:
            ta = (lo - o) / d
            tb = (hi - o) / d
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
        elif o < lo or o >= hi:
            return 0
    if t1 <= t0:
        return 0

    nudge0 = root_half * NUDGE_REL
    nudge = nudge0
    n = 0
    t = t0
    while True:
        probe = t + nudge
        if probe >= t1:
            break
        px = ox + probe * dx
        py = oy + probe * dy
        pz = oz + probe * dz
        node = _descend(child, leaf, center, px, py, pz)
        h = half_tab[depth[node]]
        tex = t1
        if dx > 0.0:
            cand = (center[node, 0] + h - ox) / dx
            if cand < tex:
                tex = cand
        elif dx < 0.0:
            cand = (center[node, 0] - h - ox) / dx
            if cand < tex:
                tex = cand
        if dy > 0.0:
            cand = (center[node, 1] + h - oy) / dy
            if cand < tex:
                tex = cand
        elif dy < 0.0:
            cand = (center[node, 1] - h - oy) / dy
            if cand < tex:
                tex = cand
        if dz > 0.0:
            cand = (center[node, 2] + h - oz) / dz
            if cand < tex:
                tex = cand
        elif dz < 0.0:
            cand = (center[node, 2] - h - oz) / dz
            if cand < tex:
                tex = cand
        if tex <= probe:
            # Boundary roundoff stalled the walk; widen the probe. Any
            # sub-nudge sliver gets absorbed into the next segment.
            nudge *= 4.0
            continue
        if store:
            seg_leaf[base + n] = node
            seg_t[base + n] = t
            seg_delta[base + n] = tex - t
        n += 1
        t = tex
        nudge = nudge0
    return n


@njit(cache=True, parallel=True)
def count_segments_kernel(child, leaf, center, depth, half_tab,
                          origins, dirs, t_near, t_far, counts):
    dummy_i = np.empty(0, dtype=np.int64)
    dummy_f = np.empty(0, dtype=np.float64)
    for r in prange(origins.shape[0]):
        counts[r] = _trace_ray(child, leaf, center, depth, half_tab,
                               origins[r, 0], origins[r, 1], origins[r, 2],
                               dirs[r, 0], dirs[r, 1], dirs[r, 2],
                               t_near, t_far, dummy_i, dummy_f, dummy_f, 0, False)


@njit(cache=True, parallel=True)
def fill_segments_kernel(child, leaf, center, depth, half_tab,
                         origins, dirs, t_near, t_far, offsets,
                         seg_leaf, seg_t, seg_delta):
    for r in prange(origins.shape[0]):
        _trace_ray(child, leaf, center, depth, half_tab,
                   origins[r, 0], origins[r, 1], origins[r, 2],
                   dirs[r, 0], dirs[r, 1], dirs[r, 2],
                   t_near, t_far, seg_leaf, seg_t, seg_delta,
                   offsets[r], True)


@njit(cache=True, parallel=True)
def composite_kernel(sigma, sh, basis_count, degree, dirs, offsets,
                     seg_leaf, seg_delta, bg, eps_t,
                     rgb_out, tfin_out, wsum_out):
    for r in prange(dirs.shape[0]):
        basis = np.empty(basis_count, dtype=np.float64)
        _eval_basis(degree, dirs[r, 0], dirs[r, 1], dirs[r, 2], basis)
        trans = 1.0
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        wsum = 0.0
        for s in range(offsets[r], offsets[r + 1]):
            node = seg_leaf[s]
            sg = np.float64(sigma[node])
            a = np.exp(-sg * seg_delta[s])
            q = 1.0 - a
            if q > 0.0:
                e0 = 0.0
                e1 = 0.0
                e2 = 0.0
                for b in range(basis_count):
                    bb = basis[b]
                    e0 += np.float64(sh[node, b]) * bb
                    e1 += np.float64(sh[node, basis_count + b]) * bb
                    e2 += np.float64(sh[node, 2 * basis_count + b]) * bb
                tq = trans * q
                c0 += tq * _sigmoid(e0)
                c1 += tq * _sigmoid(e1)
                c2 += tq * _sigmoid(e2)
                wsum += tq
            trans *= a
            if eps_t > 0.0 and trans < eps_t:
                break
        wsum += trans
        rgb_out[r, 0] = c0 + trans * bg[0]
        rgb_out[r, 1] = c1 + trans * bg[1]
        rgb_out[r, 2] = c2 + trans * bg[2]
        tfin_out[r] = trans
        wsum_out[r] = wsum


@njit(cache=True, parallel=True)
def grad_kernel(sigma, sh, basis_count, degree, dirs, targets, offsets,
                seg_leaf, seg_delta, bg, eps_t, grad_scale,
                seg_q, seg_dsig, seg_w, seg_trans, seg_col, basis_out,
                rgb_out, tfin_out, wsum_out, loss_out):
    for r in prange(dirs.shape[0]):
        lo = offsets[r]
        hi = offsets[r + 1]
        basis = basis_out[r]
        _eval_basis(degree, dirs[r, 0], dirs[r, 1], dirs[r, 2], basis)

        trans = 1.0
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        wsum = 0.0
        used = hi - lo
        for i in range(hi - lo):
            s = lo + i
            node = seg_leaf[s]
            sg = np.float64(sigma[node])
            a = np.exp(-sg * seg_delta[s])
            q = 1.0 - a
            e0 = 0.0
            e1 = 0.0
            e2 = 0.0
            for b in range(basis_count):
                bb = basis[b]
                e0 += np.float64(sh[node, b]) * bb
                e1 += np.float64(sh[node, basis_count + b]) * bb
                e2 += np.float64(sh[node, 2 * basis_count + b]) * bb
            col0 = _sigmoid(e0)
            col1 = _sigmoid(e1)
            col2 = _sigmoid(e2)
            seg_trans[s] = trans
            seg_q[s] = q
            seg_col[s, 0] = col0
            seg_col[s, 1] = col1
            seg_col[s, 2] = col2
            tq = trans * q
            c0 += tq * col0
            c1 += tq * col1
            c2 += tq * col2
            wsum += tq
            trans *= a
            if eps_t > 0.0 and trans < eps_t:
                used = i + 1
                break
        # Segments after an early cut contribute nothing anywhere.
        for i in range(used, hi - lo):
            s = lo + i
            seg_q[s] = 0.0
            seg_dsig[s] = 0.0
            seg_w[s, 0] = 0.0
            seg_w[s, 1] = 0.0
            seg_w[s, 2] = 0.0
        tfin = trans
        wsum += tfin
        c0 += tfin * bg[0]
        c1 += tfin * bg[1]
        c2 += tfin * bg[2]
        rgb_out[r, 0] = c0
        rgb_out[r, 1] = c1
        rgb_out[r, 2] = c2
        tfin_out[r] = tfin
        wsum_out[r] = wsum

        r0 = c0 - targets[r, 0]
        r1 = c1 - targets[r, 1]
        r2 = c2 - targets[r, 2]
        loss_out[r] = r0 * r0 + r1 * r1 + r2 * r2
        g0 = grad_scale * r0
        g1 = grad_scale * r1
        g2 = grad_scale * r2

        # Reverse sweep with a suffix accumulator of downstream contribution.
        suf0 = tfin * bg[0]
        suf1 = tfin * bg[1]
        suf2 = tfin * bg[2]
        for i in range(used - 1, -1, -1):
            s = lo + i
            ti = seg_trans[s]
            q = seg_q[s]
            a = 1.0 - q
            col0 = seg_col[s, 0]
            col1 = seg_col[s, 1]
            col2 = seg_col[s, 2]
            tnext = ti * a
            seg_dsig[s] = seg_delta[s] * (g0 * (tnext * col0 - suf0)
                                          + g1 * (tnext * col1 - suf1)
                                          + g2 * (tnext * col2 - suf2))
            tq = ti * q
            suf0 += tq * col0
            suf1 += tq * col1
            suf2 += tq * col2
            seg_w[s, 0] = g0 * tq * col0 * (1.0 - col0)
            seg_w[s, 1] = g1 * tq * col1 * (1.0 - col1)
            seg_w[s, 2] = g2 * tq * col2 * (1.0 - col2)


@njit(cache=True)
def scatter_kernel(offsets, seg_leaf, seg_q, seg_dsig, seg_w, basis_out,
                   basis_count, grad_sigma, grad_sh, signal, touched):
    """Serial per-leaf reduction in fixed global segment order."""
    n_rays = offsets.shape[0] - 1
    for r in range(n_rays):
        for s in range(offsets[r], offsets[r + 1]):
            node = seg_leaf[s]
            touched[node] = 1
            grad_sigma[node] += seg_dsig[s]
            signal[node] += seg_q[s]
            w0 = seg_w[s, 0]
            w1 = seg_w[s, 1]
            w2 = seg_w[s, 2]
            if w0 != 0.0 or w1 != 0.0 or w2 != 0.0:
                for b in range(basis_count):
                    bb = basis_out[r, b]
                    grad_sh[node, b] += w0 * bb
                    grad_sh[node, basis_count + b] += w1 * bb
                    grad_sh[node, 2 * basis_count + b] += w2 * bb


@njit(cache=True, parallel=True)
def grid_render_kernel(grid_sigma, grid_rgb, center, half,
                       origins, dirs, bg, eps_t, rgb_out):
    """Composite rays through a dense res**3 voxel grid (toy targets)."""
    res = grid_sigma.shape[0]
    cell = 2.0 * half / res
    nudge0 = half * NUDGE_REL
    lox = center[0] - half
    loy = center[1] - half
    loz = center[2] - half
    for r in prange(origins.shape[0]):
        ox = origins[r, 0]
        oy = origins[r, 1]
        oz = origins[r, 2]
        dx = dirs[r, 0]
        dy = dirs[r, 1]
        dz = dirs[r, 2]
        t0 = 0.0
        t1 = np.inf
        miss = False
        for axis in range(3):
            if axis == 0:
                o, d, lo = ox, dx, lox
            elif axis == 1:
                o, d, lo = oy, dy, loy
            else:
                o, d, lo = oz, dz, loz
            hi = lo + 2.0 * half
            if d != 0.0:
                ta = (lo - o) / d
                tb = (hi - o) / d
                if ta > tb:
                    ta, tb = tb, ta
                if ta > t0:
                    t0 = ta
                if tb < t1:
                    t1 = tb
            elif o < lo or o >= hi:
                miss = True
        trans = 1.0
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        if not miss and t1 > t0:
            nudge = nudge0
            t = t0
            while True:
                probe = t + nudge
                if probe >= t1:
                    break
                ix = int(np.floor((ox + probe * dx - lox) / cell))
                iy = int(np.floor((oy + probe * dy - loy) / cell))
                iz = int(np.floor((oz + probe * dz - loz) / cell))
                if ix < 0:
                    ix = 0
                elif ix >= res:
                    ix = res - 1
                if iy < 0:
                    iy = 0
                elif iy >= res:
                    iy = res - 1
                if iz < 0:
                    iz = 0
                elif iz >= res:
                    iz = res - 1
                tex = t1
                if dx > 0.0:
                    cand = (lox + (ix + 1) * cell - ox) / dx
                    if cand < tex:
                        tex = cand
                elif dx < 0.0:
                    cand = (lox + ix * cell - ox) / dx
                    if cand < tex:
                        tex = cand
                if dy > 0.0:
                    cand = (loy + (iy + 1) * cell - oy) / dy
                    if cand < tex:
                        tex = cand
                elif dy < 0.0:
                    cand = (loy + iy * cell - oy) / dy
                    if cand < tex:
                        tex = cand
                if dz > 0.0:
                    cand = (loz + (iz + 1) * cell - oz) / dz
                    if cand < tex:
                        tex = cand
                elif dz < 0.0:
                    cand = (loz + iz * cell - oz) / dz
                    if cand < tex:
                        tex = cand
                if tex <= probe:
                    nudge *= 4.0
                    continue
                sg = np.float64(grid_sigma[ix, iy, iz])
                a = np.exp(-sg * (tex - t))
                q = 1.0 - a
                if q > 0.0:
                    tq = trans * q
                    c0 += tq * np.float64(grid_rgb[ix, iy, iz, 0])
                    c1 += tq * np.float64(grid_rgb[ix, iy, iz, 1])
                    c2 += tq * np.float64(grid_rgb[ix, iy, iz, 2])
                trans *= a
                if eps_t > 0.0 and trans < eps_t:
                    break
                t = tex
                nudge = nudge0
        rgb_out[r, 0] = c0 + trans * bg[0]
        rgb_out[r, 1] = c1 + trans * bg[1]
        rgb_out[r, 2] = c2 + trans * bg[2]
