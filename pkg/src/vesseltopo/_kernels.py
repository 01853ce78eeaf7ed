"""Numba kernels for the exact distance transform and the eikonal solver.

Everything here works on flat float64 arrays with x-fastest indexing
(flat = x + nx*(y + ny*z)) so the kernels stay allocation-light. Python
wrappers in volume.py / msfm.py own validation and unit handling.
"""

import numpy as np
from numba import njit

# Sentinel larger than any squared distance a real volume can produce.
_BIG = 1e30


# ---------------------------------------------------------------------------
# exact squared Euclidean distance transform (lower-envelope of parabolas)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _envelope_1d(f, n, w, v, z, out):
    # 1D transform: out[q] = min_p f[p] + w*(q-p)^2, exact for finite f.
    # z boundaries must be true infinities: intersections between real and
    # sentinel parabolas reach +-_BIG / (2w), beyond any finite sentinel.
    k = 0
    v[0] = 0
    z[0] = -np.inf
    z[1] = np.inf
    for q in range(1, n):
        fq = f[q] + w * q * q
        while True:
            p = v[k]
            s = (fq - (f[p] + w * p * p)) / (2.0 * w * (q - p))
            if s <= z[k]:
                k -= 1
            else:
                break
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        p = v[k]
        out[q] = f[p] + w * (q - p) * (q - p)


@njit(cache=True)
def edt_squared(mask, wx, wy, wz):
    """Exact squared EDT of a binary mask, per-axis weights = spacing^2."""
    nx, ny, nz = mask.shape
    g = np.empty((nx, ny, nz), np.float64)
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                g[x, y, z] = _BIG if mask[x, y, z] != 0 else 0.0

    nmax = max(nx, max(ny, nz))
    f = np.empty(nmax, np.float64)
    o = np.empty(nmax, np.float64)
    v = np.empty(nmax, np.int64)
    zb = np.empty(nmax + 1, np.float64)

    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                f[x] = g[x, y, z]
            _envelope_1d(f, nx, wx, v, zb, o)
            for x in range(nx):
                g[x, y, z] = o[x]
    for z in range(nz):
        for x in range(nx):
            for y in range(ny):
                f[y] = g[x, y, z]
            _envelope_1d(f, ny, wy, v, zb, o)
            for y in range(ny):
                g[x, y, z] = o[y]
    for y in range(ny):
        for x in range(nx):
            for z in range(nz):
                f[z] = g[x, y, z]
            _envelope_1d(f, nz, wz, v, zb, o)
            for z in range(nz):
                g[x, y, z] = o[z]
    return g


# ---------------------------------------------------------------------------
# eikonal solver (fast marching, optional multi-stencil + second order)
# ---------------------------------------------------------------------------

@njit(cache=True)
def seed_init(F, nx, ny, nz, seeds, sx, sy, sz, radius_mm):
    """Analytic arrival times near seeds (constant local speed), restricted
    to voxels with a straight line of sight through positive speed, so the
    initialization can never shortcut across unreachable regions. The ball
    radius is physical (mm) so refining the grid keeps the boundary data
    region fixed."""
    n = F.size
    tinit = np.full(n, np.inf, np.float64)
    rx = int(np.floor(radius_mm / sx))
    ry = int(np.floor(radius_mm / sy))
    rz = int(np.floor(radius_mm / sz))
    r2 = radius_mm * radius_mm
    for i in range(seeds.shape[0]):
        px = seeds[i, 0]
        py = seeds[i, 1]
        pz = seeds[i, 2]
        fs = F[px + nx * (py + ny * pz)]
        for ox in range(-rx, rx + 1):
            for oy in range(-ry, ry + 1):
                for oz in range(-rz, rz + 1):
                    if (ox * sx) ** 2 + (oy * sy) ** 2 + (oz * sz) ** 2 > r2:
                        continue
                    vx = px + ox
                    vy = py + oy
                    vz = pz + oz
                    if not (0 <= vx < nx and 0 <= vy < ny and 0 <= vz < nz):
                        continue
                    fv = vx + nx * (vy + ny * vz)
                    if F[fv] <= 0.0:
                        continue
                    steps = 2 * max(abs(ox), max(abs(oy), abs(oz)))
                    visible = True
                    for t in range(1, steps):
                        qx = px + int(round(ox * t / steps))
                        qy = py + int(round(oy * t / steps))
                        qz = pz + int(round(oz * t / steps))
                        if F[qx + nx * (qy + ny * qz)] <= 0.0:
                            visible = False
                            break
                    if not visible:
                        continue
                    d = np.sqrt((ox * sx) ** 2 + (oy * sy) ** 2 + (oz * sz) ** 2)
                    val = d / fs
                    if val < tinit[fv]:
                        tinit[fv] = val
    cnt = 0
    for j in range(n):
        if np.isfinite(tinit[j]):
            cnt += 1
    idx = np.empty(cnt, np.int64)
    vals = np.empty(cnt, np.float64)
    k = 0
    for j in range(n):
        if np.isfinite(tinit[j]):
            idx[k] = j
            vals[k] = tinit[j]
            k += 1
    return idx, vals

@njit(cache=True)
def _heap_push(keys, idxs, size, key, idx):
    i = size
    keys[i] = key
    idxs[i] = idx
    while i > 0:
        p = (i - 1) >> 1
        if keys[p] <= keys[i]:
            break
        keys[p], keys[i] = keys[i], keys[p]
        idxs[p], idxs[i] = idxs[i], idxs[p]
        i = p
    return size + 1


@njit(cache=True)
def _heap_pop(keys, idxs, size):
    key = keys[0]
    idx = idxs[0]
    size -= 1
    keys[0] = keys[size]
    idxs[0] = idxs[size]
    i = 0
    while True:
        l = 2 * i + 1
        r = l + 1
        m = i
        if l < size and keys[l] < keys[m]:
            m = l
        if r < size and keys[r] < keys[m]:
            m = r
        if m == i:
            break
        keys[m], keys[i] = keys[i], keys[m]
        idxs[m], idxs[i] = idxs[i], idxs[m]
        i = m
    return key, idx, size


@njit(cache=True)
def _trial(T, acc, F, nx, ny, nz, node, dirs, hs, sidx, units, second, gate2):
    """Upwind trial value at `node` using only accepted neighbors.

    Pure function of (T restricted to accepted, acc): the solver calls it
    live and the causality replay calls it again with the frozen order.

    Per stencil the directional derivatives p_k = al[k]*T - be[k] along the
    signed physical unit directions v_k satisfy p' G^-1 p = 1/F^2 with
    G_ij = v_i . v_j, so diagonal stencils stay consistent under anisotropic
    spacing and mixed upwind sides. The solution must be causal (>= every
    upwind value used), have non-negative derivatives along the used
    directions, and reconstruct a gradient inside the stencil sector
    (non-negative simplex weights); otherwise directions are demoted to
    first order and then dropped. A stencil with a single active direction
    uses first order only, and second order also requires the discrete
    upwind slope (T1 - T2) * F / h to stay close to 1 (gate2): both guards
    reject one-sided parabola extrapolation along directions that are not
    near the characteristic, where it undershoots and the min-combination
    would propagate the error.
    """
    fx = node % nx
    rem = node // nx
    fy = rem % ny
    fz = rem // ny
    inv_f = 1.0 / F[node]
    n_st = sidx.shape[0]
    best = np.inf

    al = np.empty(3, np.float64)
    be = np.empty(3, np.float64)
    up = np.empty(3, np.float64)
    h3 = np.empty(3, np.float64)
    sg3 = np.empty(3, np.float64)
    so = np.empty(3, np.uint8)  # 1 if the slot currently uses 2nd order
    use = np.empty(3, np.uint8)
    g = np.empty((3, 3), np.float64)
    m = np.empty((3, 3), np.float64)
    p = np.empty(3, np.float64)
    w = np.empty(3, np.float64)
    kk = np.empty(3, np.int64)

    for s in range(n_st):
        nd = 0
        for k in range(3):
            use[k] = 0
            so[k] = 0
            d = sidx[s, k]
            dx = dirs[d, 0]
            dy = dirs[d, 1]
            dz = dirs[d, 2]
            h = hs[d]
            t1 = np.inf
            sgn = 0
            for sg in (-1, 1):
                x1 = fx + sg * dx
                y1 = fy + sg * dy
                z1 = fz + sg * dz
                if 0 <= x1 < nx and 0 <= y1 < ny and 0 <= z1 < nz:
                    f1 = x1 + nx * (y1 + ny * z1)
                    if acc[f1] == 2 and T[f1] < t1:
                        t1 = T[f1]
                        sgn = sg
            if not np.isfinite(t1):
                continue
            order2 = False
            if second:
                x2 = fx + 2 * sgn * dx
                y2 = fy + 2 * sgn * dy
                z2 = fz + 2 * sgn * dz
                if 0 <= x2 < nx and 0 <= y2 < ny and 0 <= z2 < nz:
                    f2 = x2 + nx * (y2 + ny * z2)
                    if acc[f2] == 2 and T[f2] < t1 and (t1 - T[f2]) * F[node] >= gate2 * h:
                        t2 = T[f2]
                        al[k] = 1.5 / h
                        be[k] = (4.0 * t1 - t2) / (2.0 * h)
                        order2 = True
            if not order2:
                al[k] = 1.0 / h
                be[k] = t1 / h
            up[k] = t1
            h3[k] = h
            # derivative is taken along the direction pointing away from the
            # upwind neighbor, so the effective unit vector flips with sgn
            sg3[k] = -float(sgn)
            so[k] = 1 if order2 else 0
            use[k] = 1
            nd += 1
        if nd == 0:
            continue
        if nd == 1:
            for k in range(3):
                if use[k] == 1 and so[k] == 1:
                    so[k] = 0
                    al[k] = 1.0 / h3[k]
                    be[k] = up[k] / h3[k]

        # Solve the quadratic with fallbacks: demote to first order, then
        # drop the direction with the largest upwind value.
        while True:
            nuse = 0
            tmax = 0.0
            for k in range(3):
                if use[k] == 1:
                    kk[nuse] = k
                    nuse += 1
                    if up[k] > tmax:
                        tmax = up[k]
            if nuse == 0:
                break
            if nuse == 1:
                k = kk[0]
                t_one = up[k] + h3[k] * inv_f
                if t_one < best:
                    best = t_one
                break

            # signed Gram matrix of the active unit directions and inverse
            for i in range(nuse):
                ki = kk[i]
                for j in range(nuse):
                    kj = kk[j]
                    dot = (units[s, ki, 0] * units[s, kj, 0]
                           + units[s, ki, 1] * units[s, kj, 1]
                           + units[s, ki, 2] * units[s, kj, 2])
                    g[i, j] = sg3[ki] * sg3[kj] * dot
            ok = True
            if nuse == 2:
                det = g[0, 0] * g[1, 1] - g[0, 1] * g[1, 0]
                if abs(det) < 1e-12:
                    ok = False
                else:
                    m[0, 0] = g[1, 1] / det
                    m[1, 1] = g[0, 0] / det
                    m[0, 1] = -g[0, 1] / det
                    m[1, 0] = m[0, 1]
            else:
                c00 = g[1, 1] * g[2, 2] - g[1, 2] * g[2, 1]
                c01 = g[1, 2] * g[2, 0] - g[1, 0] * g[2, 2]
                c02 = g[1, 0] * g[2, 1] - g[1, 1] * g[2, 0]
                det = g[0, 0] * c00 + g[0, 1] * c01 + g[0, 2] * c02
                if abs(det) < 1e-12:
                    ok = False
                else:
                    m[0, 0] = c00 / det
                    m[0, 1] = c01 / det
                    m[0, 2] = c02 / det
                    m[1, 0] = c01 / det
                    m[1, 1] = (g[0, 0] * g[2, 2] - g[0, 2] * g[2, 0]) / det
                    m[1, 2] = (g[0, 2] * g[1, 0] - g[0, 0] * g[1, 2]) / det
                    m[2, 0] = c02 / det
                    m[2, 1] = m[1, 2]
                    m[2, 2] = (g[0, 0] * g[1, 1] - g[0, 1] * g[1, 0]) / det

            t_st = np.inf
            if ok:
                a = 0.0
                b = 0.0
                c = -inv_f * inv_f
                for i in range(nuse):
                    ki = kk[i]
                    for j in range(nuse):
                        kj = kk[j]
                        a += m[i, j] * al[ki] * al[kj]
                        b += 0.5 * m[i, j] * (al[ki] * be[kj] + al[kj] * be[ki])
                        c += m[i, j] * be[ki] * be[kj]
                if a > 0.0:
                    disc = b * b - a * c
                    if disc >= 0.0:
                        t_cand = (b + np.sqrt(disc)) / a
                        if t_cand + 1e-12 >= tmax:
                            # upwind admissibility: non-negative directional
                            # derivatives and simplex weights
                            admissible = True
                            for i in range(nuse):
                                p[i] = al[kk[i]] * t_cand - be[kk[i]]
                                if p[i] < -1e-9:
                                    admissible = False
                            if admissible:
                                for i in range(nuse):
                                    wi = 0.0
                                    for j in range(nuse):
                                        wi += m[i, j] * p[j]
                                    w[i] = wi
                                    if wi < -1e-9:
                                        admissible = False
                            if admissible:
                                t_st = t_cand
            if np.isfinite(t_st):
                if t_st < best:
                    best = t_st
                break
            demoted = False
            for k in range(3):
                if use[k] == 1 and so[k] == 1:
                    so[k] = 0
                    al[k] = 1.0 / h3[k]
                    be[k] = up[k] / h3[k]
                    demoted = True
            if demoted:
                continue
            kdrop = -1
            tdrop = -1.0
            for k in range(3):
                if use[k] == 1 and up[k] > tdrop:
                    tdrop = up[k]
                    kdrop = k
            use[kdrop] = 0
    return best


@njit(cache=True)
def eikonal_solve(F, nx, ny, nz, fixed_idx, fixed_val, is_fixed,
                  dirs, hs, sidx, units, second, gate2):
    """Fast marching over flat speed array F (zero speed = unreachable).

    fixed_idx/fixed_val carry boundary data: the seeds (value 0) plus any
    analytically initialized near-seed voxels; their values are never
    recomputed. Returns (T, order, count): float64 arrival times (inf where
    unreached) and the acceptance order. A popped free node is re-evaluated
    against the current accepted set before acceptance, so T[node] is always
    the exact upwind solution given every earlier-accepted node.
    """
    n = F.size
    T = np.full(n, np.inf, np.float64)
    acc = np.zeros(n, np.uint8)
    trial = np.full(n, np.inf, np.float64)
    order = np.empty(n, np.int64)
    count = 0

    ndir = dirs.shape[0]
    cap = 64 + 4 * n
    keys = np.empty(cap, np.float64)
    idxs = np.empty(cap, np.int64)
    size = 0

    for i in range(fixed_idx.size):
        s = fixed_idx[i]
        T[s] = fixed_val[i]
        trial[s] = fixed_val[i]
        size = _heap_push(keys, idxs, size, fixed_val[i], s)

    while size > 0:
        key, node, size = _heap_pop(keys, idxs, size)
        if acc[node] == 2:
            continue
        if is_fixed[node] == 1:
            v = T[node]
        else:
            v = _trial(T, acc, F, nx, ny, nz, node, dirs, hs, sidx, units, second, gate2)
            if v > key + 1e-12:
                if np.isfinite(v):
                    trial[node] = v
                    if size == cap:
                        keys, idxs, cap = _heap_grow(keys, idxs, cap)
                    size = _heap_push(keys, idxs, size, v, node)
                continue
        acc[node] = 2
        T[node] = v
        order[count] = node
        count += 1

        fx = node % nx
        rem = node // nx
        fy = rem % ny
        fz = rem // ny
        # update the 1-step ring (new upwind values) and the 2-step ring
        # (acceptance here may enable second-order differences there); fresh
        # heap keys everywhere keep the acceptance sequence monotone
        for d in range(ndir):
            for sg in (-2, -1, 1, 2):
                x1 = fx + sg * dirs[d, 0]
                y1 = fy + sg * dirs[d, 1]
                z1 = fz + sg * dirs[d, 2]
                if 0 <= x1 < nx and 0 <= y1 < ny and 0 <= z1 < nz:
                    m = x1 + nx * (y1 + ny * z1)
                    # fixed nodes carry boundary data: re-pushing them at
                    # marched keys would accept them out of heap order
                    if acc[m] != 2 and is_fixed[m] == 0 and F[m] > 0.0:
                        t = _trial(T, acc, F, nx, ny, nz, m, dirs, hs, sidx, units, second, gate2)
                        if np.isfinite(t) and t < trial[m]:
                            trial[m] = t
                            if size == cap:
                                keys, idxs, cap = _heap_grow(keys, idxs, cap)
                            size = _heap_push(keys, idxs, size, t, m)
    return T, order, count


@njit(cache=True)
def _heap_grow(keys, idxs, cap):
    new_cap = cap * 2
    nk = np.empty(new_cap, np.float64)
    ni = np.empty(new_cap, np.int64)
    nk[:cap] = keys
    ni[:cap] = idxs
    return nk, ni, new_cap


@njit(cache=True)
def eikonal_replay(T, order, count, is_seed, F, nx, ny, nz, dirs, hs, sidx, units, second, gate2):
    """Recompute every accepted value with the acceptance order frozen.

    Returns the max |recomputed - stored| over non-seed nodes; 0 means the
    solve was perfectly causal.
    """
    acc = np.zeros(T.size, np.uint8)
    worst = 0.0
    for i in range(count):
        node = order[i]
        if is_seed[node] == 0:
            v = _trial(T, acc, F, nx, ny, nz, node, dirs, hs, sidx, units, second, gate2)
            d = abs(v - T[node])
            if d > worst:
                worst = d
        acc[node] = 2
    return worst
