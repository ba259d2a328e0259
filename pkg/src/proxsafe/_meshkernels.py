"""Compiled kernels for triangle-mesh distance queries.

Everything here works on plain float64/int64 arrays so numba can compile it
in nopython mode. The public wrappers live in :mod:`proxsafe.geometry`.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit, prange

LEAF_SIZE = 4
N_BINS = 16


@njit(cache=True, inline="always")
def closest_point_on_triangle(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz):
    """Closest point on triangle abc to p by Voronoi-region classification."""
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return ax, ay, az
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bx, by, bz
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return ax + v * abx, ay + v * aby, az + v * abz
    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cx, cy, cz
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return ax + w * acx, ay + w * acy, az + w * acz
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return bx + w * (cx - bx), by + w * (cy - by), bz + w * (cz - bz)
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return (ax + abx * v + acx * w, ay + aby * v + acy * w, az + abz * v + acz * w)


@njit(cache=True)
def _tri_point_sqdist(tris, t, px, py, pz):
    qx, qy, qz = closest_point_on_triangle(
        px, py, pz,
        tris[t, 0, 0], tris[t, 0, 1], tris[t, 0, 2],
        tris[t, 1, 0], tris[t, 1, 1], tris[t, 1, 2],
        tris[t, 2, 0], tris[t, 2, 1], tris[t, 2, 2],
    )
    dx, dy, dz = px - qx, py - qy, pz - qz
    return dx * dx + dy * dy + dz * dz, qx, qy, qz


@njit(cache=True)
def _box_area(mn, mx):
    ex = mx[0] - mn[0]
    ey = mx[1] - mn[1]
    ez = mx[2] - mn[2]
    if ex < 0.0 or ey < 0.0 or ez < 0.0:
        return 0.0
    return 2.0 * (ex * ey + ey * ez + ez * ex)


@njit(cache=True)
def build_bvh(tris):
    """Binned surface-area-heuristic BVH over triangles ``tris`` (T, 3, 3).

    Returns node arrays (bmin, bmax, left, right, start, count, n_nodes) and
    the triangle permutation ``order``; leaves reference ``order[start:start+count]``.
    """
    n_tri = tris.shape[0]
    max_nodes = 2 * n_tri + 1
    bmin = np.empty((max_nodes, 3))
    bmax = np.empty((max_nodes, 3))
    left = -np.ones(max_nodes, dtype=np.int64)
    right = -np.ones(max_nodes, dtype=np.int64)
    start = np.zeros(max_nodes, dtype=np.int64)
    count = np.zeros(max_nodes, dtype=np.int64)
    order = np.arange(n_tri)

    tmin = np.empty((n_tri, 3))
    tmax = np.empty((n_tri, 3))
    cent = np.empty((n_tri, 3))
    for t in range(n_tri):
        for k in range(3):
            lo = min(tris[t, 0, k], tris[t, 1, k], tris[t, 2, k])
            hi = max(tris[t, 0, k], tris[t, 1, k], tris[t, 2, k])
            tmin[t, k] = lo
            tmax[t, k] = hi
            cent[t, k] = (tris[t, 0, k] + tris[t, 1, k] + tris[t, 2, k]) / 3.0

    stack = np.empty(max_nodes, dtype=np.int64)
    sp = 0
    n_nodes = 1
    start[0] = 0
    count[0] = n_tri
    stack[sp] = 0
    sp += 1

    bin_min = np.empty((N_BINS, 3))
    bin_max = np.empty((N_BINS, 3))
    bin_cnt = np.zeros(N_BINS, dtype=np.int64)
    acc_min = np.empty(3)
    acc_max = np.empty(3)
    right_area = np.empty(N_BINS)
    right_cnt = np.empty(N_BINS, dtype=np.int64)

    while sp > 0:
        sp -= 1
        node = stack[sp]
        s = start[node]
        c = count[node]
        cmin = np.full(3, np.inf)
        cmax = np.full(3, -np.inf)
        for k in range(3):
            bmin[node, k] = np.inf
            bmax[node, k] = -np.inf
        for i in range(s, s + c):
            t = order[i]
            for k in range(3):
                bmin[node, k] = min(bmin[node, k], tmin[t, k])
                bmax[node, k] = max(bmax[node, k], tmax[t, k])
                cmin[k] = min(cmin[k], cent[t, k])
                cmax[k] = max(cmax[k], cent[t, k])
        if c <= LEAF_SIZE:
            continue

        best_cost = np.inf
        best_axis = -1
        best_split = -1
        for axis in range(3):
            extent = cmax[axis] - cmin[axis]
            if extent <= 0.0:
                continue
            for b in range(N_BINS):
                bin_cnt[b] = 0
                for k in range(3):
                    bin_min[b, k] = np.inf
                    bin_max[b, k] = -np.inf
            scale = N_BINS / extent
            for i in range(s, s + c):
                t = order[i]
                b = int((cent[t, axis] - cmin[axis]) * scale)
                if b >= N_BINS:
                    b = N_BINS - 1
                bin_cnt[b] += 1
                for k in range(3):
                    bin_min[b, k] = min(bin_min[b, k], tmin[t, k])
                    bin_max[b, k] = max(bin_max[b, k], tmax[t, k])
            # sweep from the right
            for k in range(3):
                acc_min[k] = np.inf
                acc_max[k] = -np.inf
            n_acc = 0
            for b in range(N_BINS - 1, 0, -1):
                n_acc += bin_cnt[b]
                for k in range(3):
                    acc_min[k] = min(acc_min[k], bin_min[b, k])
                    acc_max[k] = max(acc_max[k], bin_max[b, k])
                right_area[b] = _box_area(acc_min, acc_max)
                right_cnt[b] = n_acc
            for k in range(3):
                acc_min[k] = np.inf
                acc_max[k] = -np.inf
            n_acc = 0
            for b in range(N_BINS - 1):
                n_acc += bin_cnt[b]
                for k in range(3):
                    acc_min[k] = min(acc_min[k], bin_min[b, k])
                    acc_max[k] = max(acc_max[k], bin_max[b, k])
                if n_acc == 0 or right_cnt[b + 1] == 0:
                    continue
                cost = n_acc * _box_area(acc_min, acc_max) + right_cnt[b + 1] * right_area[b + 1]
                if cost < best_cost:
                    best_cost = cost
                    best_axis = axis
                    best_split = b

        if best_axis < 0:
            # all centroids coincide: split the index range in half
            mid = s + c // 2
        else:
            extent = cmax[best_axis] - cmin[best_axis]
            scale = N_BINS / extent
            i = s
            j = s + c - 1
            while i <= j:
                t = order[i]
                b = int((cent[t, best_axis] - cmin[best_axis]) * scale)
                if b >= N_BINS:
                    b = N_BINS - 1
                if b <= best_split:
                    i += 1
                else:
                    order[i] = order[j]
                    order[j] = t
                    j -= 1
            mid = i
            if mid == s or mid == s + c:
                mid = s + c // 2

        lnode = n_nodes
        rnode = n_nodes + 1
        n_nodes += 2
        left[node] = lnode
        right[node] = rnode
        start[lnode] = s
        count[lnode] = mid - s
        start[rnode] = mid
        count[rnode] = s + c - mid
        count[node] = 0
        stack[sp] = lnode
        sp += 1
        stack[sp] = rnode
        sp += 1

    return bmin, bmax, left, right, start, count, order, n_nodes


@njit(cache=True, inline="always")
def _box_sqdist(bmin, bmax, node, px, py, pz):
    d = 0.0
    v = bmin[node, 0] - px
    if v > 0.0:
        d += v * v
    v = px - bmax[node, 0]
    if v > 0.0:
        d += v * v
    v = bmin[node, 1] - py
    if v > 0.0:
        d += v * v
    v = py - bmax[node, 1]
    if v > 0.0:
        d += v * v
    v = bmin[node, 2] - pz
    if v > 0.0:
        d += v * v
    v = pz - bmax[node, 2]
    if v > 0.0:
        d += v * v
    return d


@njit(cache=True)
def _closest_one(tris, bmin, bmax, left, right, start, count, order, px, py, pz, stack):
    best = np.inf
    bq0 = bq1 = bq2 = 0.0
    btri = -1
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if _box_sqdist(bmin, bmax, node, px, py, pz) >= best:
            continue
        if left[node] < 0:
            s = start[node]
            for i in range(s, s + count[node]):
                t = order[i]
                d2, qx, qy, qz = _tri_point_sqdist(tris, t, px, py, pz)
                if d2 < best:
                    best = d2
                    bq0, bq1, bq2 = qx, qy, qz
                    btri = t
            continue
        l = left[node]
        r = right[node]
        dl = _box_sqdist(bmin, bmax, l, px, py, pz)
        dr = _box_sqdist(bmin, bmax, r, px, py, pz)
        # push the farther child first so the nearer one is popped next
        if dl < dr:
            if dr < best:
                stack[sp] = r
                sp += 1
            if dl < best:
                stack[sp] = l
                sp += 1
        else:
            if dl < best:
                stack[sp] = l
                sp += 1
            if dr < best:
                stack[sp] = r
                sp += 1
    return math.sqrt(best), bq0, bq1, bq2, btri


@njit(cache=True, parallel=True)
def bvh_closest(tris, bmin, bmax, left, right, start, count, order, points):
    n = points.shape[0]
    dist = np.empty(n)
    closest = np.empty((n, 3))
    tri = np.empty(n, dtype=np.int64)
    depth = bmin.shape[0] + 1
    for i in prange(n):
        stack = np.empty(depth, dtype=np.int64)
        d, qx, qy, qz, t = _closest_one(
            tris, bmin, bmax, left, right, start, count, order,
            points[i, 0], points[i, 1], points[i, 2], stack,
        )
        dist[i] = d
        closest[i, 0] = qx
        closest[i, 1] = qy
        closest[i, 2] = qz
        tri[i] = t
    return dist, closest, tri


@njit(cache=True, parallel=True)
def bvh_competing_feature(tris, bmin, bmax, left, right, start, count, order,
                          points, dist, closest, band, min_turn):
    """Flag points whose closest feature is not unique.

    A point is ambiguous when some triangle lies within ``band`` of the best
    distance while its closest point is seen from ``p`` in a direction that
    differs from the best one by more than ``min_turn`` (unit-vector distance).
    """
    n = points.shape[0]
    flags = np.zeros(n, dtype=np.bool_)
    depth = bmin.shape[0] + 1
    for i in prange(n):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        d0 = dist[i]
        if d0 <= 0.0:
            continue
        ux = (px - closest[i, 0]) / d0
        uy = (py - closest[i, 1]) / d0
        uz = (pz - closest[i, 2]) / d0
        lim = (d0 + band) * (d0 + band)
        stack = np.empty(depth, dtype=np.int64)
        sp = 0
        stack[sp] = 0
        sp += 1
        found = False
        while sp > 0 and not found:
            sp -= 1
            node = stack[sp]
            if _box_sqdist(bmin, bmax, node, px, py, pz) > lim:
                continue
            if left[node] < 0:
                s = start[node]
                for k in range(s, s + count[node]):
                    t = order[k]
                    d2, qx, qy, qz = _tri_point_sqdist(tris, t, px, py, pz)
                    if d2 > lim:
                        continue
                    dd = math.sqrt(d2)
                    if dd <= 0.0:
                        continue
                    vx = (px - qx) / dd - ux
                    vy = (py - qy) / dd - uy
                    vz = (pz - qz) / dd - uz
                    if vx * vx + vy * vy + vz * vz > min_turn * min_turn:
                        found = True
                        break
                continue
            stack[sp] = left[node]
            sp += 1
            stack[sp] = right[node]
            sp += 1
        flags[i] = found
    return flags


@njit(cache=True, parallel=True)
def brute_closest(tris, points):
    n = points.shape[0]
    dist = np.empty(n)
    closest = np.empty((n, 3))
    for i in prange(n):
        best = np.inf
        b0 = b1 = b2 = 0.0
        for t in range(tris.shape[0]):
            d2, qx, qy, qz = _tri_point_sqdist(tris, t, points[i, 0], points[i, 1], points[i, 2])
            if d2 < best:
                best = d2
                b0, b1, b2 = qx, qy, qz
        dist[i] = math.sqrt(best)
        closest[i, 0] = b0
        closest[i, 1] = b1
        closest[i, 2] = b2
    return dist, closest


@njit(cache=True, parallel=True)
def winding_numbers(tris, points):
    """Generalized winding number via summed signed solid angles."""
    n = points.shape[0]
    out = np.empty(n)
    for i in prange(n):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        total = 0.0
        for t in range(tris.shape[0]):
            ax = tris[t, 0, 0] - px
            ay = tris[t, 0, 1] - py
            az = tris[t, 0, 2] - pz
            bx = tris[t, 1, 0] - px
            by = tris[t, 1, 1] - py
            bz = tris[t, 1, 2] - pz
            cx = tris[t, 2, 0] - px
            cy = tris[t, 2, 1] - py
            cz = tris[t, 2, 2] - pz
            la = math.sqrt(ax * ax + ay * ay + az * az)
            lb = math.sqrt(bx * bx + by * by + bz * bz)
            lc = math.sqrt(cx * cx + cy * cy + cz * cz)
            det = (ax * (by * cz - bz * cy) - ay * (bx * cz - bz * cx)
                   + az * (bx * cy - by * cx))
            den = (la * lb * lc + (ax * bx + ay * by + az * bz) * lc
                   + (bx * cx + by * cy + bz * cz) * la
                   + (cx * ax + cy * ay + cz * az) * lb)
            total += 2.0 * math.atan2(det, den)
        out[i] = total / (4.0 * math.pi)
    return out


@njit(cache=True, inline="always")
def _ray_hits(tris, t, ox, oy, oz, dx, dy, dz):
    # Moller-Trumbore, counts hits with t > 0
    e1x = tris[t, 1, 0] - tris[t, 0, 0]
    e1y = tris[t, 1, 1] - tris[t, 0, 1]
    e1z = tris[t, 1, 2] - tris[t, 0, 2]
    e2x = tris[t, 2, 0] - tris[t, 0, 0]
    e2y = tris[t, 2, 1] - tris[t, 0, 1]
    e2z = tris[t, 2, 2] - tris[t, 0, 2]
    hx = dy * e2z - dz * e2y
    hy = dz * e2x - dx * e2z
    hz = dx * e2y - dy * e2x
    a = e1x * hx + e1y * hy + e1z * hz
    if abs(a) < 1e-14:
        return False
    f = 1.0 / a
    sx = ox - tris[t, 0, 0]
    sy = oy - tris[t, 0, 1]
    sz = oz - tris[t, 0, 2]
    u = f * (sx * hx + sy * hy + sz * hz)
    if u < 0.0 or u > 1.0:
        return False
    qx = sy * e1z - sz * e1y
    qy = sz * e1x - sx * e1z
    qz = sx * e1y - sy * e1x
    v = f * (dx * qx + dy * qy + dz * qz)
    if v < 0.0 or u + v > 1.0:
        return False
    tt = f * (e2x * qx + e2y * qy + e2z * qz)
    return tt > 0.0


@njit(cache=True, parallel=True)
def ray_parity_inside(tris, points, dirs):
    """Majority vote of crossing-count parity over the rays in ``dirs``."""
    n = points.shape[0]
    out = np.zeros(n, dtype=np.bool_)
    nd = dirs.shape[0]
    for i in prange(n):
        votes = 0
        for r in range(nd):
            hits = 0
            for t in range(tris.shape[0]):
                if _ray_hits(tris, t, points[i, 0], points[i, 1], points[i, 2],
                             dirs[r, 0], dirs[r, 1], dirs[r, 2]):
                    hits += 1
            if hits % 2 == 1:
                votes += 1
        out[i] = 2 * votes > nd
    return out
