"""Numpy implementation of the cube-face rasterization kernels.

Same signatures and arithmetic as the compiled ``_kernels`` module; used when
the extension is not built or ``AUGLIDAR_PURE_PYTHON=1``.
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"

_CHUNK = 1 << 21


def _pixel_range(lo, hi, pix, res):
    a = np.floor((np.maximum(lo, -2.0) + 1.0) / pix).astype(np.int64)
    b = np.floor((np.minimum(hi, 2.0) + 1.0) / pix).astype(np.int64)
    return np.clip(a, 0, res - 1), np.clip(b, 0, res - 1)


def raster_triangles(tris, tri_ids, depth, source):
    res = depth.shape[0]
    pix = 2.0 / res
    for t in range(len(tris)):
        (ax, ay, az), (bx, by, bz), (cx, cy, cz) = tris[t].tolist()
        u0, v0 = ax / az, ay / az
        u1, v1 = bx / bz, by / bz
        u2, v2 = cx / cz, cy / cz
        area = (u1 - u0) * (v2 - v0) - (v1 - v0) * (u2 - u0)
        if area == 0.0:
            continue
        nx = (by - ay) * (cz - az) - (bz - az) * (cy - ay)
        ny = (bz - az) * (cx - ax) - (bx - ax) * (cz - az)
        nz = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        nd = nx * ax + ny * ay + nz * az
        umin, umax = min(u0, u1, u2), max(u0, u1, u2)
        vmin, vmax = min(v0, v1, v2), max(v0, v1, v2)
        if umax < -1.0 or umin > 1.0 or vmax < -1.0 or vmin > 1.0:
            continue
        c0, c1 = (int(v) for v in _pixel_range(np.array(umin), np.array(umax), pix, res))
        r0, r1 = (int(v) for v in _pixel_range(np.array(vmin), np.array(vmax), pix, res))
        cols = np.arange(c0, c1 + 1)
        rows = np.arange(r0, r1 + 1)
        uc = (-1.0 + (cols + 0.5) * pix)[None, :]
        vc = (-1.0 + (rows + 0.5) * pix)[:, None]
        w0 = (u1 - u0) * (vc - v0) - (v1 - v0) * (uc - u0)
        w1 = (u2 - u1) * (vc - v1) - (v2 - v1) * (uc - u1)
        w2 = (u0 - u2) * (vc - v2) - (v0 - v2) * (uc - u2)
        if area > 0.0:
            inside = (w0 >= 0.0) & (w1 >= 0.0) & (w2 >= 0.0)
        else:
            inside = (w0 <= 0.0) & (w1 <= 0.0) & (w2 <= 0.0)
        denom = nx * uc + ny * vc + nz
        with np.errstate(divide="ignore", invalid="ignore"):
            s = nd / denom
            rng = s * np.sqrt(uc * uc + vc * vc + 1.0)
        sub = depth[r0:r1 + 1, c0:c1 + 1]
        win = inside & (denom != 0.0) & (s > 0.0) & (rng < sub)
        sub[win] = rng[win]
        source[r0:r1 + 1, c0:c1 + 1][win] = tri_ids[t]


def _splat_bboxes(pts, radius, pix, res):
    px, py, pz = pts[:, 0], pts[:, 1], pts[:, 2]
    r = radius
    zn, zf = pz - r, pz + r
    umin = np.minimum((px - r) / zn, (px - r) / zf)
    umax = np.maximum((px + r) / zn, (px + r) / zf)
    vmin = np.minimum((py - r) / zn, (py - r) / zf)
    vmax = np.maximum((py + r) / zn, (py + r) / zf)
    c0, c1 = _pixel_range(umin, umax, pix, res)
    r0, r1 = _pixel_range(vmin, vmax, pix, res)
    outside = (umax < -1.0) | (umin > 1.0) | (vmax < -1.0) | (vmin > 1.0)
    c1 = np.where(outside, c0 - 1, c1)
    return c0, c1, r0, r1


def _splat_fragments(pts, nrms, radius, graze, res):
    """Yield per-chunk (splat idx, row, col, range, rho2, uc, vc) for accepted fragments."""
    pix = 2.0 / res
    r2 = radius * radius
    c0, c1, r0, r1 = _splat_bboxes(pts, radius, pix, res)
    ncol = np.maximum(c1 - c0 + 1, 0)
    nrow = np.maximum(r1 - r0 + 1, 0)
    sizes = ncol * nrow
    start = 0
    n = len(pts)
    while start < n:
        csum = np.cumsum(sizes[start:])
        stop = start + max(1, int(np.searchsorted(csum, _CHUNK, side="right")))
        stop = min(stop, n)
        idx = np.arange(start, stop)
        cnt = sizes[idx]
        rep = np.repeat(idx, cnt)
        local = np.arange(len(rep)) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        width = ncol[rep]
        width_safe = np.maximum(width, 1)
        row = r0[rep] + local // width_safe
        col = c0[rep] + local % width_safe
        start = stop
        if len(rep) == 0:
            continue
        uc = -1.0 + (col + 0.5) * pix
        vc = -1.0 + (row + 0.5) * pix
        px, py, pz = pts[rep, 0], pts[rep, 1], pts[rep, 2]
        qx, qy, qz = nrms[rep, 0], nrms[rep, 1], nrms[rep, 2]
        cn = np.sqrt(uc * uc + vc * vc + 1.0)
        nc = (qx * uc + qy * vc + qz) / cn
        oriented = np.abs(nc) >= graze
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (qx * px + qy * py + qz * pz) / (qx * uc + qy * vc + qz)
            hx = s * uc - px
            hy = s * vc - py
            hz = s - pz
            rho_o = hx * hx + hy * hy + hz * hz
            t = (px * uc + py * vc + pz) / cn
            rho_f = px * px + py * py + pz * pz - t * t
        rng = np.where(oriented, s * cn, t)
        rho2 = np.where(oriented, rho_o, rho_f)
        ok = np.where(oriented, (s > 0.0) & (rho_o <= r2), (rho_f <= r2) & (t > 0.0))
        yield rep[ok], row[ok], col[ok], rng[ok], rho2[ok], uc[ok], vc[ok]


def splat_depth(pts, nrms, ids, radius, graze, depth, source):
    res = depth.shape[0]
    for rep, row, col, rng, _, _, _ in _splat_fragments(pts, nrms, radius, graze, res):
        flat = row * res + col
        order = np.lexsort((rep, rng, flat))
        flat_s = flat[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = flat_s[1:] != flat_s[:-1]
        best = order[first]
        pix_flat = flat[best]
        dflat = depth.reshape(-1)
        win = rng[best] < dflat[pix_flat]
        dflat[pix_flat[win]] = rng[best][win]
        source.reshape(-1)[pix_flat[win]] = ids[rep[best][win]]


def splat_accumulate(pts, nrms, radius, graze, eps, depth, nsum):
    res = depth.shape[0]
    r2 = radius * radius
    dflat = depth.reshape(-1)
    nflat = nsum.reshape(-1, 3)
    for rep, row, col, rng, rho2, uc, vc in _splat_fragments(pts, nrms, radius, graze, res):
        flat = row * res + col
        keep = ~(rng > dflat[flat] + eps)
        rep, flat, rho2, uc, vc = rep[keep], flat[keep], rho2[keep], uc[keep], vc[keep]
        w = 1.0 - rho2 / r2 + 1e-6
        q = nrms[rep]
        sign = np.where((q[:, 0] * uc + q[:, 1] * vc + q[:, 2]) > 0.0, -1.0, 1.0)
        for k in range(3):
            nflat[:, k] += np.bincount(flat, w * sign * q[:, k], minlength=len(nflat))


def finish_normals(nsum, basis, normal, empty):
    a, b, c = nsum[..., 0], nsum[..., 1], nsum[..., 2]
    length = np.sqrt(a * a + b * b + c * c)
    full = length > 0.0
    a, b, c, length = a[full], b[full], c[full], length[full]
    a, b, c = a / length, b / length, c / length
    for j in range(3):
        normal[..., j][full] = (a * basis[0, j] + b * basis[1, j] + c * basis[2, j]).astype(
            np.float32)
    empty[~full] = 1
