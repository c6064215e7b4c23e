# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled rasterization kernels for one cube face.

All geometry arrives in face-camera coordinates (x right, y up, z forward).
Pixel (row, col) has its center at u = -1 + (col + 0.5) * 2 / res and
v = -1 + (row + 0.5) * 2 / res on the z = 1 plane. Depth is Euclidean range
along the pixel-center ray. Arithmetic mirrors ``_kernels_py`` term by term
so both backends produce the same buffers.
"""

from libc.math cimport sqrt, floor, fabs, INFINITY

BACKEND = "cython"


cdef inline long _clamp(long v, long lo, long hi) noexcept nogil:
    if v < lo:
        return lo
    if v > hi:
        return hi
    return v


def raster_triangles(const double[:, :, ::1] tris, const long long[::1] tri_ids,
                     double[:, ::1] depth, long long[:, ::1] source):
    """Z-buffer triangles into ``depth``/``source`` (source = triangle ID)."""
    cdef Py_ssize_t res = depth.shape[0]
    cdef Py_ssize_t t, row, col
    cdef double pix = 2.0 / res
    cdef double u0, v0, u1, v1, u2, v2, umin, umax, vmin, vmax
    cdef double ax, ay, az, bx, by, bz, cx, cy, cz, nx, ny, nz, nd
    cdef double uc, vc, w0, w1, w2, area, denom, s, rng
    cdef long c0, c1, r0, r1
    with nogil:
        for t in range(tris.shape[0]):
            ax = tris[t, 0, 0]; ay = tris[t, 0, 1]; az = tris[t, 0, 2]
            bx = tris[t, 1, 0]; by = tris[t, 1, 1]; bz = tris[t, 1, 2]
            cx = tris[t, 2, 0]; cy = tris[t, 2, 1]; cz = tris[t, 2, 2]
            u0 = ax / az; v0 = ay / az
            u1 = bx / bz; v1 = by / bz
            u2 = cx / cz; v2 = cy / cz
            area = (u1 - u0) * (v2 - v0) - (v1 - v0) * (u2 - u0)
            if area == 0.0:
                continue
            nx = (by - ay) * (cz - az) - (bz - az) * (cy - ay)
            ny = (bz - az) * (cx - ax) - (bx - ax) * (cz - az)
            nz = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
            nd = nx * ax + ny * ay + nz * az
            umin = min(u0, min(u1, u2)); umax = max(u0, max(u1, u2))
            vmin = min(v0, min(v1, v2)); vmax = max(v0, max(v1, v2))
            if umax < -1.0 or umin > 1.0 or vmax < -1.0 or vmin > 1.0:
                continue
            c0 = _clamp(<long>floor((max(umin, -2.0) + 1.0) / pix), 0, res - 1)
            c1 = _clamp(<long>floor((min(umax, 2.0) + 1.0) / pix), 0, res - 1)
            r0 = _clamp(<long>floor((max(vmin, -2.0) + 1.0) / pix), 0, res - 1)
            r1 = _clamp(<long>floor((min(vmax, 2.0) + 1.0) / pix), 0, res - 1)
            for row in range(r0, r1 + 1):
                vc = -1.0 + (row + 0.5) * pix
                for col in range(c0, c1 + 1):
                    uc = -1.0 + (col + 0.5) * pix
                    w0 = (u1 - u0) * (vc - v0) - (v1 - v0) * (uc - u0)
                    w1 = (u2 - u1) * (vc - v1) - (v2 - v1) * (uc - u1)
                    w2 = (u0 - u2) * (vc - v2) - (v0 - v2) * (uc - u2)
                    if area > 0.0:
                        if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                            continue
                    else:
                        if w0 > 0.0 or w1 > 0.0 or w2 > 0.0:
                            continue
                    denom = nx * uc + ny * vc + nz
                    if denom == 0.0:
                        continue
                    s = nd / denom
                    if s <= 0.0:
                        continue
                    rng = s * sqrt(uc * uc + vc * vc + 1.0)
                    if rng < depth[row, col]:
                        depth[row, col] = rng
                        source[row, col] = tri_ids[t]


cdef inline bint _splat_hit(double px, double py, double pz, double qx, double qy, double qz,
                            double r2, double graze, double uc, double vc,
                            double* out_range, double* out_rho2) noexcept nogil:
    cdef double cn = sqrt(uc * uc + vc * vc + 1.0)
    cdef double nc = (qx * uc + qy * vc + qz) / cn
    cdef double s, hx, hy, hz, rho2, t
    if fabs(nc) >= graze:
        s = (qx * px + qy * py + qz * pz) / (qx * uc + qy * vc + qz)
        if s <= 0.0:
            return False
        hx = s * uc - px
        hy = s * vc - py
        hz = s - pz
        rho2 = hx * hx + hy * hy + hz * hz
        if rho2 > r2:
            return False
        out_range[0] = s * cn
        out_rho2[0] = rho2
        return True
    t = (px * uc + py * vc + pz) / cn
    rho2 = px * px + py * py + pz * pz - t * t
    if rho2 > r2 or t <= 0.0:
        return False
    out_range[0] = t
    out_rho2[0] = rho2
    return True


cdef inline void _splat_bbox(double px, double py, double pz, double r, double pix, long res,
                             long* c0, long* c1, long* r0, long* r1) noexcept nogil:
    cdef double zn = pz - r
    cdef double zf = pz + r
    cdef double umin = min((px - r) / zn, (px - r) / zf)
    cdef double umax = max((px + r) / zn, (px + r) / zf)
    cdef double vmin = min((py - r) / zn, (py - r) / zf)
    cdef double vmax = max((py + r) / zn, (py + r) / zf)
    c0[0] = _clamp(<long>floor((max(umin, -2.0) + 1.0) / pix), 0, res - 1)
    c1[0] = _clamp(<long>floor((min(umax, 2.0) + 1.0) / pix), 0, res - 1)
    r0[0] = _clamp(<long>floor((max(vmin, -2.0) + 1.0) / pix), 0, res - 1)
    r1[0] = _clamp(<long>floor((min(vmax, 2.0) + 1.0) / pix), 0, res - 1)
    if umax < -1.0 or umin > 1.0 or vmax < -1.0 or vmin > 1.0:
        c1[0] = c0[0] - 1


cdef inline double _nearest(double px, double py, double pz, double r) noexcept nogil:
    # lower bound on the range of any disk point, with slack for rounding;
    # pixels already closer than this cannot change
    return (sqrt(px * px + py * py + pz * pz) - r) * (1.0 - 1e-9) - 1e-9


def splat_depth(const double[:, ::1] pts, const double[:, ::1] nrms, const long long[::1] ids,
                double radius, double graze, double[:, ::1] depth, long long[:, ::1] source):
    """Visibility pass: nearest oriented disk per pixel (source = splat ID)."""
    cdef long res = depth.shape[0]
    cdef Py_ssize_t i, row, col
    cdef double pix = 2.0 / res
    cdef double r2 = radius * radius
    cdef double uc, vc, rng, rho2, nearest
    cdef long c0, c1, r0, r1
    with nogil:
        for i in range(pts.shape[0]):
            _splat_bbox(pts[i, 0], pts[i, 1], pts[i, 2], radius, pix, res, &c0, &c1, &r0, &r1)
            nearest = _nearest(pts[i, 0], pts[i, 1], pts[i, 2], radius)
            for row in range(r0, r1 + 1):
                vc = -1.0 + (row + 0.5) * pix
                for col in range(c0, c1 + 1):
                    if nearest > depth[row, col]:
                        continue
                    uc = -1.0 + (col + 0.5) * pix
                    if not _splat_hit(pts[i, 0], pts[i, 1], pts[i, 2], nrms[i, 0], nrms[i, 1],
                                      nrms[i, 2], r2, graze, uc, vc, &rng, &rho2):
                        continue
                    if rng < depth[row, col]:
                        depth[row, col] = rng
                        source[row, col] = ids[i]


def splat_accumulate(const double[:, ::1] pts, const double[:, ::1] nrms, double radius,
                     double graze, double eps, const double[:, ::1] depth,
                     double[:, :, ::1] nsum):
    """Blend pass: weighted, camera-facing normals of disks within ``eps`` of the front."""
    cdef long res = depth.shape[0]
    cdef Py_ssize_t i, row, col
    cdef double pix = 2.0 / res
    cdef double r2 = radius * radius
    cdef double uc, vc, rng, rho2, w, sign, nearest
    cdef long c0, c1, r0, r1
    with nogil:
        for i in range(pts.shape[0]):
            _splat_bbox(pts[i, 0], pts[i, 1], pts[i, 2], radius, pix, res, &c0, &c1, &r0, &r1)
            nearest = _nearest(pts[i, 0], pts[i, 1], pts[i, 2], radius)
            for row in range(r0, r1 + 1):
                vc = -1.0 + (row + 0.5) * pix
                for col in range(c0, c1 + 1):
                    if nearest > depth[row, col] + eps:
                        continue
                    uc = -1.0 + (col + 0.5) * pix
                    if not _splat_hit(pts[i, 0], pts[i, 1], pts[i, 2], nrms[i, 0], nrms[i, 1],
                                      nrms[i, 2], r2, graze, uc, vc, &rng, &rho2):
                        continue
                    if rng > depth[row, col] + eps:
                        continue
                    w = 1.0 - rho2 / r2 + 1e-6
                    sign = -1.0 if (nrms[i, 0] * uc + nrms[i, 1] * vc + nrms[i, 2]) > 0.0 else 1.0
                    nsum[row, col, 0] += w * sign * nrms[i, 0]
                    nsum[row, col, 1] += w * sign * nrms[i, 1]
                    nsum[row, col, 2] += w * sign * nrms[i, 2]


def finish_normals(const double[:, :, ::1] nsum, const double[:, ::1] basis,
                   float[:, :, ::1] normal, unsigned char[:, ::1] empty):
    """Normalize blended face-frame normals into world-frame ``normal``; flag empty pixels."""
    cdef Py_ssize_t res = nsum.shape[0]
    cdef Py_ssize_t row, col, j
    cdef double a, b, c, length
    with nogil:
        for row in range(res):
            for col in range(res):
                a = nsum[row, col, 0]
                b = nsum[row, col, 1]
                c = nsum[row, col, 2]
                length = sqrt(a * a + b * b + c * c)
                if length > 0.0:
                    a = a / length
                    b = b / length
                    c = c / length
                    for j in range(3):
                        normal[row, col, j] = <float>(a * basis[0, j] + b * basis[1, j]
                                                      + c * basis[2, j])
                else:
                    empty[row, col] = 1
