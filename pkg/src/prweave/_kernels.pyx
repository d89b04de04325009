# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: fused multi-head attention and polygon fill."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, fabs

cnp.import_array()


def attention_forward(double[:, :, ::1] q, double[:, :, ::1] k,
                      double[:, :, ::1] v, int n_heads):
    cdef Py_ssize_t B = q.shape[0], Lq = q.shape[1], D = q.shape[2]
    cdef Py_ssize_t Lk = k.shape[1]
    cdef Py_ssize_t dh = D // n_heads
    cdef double scale = 1.0 / sqrt(<double>dh)
    out_arr = np.zeros((B, Lq, D), dtype=np.float64)
    probs_arr = np.empty((B, n_heads, Lq, Lk), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, :, :, ::1] probs = probs_arr
    cdef Py_ssize_t b, h, i, j, c, off
    cdef double s, m, z, p
    with nogil:
        for b in range(B):
            for h in range(n_heads):
                off = h * dh
                for i in range(Lq):
                    m = -1e308
                    for j in range(Lk):
                        s = 0.0
                        for c in range(dh):
                            s = s + q[b, i, off + c] * k[b, j, off + c]
                        s = s * scale
                        probs[b, h, i, j] = s
                        if s > m:
                            m = s
                    z = 0.0
                    for j in range(Lk):
                        p = exp(probs[b, h, i, j] - m)
                        probs[b, h, i, j] = p
                        z = z + p
                    for j in range(Lk):
                        p = probs[b, h, i, j] / z
                        probs[b, h, i, j] = p
                        for c in range(dh):
                            out[b, i, off + c] = out[b, i, off + c] + p * v[b, j, off + c]
    return out_arr, probs_arr


def attention_backward(double[:, :, ::1] dout, double[:, :, ::1] q,
                       double[:, :, ::1] k, double[:, :, ::1] v,
                       double[:, :, :, ::1] probs, int n_heads):
    cdef Py_ssize_t B = q.shape[0], Lq = q.shape[1], D = q.shape[2]
    cdef Py_ssize_t Lk = k.shape[1]
    cdef Py_ssize_t dh = D // n_heads
    cdef double scale = 1.0 / sqrt(<double>dh)
    dq_arr = np.zeros((B, Lq, D), dtype=np.float64)
    dk_arr = np.zeros((B, Lk, D), dtype=np.float64)
    dv_arr = np.zeros((B, Lk, D), dtype=np.float64)
    dp_arr = np.empty(Lk, dtype=np.float64)
    cdef double[:, :, ::1] dq = dq_arr
    cdef double[:, :, ::1] dk = dk_arr
    cdef double[:, :, ::1] dv = dv_arr
    cdef double[::1] dp = dp_arr
    cdef Py_ssize_t b, h, i, j, c, off
    cdef double s, acc, p, ds
    with nogil:
        for b in range(B):
            for h in range(n_heads):
                off = h * dh
                for i in range(Lq):
                    acc = 0.0
                    for j in range(Lk):
                        s = 0.0
                        for c in range(dh):
                            s = s + dout[b, i, off + c] * v[b, j, off + c]
                        dp[j] = s
                        acc = acc + s * probs[b, h, i, j]
                    for j in range(Lk):
                        p = probs[b, h, i, j]
                        ds = p * (dp[j] - acc) * scale
                        for c in range(dh):
                            dv[b, j, off + c] = dv[b, j, off + c] + p * dout[b, i, off + c]
                            dq[b, i, off + c] = dq[b, i, off + c] + ds * k[b, j, off + c]
                            dk[b, j, off + c] = dk[b, j, off + c] + ds * q[b, i, off + c]
    return dq_arr, dk_arr, dv_arr


def rasterize_even_odd(rows, cols, int height, int width):
    cdef double[::1] r = np.ascontiguousarray(rows, dtype=np.float64)
    cdef double[::1] cc = np.ascontiguousarray(cols, dtype=np.float64)
    cdef Py_ssize_t n = r.shape[0]
    out_arr = np.zeros((height, width), dtype=bool)
    cdef cnp.npy_bool[:, ::1] out = out_arr
    cdef Py_ssize_t y, x, i, i2
    cdef double pr, pc, r1, c1, r2, c2, cross, xc
    cdef bint inside, edge
    with nogil:
        for y in range(height):
            pr = y + 0.5
            for x in range(width):
                pc = x + 0.5
                inside = False
                edge = False
                for i in range(n):
                    i2 = i + 1
                    if i2 == n:
                        i2 = 0
                    r1 = r[i]
                    c1 = cc[i]
                    r2 = r[i2]
                    c2 = cc[i2]
                    cross = (r2 - r1) * (pc - c1) - (c2 - c1) * (pr - r1)
                    if (fabs(cross) <= 1e-12
                            and pr >= min(r1, r2) - 1e-12 and pr <= max(r1, r2) + 1e-12
                            and pc >= min(c1, c2) - 1e-12 and pc <= max(c1, c2) + 1e-12):
                        edge = True
                        break
                    if r1 == r2:
                        continue
                    if (r1 > pr) != (r2 > pr):
                        xc = c1 + (pr - r1) * (c2 - c1) / (r2 - r1)
                        if pc < xc:
                            inside = not inside
                out[y, x] = inside or edge
    return out_arr


cdef inline double _orient(double ar, double ac, double br, double bc,
                           double cr, double cc) nogil:
    return (br - ar) * (cc - ac) - (bc - ac) * (cr - ar)


cdef inline bint _on_segment(double ar, double ac, double br, double bc,
                             double pr, double pc) nogil:
    return (min(ar, br) - 1e-12 <= pr <= max(ar, br) + 1e-12
            and min(ac, bc) - 1e-12 <= pc <= max(ac, bc) + 1e-12)


cdef bint _segments_touch(double ar, double ac, double br, double bc,
                          double cr, double cc, double dr, double dc) nogil:
    cdef double o1 = _orient(ar, ac, br, bc, cr, cc)
    cdef double o2 = _orient(ar, ac, br, bc, dr, dc)
    cdef double o3 = _orient(cr, cc, dr, dc, ar, ac)
    cdef double o4 = _orient(cr, cc, dr, dc, br, bc)
    if ((o1 > 1e-12 and o2 < -1e-12) or (o1 < -1e-12 and o2 > 1e-12)) and \
       ((o3 > 1e-12 and o4 < -1e-12) or (o3 < -1e-12 and o4 > 1e-12)):
        return True
    if fabs(o1) <= 1e-12 and _on_segment(ar, ac, br, bc, cr, cc):
        return True
    if fabs(o2) <= 1e-12 and _on_segment(ar, ac, br, bc, dr, dc):
        return True
    if fabs(o3) <= 1e-12 and _on_segment(cr, cc, dr, dc, ar, ac):
        return True
    if fabs(o4) <= 1e-12 and _on_segment(cr, cc, dr, dc, br, bc):
        return True
    return False


cdef bint _simple(double[::1] r, double[::1] c) nogil:
    cdef Py_ssize_t n = r.shape[0]
    cdef Py_ssize_t i, j, i2, j2
    for i in range(n):
        i2 = (i + 1) % n
        if r[i] == r[i2] and c[i] == c[i2]:
            return False
        for j in range(i + 1, n):
            j2 = (j + 1) % n
            if j == i2 or i == j2:
                continue
            if _segments_touch(r[i], c[i], r[i2], c[i2], r[j], c[j], r[j2], c[j2]):
                return False
    return True


def polygon_is_simple(rows, cols):
    cdef double[::1] r = np.ascontiguousarray(rows, dtype=np.float64)
    cdef double[::1] c = np.ascontiguousarray(cols, dtype=np.float64)
    cdef bint ok
    if r.shape[0] < 3:
        return False
    with nogil:
        ok = _simple(r, c)
    return bool(ok)
