"""Pure numpy implementations of the hot kernels.

These mirror the compiled versions in ``_kernels.pyx`` one for one and are
used whenever the extension is unavailable or ``PRWEAVE_PURE_PYTHON=1``.
"""
import numpy as np


def _split_heads(t, n_heads):
    b, l, d = t.shape
    return t.reshape(b, l, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(t):
    b, h, l, dh = t.shape
    return t.transpose(0, 2, 1, 3).reshape(b, l, h * dh)


def attention_forward(q, k, v, n_heads):
    """Multi-head scaled dot-product attention.

    q: (B, Lq, d), k and v: (B, Lk, d). Returns ``(out, probs)`` with
    ``probs`` of shape (B, H, Lq, Lk), kept for the backward pass.
    """
    dh = q.shape[2] // n_heads
    scale = 1.0 / np.sqrt(dh)
    qh = _split_heads(q, n_heads)
    kh = _split_heads(k, n_heads)
    vh = _split_heads(v, n_heads)
    scores = np.matmul(qh, kh.transpose(0, 1, 3, 2)) * scale
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    probs = e / e.sum(axis=-1, keepdims=True)
    out = _merge_heads(np.matmul(probs, vh))
    return np.ascontiguousarray(out), probs


def attention_backward(dout, q, k, v, probs, n_heads):
    dh = q.shape[2] // n_heads
    scale = 1.0 / np.sqrt(dh)
    qh = _split_heads(q, n_heads)
    kh = _split_heads(k, n_heads)
    vh = _split_heads(v, n_heads)
    doh = _split_heads(dout, n_heads)
    dprobs = np.matmul(doh, vh.transpose(0, 1, 3, 2))
    dv = np.matmul(probs.transpose(0, 1, 3, 2), doh)
    ds = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True)) * scale
    dq = np.matmul(ds, kh)
    dk = np.matmul(ds.transpose(0, 1, 3, 2), qh)
    return (
        np.ascontiguousarray(_merge_heads(dq)),
        np.ascontiguousarray(_merge_heads(dk)),
        np.ascontiguousarray(_merge_heads(dv)),
    )


def rasterize_even_odd(rows, cols, height, width):
    """Even-odd fill of a closed polygon sampled at cell centres.

    Vertex ``i`` is ``(rows[i], cols[i])`` in continuous grid coordinates
    where cell ``(r, c)`` spans ``[r, r+1) x [c, c+1)``. A centre lying on
    an edge counts as inside.
    """
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    pr = np.arange(height, dtype=np.float64)[:, None] + 0.5
    pc = np.arange(width, dtype=np.float64)[None, :] + 0.5
    inside = np.zeros((height, width), dtype=bool)
    on_edge = np.zeros((height, width), dtype=bool)
    n = len(rows)
    for i in range(n):
        r1, c1 = rows[i], cols[i]
        r2, c2 = rows[(i + 1) % n], cols[(i + 1) % n]
        cross = (r2 - r1) * (pc - c1) - (c2 - c1) * (pr - r1)
        within = (
            (pr >= min(r1, r2) - 1e-12) & (pr <= max(r1, r2) + 1e-12)
            & (pc >= min(c1, c2) - 1e-12) & (pc <= max(c1, c2) + 1e-12)
        )
        on_edge |= (np.abs(cross) <= 1e-12) & within
        if r1 == r2:
            continue
        straddle = (r1 > pr) != (r2 > pr)
        x_cross = c1 + (pr - r1) * (c2 - c1) / (r2 - r1)
        inside ^= straddle & (pc < x_cross)
    return inside | on_edge


def _orient(a, b, c):
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _on_segment(a, b, p):
    return (min(a[0], b[0]) - 1e-12 <= p[0] <= max(a[0], b[0]) + 1e-12
            and min(a[1], b[1]) - 1e-12 <= p[1] <= max(a[1], b[1]) + 1e-12)


def _segments_touch(a, b, c, d):
    o1, o2 = _orient(a, b, c), _orient(a, b, d)
    o3, o4 = _orient(c, d, a), _orient(c, d, b)
    if ((o1 > 1e-12 and o2 < -1e-12) or (o1 < -1e-12 and o2 > 1e-12)) and \
       ((o3 > 1e-12 and o4 < -1e-12) or (o3 < -1e-12 and o4 > 1e-12)):
        return True
    return ((abs(o1) <= 1e-12 and _on_segment(a, b, c))
            or (abs(o2) <= 1e-12 and _on_segment(a, b, d))
            or (abs(o3) <= 1e-12 and _on_segment(c, d, a))
            or (abs(o4) <= 1e-12 and _on_segment(c, d, b)))


def polygon_is_simple(rows, cols):
    """True when no two non-adjacent edges of the closed polygon touch."""
    pts = list(zip((float(v) for v in rows), (float(v) for v in cols)))
    n = len(pts)
    if n < 3:
        return False
    for i in range(n):
        i2 = (i + 1) % n
        if pts[i] == pts[i2]:
            return False
        for j in range(i + 1, n):
            j2 = (j + 1) % n
            if j == i2 or i == j2:
                continue
            if _segments_touch(pts[i], pts[i2], pts[j], pts[j2]):
                return False
    return True
