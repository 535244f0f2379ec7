# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: closed space-filling curve indexing and the EDF
request-assignment inner loop. Must match ``_pure.py`` exactly."""

BACKEND = "cython"


cdef inline (long, long) _hilbert_d_to_xy(int order, long d) noexcept:
    cdef long x = 0, y = 0, rx, ry, s = 1, t = d, tmp
    cdef long side = 1 << order
    while s < side:
        rx = 1 & (t >> 1)
        ry = 1 & (t ^ rx)
        if ry == 0:
            if rx == 1:
                x = s - 1 - x
                y = s - 1 - y
            tmp = x
            x = y
            y = tmp
        x += s * rx
        y += s * ry
        t >>= 2
        s <<= 1
    return x, y


cdef inline long _hilbert_xy_to_d(int order, long x, long y) noexcept:
    cdef long d = 0, rx, ry, tmp
    cdef long s = (1 << order) >> 1
    while s > 0:
        rx = 1 if (x & s) > 0 else 0
        ry = 1 if (y & s) > 0 else 0
        d += s * s * ((3 * rx) ^ ry)
        if ry == 0:
            if rx == 1:
                x = s - 1 - x
                y = s - 1 - y
            tmp = x
            x = y
            y = tmp
        s >>= 1
    return d


def curve_point(int order, long h):
    """Cell (x, y) of curve index h on the closed 2^order x 2^order curve."""
    cdef long m, half, quad_cells, q, r, hx, hy
    if order == 1:
        if h == 0:
            return 0, 0
        if h == 1:
            return 0, 1
        if h == 2:
            return 1, 1
        return 1, 0
    m = order - 1
    half = 1 << m
    quad_cells = 1 << (2 * m)
    q = h // quad_cells
    r = h - q * quad_cells
    hx, hy = _hilbert_d_to_xy(m, r)
    if q == 0:
        return half - 1 - hy, hx
    if q == 1:
        return half - 1 - hy, hx + half
    if q == 2:
        return hy + half, 2 * half - 1 - hx
    return hy + half, half - 1 - hx


def curve_index(int order, long x, long y):
    """Curve index of cell (x, y); inverse of curve_point."""
    cdef long m, half, quad_cells, q, hx, hy
    if order == 1:
        if x == 0:
            return 0 if y == 0 else 1
        return 3 if y == 0 else 2
    m = order - 1
    half = 1 << m
    quad_cells = 1 << (2 * m)
    if x < half:
        q = 0 if y < half else 1
        hx = y if q == 0 else y - half
        hy = half - 1 - x
    else:
        q = 2 if y >= half else 3
        hx = (2 * half - 1 - y) if q == 2 else (half - 1 - y)
        hy = x - half
    return q * quad_cells + _hilbert_xy_to_d(m, hx, hy)


def assign_sources(list deadlines, list have_masks, list delays,
                   list outstanding, list caps, double now, double tx_ms):
    """EDF source assignment; see the pure backend for the contract."""
    cdef int n_slots = len(deadlines)
    cdef int n_nbr = len(have_masks)
    cdef int i, j, best
    cdef double cost, best_cost, deadline
    cdef unsigned long long bit, mask
    cdef list result = []
    for i in range(n_slots):
        deadline = deadlines[i]
        if deadline < now:
            result.append(-2)
            continue
        bit = (<unsigned long long>1) << i
        best = -1
        best_cost = 0.0
        for j in range(n_nbr):
            mask = have_masks[j]
            if not (mask & bit):
                continue
            if <long>outstanding[j] >= <long>caps[j]:
                continue
            cost = <double>delays[j] + <double>outstanding[j] * tx_ms
            if best < 0 or cost < best_cost:
                best = j
                best_cost = cost
        if best >= 0:
            outstanding[best] = outstanding[best] + 1
        result.append(best)
    return result
