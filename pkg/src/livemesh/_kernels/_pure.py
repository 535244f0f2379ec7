"""Pure-Python kernel implementations.

Reference semantics for the compiled extension in ``_fast.pyx``; both
backends must agree bit-for-bit. The curve here is a closed variant of
the Hilbert curve (four rotated sub-curves joined into a Hamiltonian
cycle of the grid), so consecutive indices are edge-adjacent *including*
the wrap from the last cell back to cell 0.
"""

BACKEND = "pure"


def _hilbert_d_to_xy(order, d):
    # open Hilbert walk on a 2^order grid: starts (0,0), ends (side-1, 0)
    x = y = 0
    s = 1
    t = d
    side = 1 << order
    while s < side:
        rx = 1 & (t >> 1)
        ry = 1 & (t ^ rx)
        if ry == 0:
            if rx == 1:
                x = s - 1 - x
                y = s - 1 - y
            x, y = y, x
        x += s * rx
        y += s * ry
        t >>= 2
        s <<= 1
    return x, y


def _hilbert_xy_to_d(order, x, y):
    d = 0
    s = (1 << order) >> 1
    while s > 0:
        rx = 1 if (x & s) > 0 else 0
        ry = 1 if (y & s) > 0 else 0
        d += s * s * ((3 * rx) ^ ry)
        if ry == 0:
            if rx == 1:
                x = s - 1 - x
                y = s - 1 - y
            x, y = y, x
        s >>= 1
    return d


def curve_point(order, h):
    """Cell (x, y) of curve index h on the closed 2^order x 2^order curve."""
    if order == 1:
        return ((0, 0), (0, 1), (1, 1), (1, 0))[h]
    m = order - 1
    half = 1 << m
    quad_cells = 1 << (2 * m)
    q, r = divmod(h, quad_cells)
    hx, hy = _hilbert_d_to_xy(m, r)
    if q == 0:
        return half - 1 - hy, hx
    if q == 1:
        return half - 1 - hy, hx + half
    if q == 2:
        return hy + half, 2 * half - 1 - hx
    return hy + half, half - 1 - hx


def curve_index(order, x, y):
    """Curve index of cell (x, y); inverse of curve_point."""
    if order == 1:
        return ((0, 1), (3, 2))[x][y]
    m = order - 1
    half = 1 << m
    quad_cells = 1 << (2 * m)
    if x < half:
        q = 0 if y < half else 1
        hx = y - (0 if q == 0 else half)
        hy = half - 1 - x
    else:
        q = 2 if y >= half else 3
        hx = (2 * half - 1 - y) if q == 2 else (half - 1 - y)
        hy = x - half
    return q * quad_cells + _hilbert_xy_to_d(m, hx, hy)


def assign_sources(deadlines, have_masks, delays, outstanding, caps, now, tx_ms):
    """EDF source assignment for one scheduling pass.

    deadlines: per-slot playout deadline (ms), in the order slots should
        be considered (caller pre-sorts: deadline, rarity, seq).
    have_masks: per-neighbor bitmask; bit i set means neighbor holds slot i.
    delays / outstanding / caps: per-neighbor predicted delay (ms),
        currently outstanding requests, and per-requester concurrency cap.
    Returns a per-slot list: neighbor index, -1 (no source now), or
    -2 (deadline already passed; caller marks the slot skipped).
    `outstanding` is mutated as requests are assigned.
    """
    n_nbr = len(have_masks)
    result = []
    for i, deadline in enumerate(deadlines):
        if deadline < now:
            result.append(-2)
            continue
        bit = 1 << i
        best = -1
        best_cost = 0.0
        for j in range(n_nbr):
            if not (have_masks[j] & bit):
                continue
            if outstanding[j] >= caps[j]:
                continue
            cost = delays[j] + outstanding[j] * tx_ms
            if best < 0 or cost < best_cost:
                best = j
                best_cost = cost
        if best >= 0:
            outstanding[best] += 1
        result.append(best)
    return result
