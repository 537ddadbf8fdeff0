"""Hot inner loops: DDA ray casting, nearest-neighbour pairing, ICP, Chamfer.

Every kernel exists twice. The ``*_loop`` flavour is plain scalar code that
numba compiles; the ``*_np`` flavour is vectorised numpy and serves as the
fallback when ``LIDARVPR_DISABLE_NUMBA=1``. Both flavours must agree to
floating-point round-off; ``benchmarks/bench_kernels.py`` times them.
"""

import math

import numpy as np

from . import _accel

# --------------------------------------------------------------------------
# DDA ray casting
# --------------------------------------------------------------------------


def raycast_loop(cells, ox, oy, bearings, max_range):
    """Cast one ray per bearing from (ox, oy) through a boolean grid.

    ``cells[iy, ix]`` is True for obstacles; cell (ix, iy) spans
    [ix, ix+1) x [iy, iy+1). Returns (ranges, hit). A hit range is the
    distance to the entry face of the first occupied cell.
    """
    h, w = cells.shape
    n = bearings.shape[0]
    ranges = np.empty(n, dtype=np.float64)
    hit = np.zeros(n, dtype=np.bool_)
    ix0 = int(math.floor(ox))
    iy0 = int(math.floor(oy))
    for k in range(n):
        dx = math.cos(bearings[k])
        dy = math.sin(bearings[k])
        ix = ix0
        iy = iy0
        if dx > 0.0:
            sx = 1
            tmx = (ix + 1 - ox) / dx
            tdx = 1.0 / dx
        elif dx < 0.0:
            sx = -1
            tmx = (ox - ix) / -dx
            tdx = -1.0 / dx
        else:
            sx = 0
            tmx = np.inf
            tdx = np.inf
        if dy > 0.0:
            sy = 1
            tmy = (iy + 1 - oy) / dy
            tdy = 1.0 / dy
        elif dy < 0.0:
            sy = -1
            tmy = (oy - iy) / -dy
            tdy = -1.0 / dy
        else:
            sy = 0
            tmy = np.inf
            tdy = np.inf
        ranges[k] = max_range
        while True:
            if tmx < tmy:
                t = tmx
                ix += sx
                tmx += tdx
            else:
                t = tmy
                iy += sy
                tmy += tdy
            if t > max_range or ix < 0 or iy < 0 or ix >= w or iy >= h:
                break
            if cells[iy, ix]:
                ranges[k] = t
                hit[k] = True
                break
    return ranges, hit


def raycast_np(cells, ox, oy, bearings, max_range):
    """Vectorised DDA: all rays march in lockstep."""
    h, w = cells.shape
    n = bearings.shape[0]
    dx = np.cos(bearings)
    dy = np.sin(bearings)
    ix = np.full(n, int(math.floor(ox)), dtype=np.int64)
    iy = np.full(n, int(math.floor(oy)), dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = np.sign(dx).astype(np.int64)
        sy = np.sign(dy).astype(np.int64)
        tmx = np.where(dx > 0, (ix + 1 - ox) / dx, np.where(dx < 0, (ox - ix) / -dx, np.inf))
        tmy = np.where(dy > 0, (iy + 1 - oy) / dy, np.where(dy < 0, (oy - iy) / -dy, np.inf))
        tdx = np.where(dx != 0, 1.0 / np.abs(dx), np.inf)
        tdy = np.where(dy != 0, 1.0 / np.abs(dy), np.inf)
    ranges = np.full(n, float(max_range))
    hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    while active.any():
        a = np.flatnonzero(active)
        stepx = tmx[a] < tmy[a]
        ax, ay = a[stepx], a[~stepx]
        t = np.empty(a.size)
        t[stepx] = tmx[ax]
        t[~stepx] = tmy[ay]
        ix[ax] += sx[ax]
        tmx[ax] += tdx[ax]
        iy[ay] += sy[ay]
        tmy[ay] += tdy[ay]
        cx, cy = ix[a], iy[a]
        out = (t > max_range) | (cx < 0) | (cy < 0) | (cx >= w) | (cy >= h)
        inside = ~out
        occ = np.zeros(a.size, dtype=bool)
        occ[inside] = cells[cy[inside], cx[inside]]
        ranges[a[occ]] = t[occ]
        hit[a[occ]] = True
        active[a[out | occ]] = False
    return ranges, hit


# --------------------------------------------------------------------------
# Nearest neighbours between small 2D point sets
# --------------------------------------------------------------------------


def nn_loop(a, b):
    """For every row of ``a`` the squared distance to, and index of, its
    nearest row in ``b``. Ties resolve to the lowest index."""
    na = a.shape[0]
    nb = b.shape[0]
    d2 = np.empty(na, dtype=np.float64)
    idx = np.empty(na, dtype=np.int64)
    for i in range(na):
        best = np.inf
        bi = 0
        ax = a[i, 0]
        ay = a[i, 1]
        for j in range(nb):
            ex = ax - b[j, 0]
            ey = ay - b[j, 1]
            d = ex * ex + ey * ey
            if d < best:
                best = d
                bi = j
        d2[i] = best
        idx[i] = bi
    return d2, idx


def nn_np(a, b):
    diff = a[:, None, :] - b[None, :, :]
    d = diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1]
    idx = np.argmin(d, axis=1)
    return d[np.arange(a.shape[0]), idx], idx


# --------------------------------------------------------------------------
# Point-to-point ICP with closed-form 2D rigid fit
# --------------------------------------------------------------------------


def _make_icp(nn):
    def icp(src, dst, angle0, max_iters, tol, costs):
        """Align ``src`` onto ``dst`` starting from rotation ``angle0``.

        Writes the pairing cost of every accepted iteration into ``costs``
        and returns (angle, tx, ty, n_costs, n_fits).
        """
        n = src.shape[0]
        c = math.cos(angle0)
        s = math.sin(angle0)
        tx = 0.0
        ty = 0.0
        moved = np.empty_like(src)
        matched = np.empty_like(src)
        mx = 0.0
        my = 0.0
        for i in range(n):
            mx += src[i, 0]
            my += src[i, 1]
        mx /= n
        my /= n
        best = (angle0, 0.0, 0.0)
        prev = np.inf
        n_costs = 0
        fits = 0
        while True:
            for i in range(n):
                moved[i, 0] = c * src[i, 0] - s * src[i, 1] + tx
                moved[i, 1] = s * src[i, 0] + c * src[i, 1] + ty
            d2, idx = nn(moved, dst)
            cost = 0.0
            for i in range(n):
                cost += d2[i]
            cost /= n
            if cost > prev:
                # round-off uphill step: keep the previous transform
                break
            costs[n_costs] = cost
            n_costs += 1
            best = (math.atan2(s, c), tx, ty)
            if prev - cost < tol or fits >= max_iters:
                break
            prev = cost
            qx = 0.0
            qy = 0.0
            for i in range(n):
                matched[i, 0] = dst[idx[i], 0]
                matched[i, 1] = dst[idx[i], 1]
                qx += matched[i, 0]
                qy += matched[i, 1]
            qx /= n
            qy /= n
            sxx = 0.0
            sxy = 0.0
            for i in range(n):
                ax = src[i, 0] - mx
                ay = src[i, 1] - my
                bx = matched[i, 0] - qx
                by = matched[i, 1] - qy
                sxx += ax * bx + ay * by
                sxy += ax * by - ay * bx
            th = math.atan2(sxy, sxx)
            c = math.cos(th)
            s = math.sin(th)
            tx = qx - (c * mx - s * my)
            ty = qy - (s * mx + c * my)
            fits += 1
        return best[0], best[1], best[2], n_costs, fits

    return icp


def _make_chamfer(nn):
    def chamfer(a, b):
        d_ab, _ = nn(a, b)
        d_ba, _ = nn(b, a)
        return d_ab.sum() / a.shape[0] + d_ba.sum() / b.shape[0]

    return chamfer


# --------------------------------------------------------------------------
# Encoder pooling helpers
# --------------------------------------------------------------------------


def masked_argmax_loop(a, mask):
    """Per (batch, channel) maximum of ``a`` [B, P, C] over unmasked points.

    Returns (values [B, C], argmax [B, C]); the first maximum wins.
    """
    b, p, c = a.shape
    vals = np.empty((b, c), dtype=a.dtype)
    arg = np.zeros((b, c), dtype=np.int64)
    for i in range(b):
        for k in range(c):
            vals[i, k] = -np.inf
        for j in range(p):
            if not mask[i, j]:
                continue
            for k in range(c):
                if a[i, j, k] > vals[i, k]:
                    vals[i, k] = a[i, j, k]
                    arg[i, k] = j
    return vals, arg


def masked_argmax_np(a, mask):
    m = np.where(mask[:, :, None], a, -np.inf)
    arg = np.argmax(m, axis=1)
    return np.take_along_axis(m, arg[:, None, :], axis=1)[:, 0, :], arg


def scatter_rows_loop(rows, values, n):
    """out[rows[k]] += values[k] for an [n, H] output."""
    out = np.zeros((n, values.shape[1]), dtype=values.dtype)
    for k in range(rows.shape[0]):
        r = rows[k]
        for h in range(values.shape[1]):
            out[r, h] += values[k, h]
    return out


def scatter_rows_np(rows, values, n):
    out = np.zeros((n, values.shape[1]), dtype=values.dtype)
    order = np.argsort(rows, kind="stable")
    srt = rows[order]
    starts = np.flatnonzero(np.r_[True, srt[1:] != srt[:-1]])
    out[srt[starts]] = np.add.reduceat(values[order], starts, axis=0)
    return out


icp_np = _make_icp(nn_np)
chamfer_np = _make_chamfer(nn_np)

NUMPY_IMPL = {
    "raycast": raycast_np,
    "nn": nn_np,
    "icp": icp_np,
    "chamfer": chamfer_np,
    "masked_argmax": masked_argmax_np,
    "scatter_rows": scatter_rows_np,
}


def _compile_numba():
    import numba

    opts = _accel.NUMBA_OPTS
    nn = numba.njit(**opts)(nn_loop)
    return {
        "raycast": numba.njit(**opts)(raycast_loop),
        "nn": nn,
        "icp": numba.njit(**opts)(_make_icp(nn)),
        "chamfer": numba.njit(**opts)(_make_chamfer(nn)),
        "masked_argmax": numba.njit(**opts)(masked_argmax_loop),
        "scatter_rows": numba.njit(**opts)(scatter_rows_loop),
    }


_numba_impl = None


def numba_impl():
    """Numba flavour of every kernel (compiled on first use)."""
    global _numba_impl
    if _numba_impl is None:
        _numba_impl = _compile_numba()
    return _numba_impl


def _active():
    return numba_impl() if _accel.USE_NUMBA else NUMPY_IMPL


def raycast(cells, ox, oy, bearings, max_range):
    return _active()["raycast"](cells, float(ox), float(oy), bearings, float(max_range))


def nearest(a, b):
    return _active()["nn"](a, b)


def icp(src, dst, angle0, max_iters, tol, costs):
    return _active()["icp"](src, dst, float(angle0), int(max_iters), float(tol), costs)


def chamfer(a, b):
    return _active()["chamfer"](a, b)


def masked_argmax(a, mask):
    return _active()["masked_argmax"](np.ascontiguousarray(a), np.ascontiguousarray(mask))


def scatter_rows(rows, values, n):
    return _active()["scatter_rows"](np.ascontiguousarray(rows), np.ascontiguousarray(values), int(n))
