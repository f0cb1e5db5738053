"""Hot inner loops, each with a numba kernel and a pure-numpy twin.

Set ``TRGS_DISABLE_NUMBA=1`` before import to force the numpy path. Both
paths perform the same floating-point operations in the same order where it
matters (compensated sums), so results agree bitwise; ``fastmath`` is never
enabled because it would let LLVM reassociate the Kahan correction away.
"""
import math
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_DISABLED = os.environ.get("TRGS_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")
NUMBA_AVAILABLE = numba is not None
USE_NUMBA = NUMBA_AVAILABLE and not _DISABLED


# ---------------------------------------------------------------------------
# compensated row mean
# ---------------------------------------------------------------------------

def kahan_mean_numpy(rows):
    rows = np.asarray(rows, dtype=np.float64)
    m = rows.shape[0]
    s = np.zeros(rows.shape[1:])
    c = np.zeros(rows.shape[1:])
    for i in range(m):
        y = rows[i] - c
        t = s + y
        c = (t - s) - y
        s = t
    return s / m


def _kahan_mean_2d(rows):
    m, k = rows.shape
    s = np.zeros(k)
    c = np.zeros(k)
    for i in range(m):
        for j in range(k):
            y = rows[i, j] - c[j]
            t = s[j] + y
            c[j] = (t - s[j]) - y
            s[j] = t
    out = np.empty(k)
    for j in range(k):
        out[j] = s[j] / m
    return out


# ---------------------------------------------------------------------------
# secular equation  ||d(lam)|| = delta,  ||d||^2 = sum gam2 / (sig + lam)^2
# ---------------------------------------------------------------------------

def _secular_newton(sig, gam2, delta, lo, hi, lam0, rtol, maxit):
    lam = lam0
    for it in range(maxit):
        s2 = 0.0
        s3 = 0.0
        for i in range(sig.shape[0]):
            den = sig[i] + lam
            q = gam2[i] / (den * den)
            s2 += q
            s3 += q / den
        nrm = math.sqrt(s2)
        if abs(nrm - delta) <= rtol * delta:
            return lam, it, True
        phi = 1.0 / nrm - 1.0 / delta
        if phi < 0.0:
            lo = lam
        else:
            hi = lam
        if hi - lo <= 4.0 * 2.220446049250313e-16 * max(abs(hi), 1e-300):
            return lam, it, True
        dphi = s3 / (nrm * nrm * nrm)
        nxt = lam - phi / dphi if dphi > 0.0 else 0.5 * (lo + hi)
        if abs(nxt - lam) <= 4.0 * 2.220446049250313e-16 * abs(lam):
            return lam, it, True
        if not (lo < nxt < hi):
            nxt = 0.5 * (lo + hi)
        lam = nxt
    return lam, maxit, False


def secular_newton_numpy(sig, gam2, delta, lo, hi, lam0, rtol, maxit):
    lam = lam0
    for it in range(maxit):
        den = sig + lam
        q = gam2 / (den * den)
        # cumsum adds left to right like the compiled loop; np.sum is pairwise
        s2 = float(np.cumsum(q)[-1])
        s3 = float(np.cumsum(q / den)[-1])
        nrm = math.sqrt(s2)
        if abs(nrm - delta) <= rtol * delta:
            return lam, it, True
        phi = 1.0 / nrm - 1.0 / delta
        if phi < 0.0:
            lo = lam
        else:
            hi = lam
        if hi - lo <= 4.0 * np.finfo(float).eps * max(abs(hi), 1e-300):
            return lam, it, True
        dphi = s3 / (nrm * nrm * nrm)
        nxt = lam - phi / dphi if dphi > 0.0 else 0.5 * (lo + hi)
        if abs(nxt - lam) <= 4.0 * 2.220446049250313e-16 * abs(lam):
            return lam, it, True
        if not (lo < nxt < hi):
            nxt = 0.5 * (lo + hi)
        lam = nxt
    return lam, maxit, False


# ---------------------------------------------------------------------------
# brute-force grid over a box intersected with (projected onto) a ball
# ---------------------------------------------------------------------------

def _grid_ball_topk(g, B, delta, center, hw, steps, k):
    n = g.shape[0]
    best_val = np.full(k, np.inf)
    best_pts = np.zeros((k, n))
    idx = np.zeros(n, dtype=np.int64)
    d = np.empty(n)
    total = steps ** n
    spacing = 2.0 * hw / (steps - 1)
    for _ in range(total):
        nrm2 = 0.0
        for j in range(n):
            d[j] = center[j] - hw + spacing * idx[j]
            nrm2 += d[j] * d[j]
        nrm = math.sqrt(nrm2)
        if nrm > delta:
            scale = delta / nrm
            for j in range(n):
                d[j] *= scale
        val = 0.0
        for i in range(n):
            acc = 0.0
            for j in range(n):
                acc += B[i, j] * d[j]
            val += d[i] * (g[i] + 0.5 * acc)
        if val < best_val[k - 1]:
            pos = k - 1
            while pos > 0 and best_val[pos - 1] > val:
                best_val[pos] = best_val[pos - 1]
                for j in range(n):
                    best_pts[pos, j] = best_pts[pos - 1, j]
                pos -= 1
            best_val[pos] = val
            for j in range(n):
                best_pts[pos, j] = d[j]
        # odometer increment
        j = 0
        while j < n:
            idx[j] += 1
            if idx[j] < steps:
                break
            idx[j] = 0
            j += 1
    return best_pts, best_val


def grid_ball_topk_numpy(g, B, delta, center, hw, steps, k, chunk=200_000):
    n = g.shape[0]
    axis = np.linspace(-hw, hw, steps)
    total = steps ** n
    best_val = np.full(k, np.inf)
    best_pts = np.zeros((k, n))
    for start in range(0, total, chunk):
        flat = np.arange(start, min(start + chunk, total))
        digits = np.empty((flat.size, n))
        rem = flat.copy()
        for j in range(n):
            digits[:, j] = axis[rem % steps]
            rem //= steps
        pts = center + digits
        nrm = np.linalg.norm(pts, axis=1)
        over = nrm > delta
        pts[over] *= (delta / nrm[over])[:, None]
        vals = pts @ g + 0.5 * np.einsum("ij,jk,ik->i", pts, B, pts)
        allv = np.concatenate([best_val, vals])
        allp = np.vstack([best_pts, pts])
        order = np.argsort(allv, kind="stable")[:k]
        best_val, best_pts = allv[order], allp[order]
    return best_pts, best_val


if USE_NUMBA:
    _jit = numba.njit(cache=True, nogil=True)
    kahan_mean_numba = _jit(_kahan_mean_2d)
    secular_newton_numba = _jit(_secular_newton)
    grid_ball_topk_numba = _jit(_grid_ball_topk)
else:
    kahan_mean_numba = secular_newton_numba = grid_ball_topk_numba = None


def kahan_mean(rows):
    """Compensated mean over the leading axis; trailing axes are flattened."""
    rows = np.ascontiguousarray(rows, dtype=np.float64)
    if rows.shape[0] == 0:
        raise ValueError("empty batch")
    if USE_NUMBA:
        tail = rows.shape[1:]
        flat = rows.reshape(rows.shape[0], -1)
        return kahan_mean_numba(flat).reshape(tail)
    return kahan_mean_numpy(rows)


def secular_newton(sig, gam2, delta, lo, hi, lam0, rtol=1e-14, maxit=200):
    sig = np.ascontiguousarray(sig, dtype=np.float64)
    gam2 = np.ascontiguousarray(gam2, dtype=np.float64)
    if USE_NUMBA:
        return secular_newton_numba(sig, gam2, float(delta), float(lo), float(hi),
                                    float(lam0), float(rtol), int(maxit))
    return secular_newton_numpy(sig, gam2, delta, lo, hi, lam0, rtol, maxit)


def grid_ball_topk(g, B, delta, center, hw, steps, k):
    g = np.ascontiguousarray(g, dtype=np.float64)
    B = np.ascontiguousarray(B, dtype=np.float64)
    center = np.ascontiguousarray(center, dtype=np.float64)
    if USE_NUMBA:
        return grid_ball_topk_numba(g, B, float(delta), center, float(hw), int(steps), int(k))
    return grid_ball_topk_numpy(g, B, delta, center, hw, steps, k)


def backend():
    return "numba" if USE_NUMBA else "numpy"
