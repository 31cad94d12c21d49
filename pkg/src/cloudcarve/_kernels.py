"""Compiled inner loops.

Every kernel reduces in a fixed order (per ray, or per x-row followed by a
sequential sum over rows), so results are bit-identical for any numba thread
count.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit, prange


@njit(cache=True, inline="always")
def _lerp(a, b, t):
    return a * (1.0 - t) + b * t


@njit(cache=True)
def trilinear(data, gx, gy, gz):
    """Same semantics and arithmetic order as ``volume.sample_trilinear``."""
    nx, ny, nz = data.shape
    if not (0.0 <= gx <= nx - 1 and 0.0 <= gy <= ny - 1 and 0.0 <= gz <= nz - 1):
        return 0.0
    x0 = min(int(math.floor(gx)), max(nx - 2, 0))
    y0 = min(int(math.floor(gy)), max(ny - 2, 0))
    z0 = min(int(math.floor(gz)), max(nz - 2, 0))
    fx = gx - x0
    fy = gy - y0
    fz = gz - z0
    x1 = min(x0 + 1, nx - 1)
    y1 = min(y0 + 1, ny - 1)
    z1 = min(z0 + 1, nz - 1)
    c00 = _lerp(np.float64(data[x0, y0, z0]), np.float64(data[x1, y0, z0]), fx)
    c10 = _lerp(np.float64(data[x0, y1, z0]), np.float64(data[x1, y1, z0]), fx)
    c01 = _lerp(np.float64(data[x0, y0, z1]), np.float64(data[x1, y0, z1]), fx)
    c11 = _lerp(np.float64(data[x0, y1, z1]), np.float64(data[x1, y1, z1]), fx)
    return _lerp(_lerp(c00, c10, fy), _lerp(c01, c11, fy), fz)


@njit(cache=True, inline="always")
def _sample_ray(data, origin, inv_vs, center, d, t):
    gx = (center[0] + t * d[0] - origin[0]) * inv_vs
    gy = (center[1] + t * d[1] - origin[1]) * inv_vs
    gz = (center[2] + t * d[2] - origin[2]) * inv_vs
    return trilinear(data, gx, gy, gz)


@njit(cache=True, parallel=True)
def march_first_crossing(data, origin, voxel_size, center, dirs, t0, t1, step, threshold):
    """Ray length to the first sample with density >= threshold (inf if none).

    One bisection between the bracketing samples; the returned point is the
    nearest one known to be at or above the threshold.
    """
    n = dirs.shape[0]
    out = np.full(n, np.inf)
    inv_vs = 1.0 / voxel_size
    for r in prange(n):
        if not t1[r] >= t0[r]:
            continue
        d = dirs[r]
        k = 0
        prev = -1.0
        while True:
            t = t0[r] + k * step
            if t > t1[r]:
                break
            if _sample_ray(data, origin, inv_vs, center, d, t) >= threshold:
                hit = t
                if prev >= 0.0:
                    mid = 0.5 * (prev + t)
                    if _sample_ray(data, origin, inv_vs, center, d, mid) >= threshold:
                        hit = mid
                out[r] = hit
                break
            prev = t
            k += 1
    return out


@njit(cache=True, parallel=True)
def march_optical_depth(data, origin, voxel_size, center, dirs, t0, t1, step):
    """Midpoint-rule optical depth per ray and the ray length at which the
    accumulated opacity reaches half of the ray's total opacity."""
    n = dirs.shape[0]
    tau = np.zeros(n)
    t_half = np.full(n, np.inf)
    inv_vs = 1.0 / voxel_size
    for r in prange(n):
        if not t1[r] > t0[r]:
            continue
        d = dirs[r]
        length = t1[r] - t0[r]
        nseg = int(math.ceil(length / step))
        acc = 0.0
        for k in range(nseg):
            a = t0[r] + k * step
            b = min(a + step, t1[r])
            acc += _sample_ray(data, origin, inv_vs, center, d, 0.5 * (a + b)) * (b - a)
        tau[r] = acc
        if acc <= 0.0:
            continue
        target = -math.log(1.0 - 0.5 * (1.0 - math.exp(-acc)))
        run = 0.0
        for k in range(nseg):
            a = t0[r] + k * step
            b = min(a + step, t1[r])
            sigma = _sample_ray(data, origin, inv_vs, center, d, 0.5 * (a + b))
            seg = sigma * (b - a)
            if seg > 0.0 and run + seg >= target:
                t_half[r] = a + (target - run) / sigma
                break
            run += seg
    return tau, t_half


@njit(cache=True, parallel=True)
def variance_row_sums(frames, colmask, xi0, xi1, xw0, xw1, yi0, yi1, yw0, yw1, x0, x1, y0, y1):
    """Per-x-row sums of the per-voxel population variance across frames.

    Frame ``t`` is sampled at ``(ix, iy) -> bilinear(frames[t])`` with the
    precomputed per-frame tap indices/weights; z is never shifted. Only
    columns in ``[x0, x1) x [y0, y1)`` are summed.
    """
    T, nx, ny, nz = frames.shape
    rows = np.zeros(x1 - x0)
    for r in prange(x1 - x0):
        ix = x0 + r
        ref = np.empty(nz)
        s1 = np.empty(nz)
        s2 = np.empty(nz)
        acc = 0.0
        for iy in range(y0, y1):
            touched = False
            for t in range(T):
                if (xw0[t, ix] != 0.0 or xw1[t, ix] != 0.0) and (yw0[t, iy] != 0.0 or yw1[t, iy] != 0.0):
                    a0 = xi0[t, ix]
                    a1 = xi1[t, ix]
                    b0 = yi0[t, iy]
                    b1 = yi1[t, iy]
                    if colmask[t, a0, b0] or colmask[t, a1, b0] or colmask[t, a0, b1] or colmask[t, a1, b1]:
                        touched = True
                        break
            if not touched:
                continue
            for t in range(T):
                a0 = xi0[t, ix]
                a1 = xi1[t, ix]
                b0 = yi0[t, iy]
                b1 = yi1[t, iy]
                wx0 = xw0[t, ix]
                wx1 = xw1[t, ix]
                wy0 = yw0[t, iy]
                wy1 = yw1[t, iy]
                f = frames[t]
                if t == 0:
                    for iz in range(nz):
                        c0 = np.float64(f[a0, b0, iz]) * wx0 + np.float64(f[a1, b0, iz]) * wx1
                        c1 = np.float64(f[a0, b1, iz]) * wx0 + np.float64(f[a1, b1, iz]) * wx1
                        ref[iz] = c0 * wy0 + c1 * wy1
                        s1[iz] = 0.0
                        s2[iz] = 0.0
                else:
                    for iz in range(nz):
                        c0 = np.float64(f[a0, b0, iz]) * wx0 + np.float64(f[a1, b0, iz]) * wx1
                        c1 = np.float64(f[a0, b1, iz]) * wx0 + np.float64(f[a1, b1, iz]) * wx1
                        dv = c0 * wy0 + c1 * wy1 - ref[iz]
                        s1[iz] += dv
                        s2[iz] += dv * dv
            for iz in range(nz):
                m = s1[iz] / T
                var = s2[iz] / T - m * m
                if var > 0.0:
                    acc += var
        rows[r] = acc
    return rows


def ordered_sum(values: np.ndarray) -> float:
    total = 0.0
    for v in values.tolist():
        total += v
    return total
