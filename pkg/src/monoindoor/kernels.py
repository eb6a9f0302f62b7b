"""Non-differentiable numeric kernels with numba and numpy implementations.

Each public function dispatches on :data:`monoindoor._accel.USE_NUMBA`. The
``*_numba`` and ``*_numpy`` variants are importable directly so tests and the
benchmark can compare them.
"""

from __future__ import annotations

import math

import numpy as np

from . import _accel
from ._accel import njit


def _pick(fast, slow, backend):
    if backend is None:
        backend = _accel.backend()
    if backend == "numba":
        if not _accel.HAVE_NUMBA:
            raise RuntimeError("numba backend requested but numba is not installed")
        return fast
    if backend == "numpy":
        return slow
    raise ValueError(f"unknown backend {backend!r}")

# ---------------------------------------------------------------------------
# Ray-cast renderer for textured planes
# ---------------------------------------------------------------------------


@njit
def _raycast_numba(center, r_c2w, fx, fy, cx, cy, height, width,
                   normals, offsets, u_axes, v_axes, anchors, tints,
                   wave_freq, wave_phase, wave_amp, noise, noise_cell, noise_amp):
    n_planes = normals.shape[0]
    n_waves = wave_freq.shape[1]
    grid = noise.shape[1]
    image = np.zeros((height, width, 3))
    depth = np.zeros((height, width))
    face = np.full((height, width), -1, dtype=np.int64)
    for v in range(height):
        for u in range(width):
            dcx = (u - cx) / fx
            dcy = (v - cy) / fy
            dx = r_c2w[0, 0] * dcx + r_c2w[0, 1] * dcy + r_c2w[0, 2]
            dy = r_c2w[1, 0] * dcx + r_c2w[1, 1] * dcy + r_c2w[1, 2]
            dz = r_c2w[2, 0] * dcx + r_c2w[2, 1] * dcy + r_c2w[2, 2]
            best_t = np.inf
            best_p = -1
            for p in range(n_planes):
                nd = normals[p, 0] * dx + normals[p, 1] * dy + normals[p, 2] * dz
                if abs(nd) < 1e-12:
                    continue
                no = normals[p, 0] * center[0] + normals[p, 1] * center[1] + normals[p, 2] * center[2]
                t = (offsets[p] - no) / nd
                if t > 1e-9 and t < best_t:
                    best_t = t
                    best_p = p
            if best_p < 0:
                continue
            p = best_p
            hx = center[0] + best_t * dx - anchors[p, 0]
            hy = center[1] + best_t * dy - anchors[p, 1]
            hz = center[2] + best_t * dz - anchors[p, 2]
            tu = hx * u_axes[p, 0] + hy * u_axes[p, 1] + hz * u_axes[p, 2]
            tv = hx * v_axes[p, 0] + hy * v_axes[p, 1] + hz * v_axes[p, 2]
            val = 0.5
            for f in range(n_waves):
                arg = 2.0 * math.pi * (wave_freq[p, f, 0] * tu + wave_freq[p, f, 1] * tv) + wave_phase[p, f]
                val += wave_amp[p, f] * math.sin(arg)
            gu = tu / noise_cell
            gv = tv / noise_cell
            fu = math.floor(gu)
            fv = math.floor(gv)
            au = gu - fu
            av = gv - fv
            iu0 = int(fu) % grid
            iv0 = int(fv) % grid
            iu1 = (iu0 + 1) % grid
            iv1 = (iv0 + 1) % grid
            nval = ((1.0 - au) * (1.0 - av) * noise[p, iv0, iu0] + au * (1.0 - av) * noise[p, iv0, iu1]
                    + (1.0 - au) * av * noise[p, iv1, iu0] + au * av * noise[p, iv1, iu1])
            val += noise_amp * (nval - 0.5)
            for c in range(3):
                x = tints[p, c] * val
                image[v, u, c] = min(max(x, 0.0), 1.0)
            depth[v, u] = best_t
            face[v, u] = p
    return image, depth, face


def _raycast_numpy(center, r_c2w, fx, fy, cx, cy, height, width,
                   normals, offsets, u_axes, v_axes, anchors, tints,
                   wave_freq, wave_phase, wave_amp, noise, noise_cell, noise_amp):
    vv, uu = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64),
                         indexing="ij")
    d_cam = np.stack([(uu - cx) / fx, (vv - cy) / fy, np.ones_like(uu)], axis=-1).reshape(-1, 3)
    d_world = d_cam @ r_c2w.T
    nd = d_world @ normals.T  # (N, P)
    no = normals @ center  # (P,)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (offsets[None, :] - no[None, :]) / nd
    t = np.where((np.abs(nd) >= 1e-12) & (t > 1e-9), t, np.inf)
    best_p = np.argmin(t, axis=1)
    best_t = t[np.arange(t.shape[0]), best_p]
    hit = np.isfinite(best_t)
    safe_t = np.where(hit, best_t, 0.0)
    rel = center[None, :] + safe_t[:, None] * d_world - anchors[best_p]
    tu = np.einsum("ij,ij->i", rel, u_axes[best_p])
    tv = np.einsum("ij,ij->i", rel, v_axes[best_p])
    arg = 2.0 * np.pi * (wave_freq[best_p, :, 0] * tu[:, None] + wave_freq[best_p, :, 1] * tv[:, None])
    val = 0.5 + np.sum(wave_amp[best_p] * np.sin(arg + wave_phase[best_p]), axis=1)
    grid = noise.shape[1]
    gu = tu / noise_cell
    gv = tv / noise_cell
    fu = np.floor(gu)
    fv = np.floor(gv)
    au = gu - fu
    av = gv - fv
    iu0 = fu.astype(np.int64) % grid
    iv0 = fv.astype(np.int64) % grid
    iu1 = (iu0 + 1) % grid
    iv1 = (iv0 + 1) % grid
    nval = ((1.0 - au) * (1.0 - av) * noise[best_p, iv0, iu0] + au * (1.0 - av) * noise[best_p, iv0, iu1]
            + (1.0 - au) * av * noise[best_p, iv1, iu0] + au * av * noise[best_p, iv1, iu1])
    val = val + noise_amp * (nval - 0.5)
    image = np.clip(tints[best_p] * val[:, None], 0.0, 1.0)
    image[~hit] = 0.0
    depth = np.where(hit, best_t, 0.0)
    face = np.where(hit, best_p, -1)
    return (image.reshape(height, width, 3), depth.reshape(height, width),
            face.reshape(height, width).astype(np.int64))


def raycast_planes(center, r_c2w, intrinsics, planes, noise_cell, noise_amp, backend=None):
    """Render a set of textured planes seen from a pinhole camera.

    ``planes`` is a mapping of float64 arrays: ``normals`` (P,3), ``offsets``
    (P,), ``u_axes``/``v_axes``/``anchors`` (P,3), ``tints`` (P,3),
    ``wave_freq`` (P,F,2), ``wave_phase``/``wave_amp`` (P,F), ``noise``
    (P,G,G). Each ray takes the nearest positive hit. Returns the color image
    (H,W,3) in [0,1], the z-depth (H,W) and the hit plane index (-1 = miss).
    ``backend`` forces ``"numba"`` or ``"numpy"``; default follows the env flag.
    """
    fx, fy, cx, cy, width, height = intrinsics
    fn = _pick(_raycast_numba, _raycast_numpy, backend)
    return fn(np.ascontiguousarray(center, dtype=np.float64),
              np.ascontiguousarray(r_c2w, dtype=np.float64),
              float(fx), float(fy), float(cx), float(cy), int(height), int(width),
              planes["normals"], planes["offsets"], planes["u_axes"], planes["v_axes"],
              planes["anchors"], planes["tints"], planes["wave_freq"], planes["wave_phase"],
              planes["wave_amp"], planes["noise"], float(noise_cell), float(noise_amp))


# ---------------------------------------------------------------------------
# Reference bilinear sampler (clamp-to-edge), used as an oracle for the
# differentiable torch sampler and by the dataset self-consistency check.
# ---------------------------------------------------------------------------


# slack for pixels that land on the border after float round-off
BOUND_EPS = 1e-4


@njit
def _bilinear_numba(src, coords):
    h, w, c = src.shape
    oh, ow = coords.shape[0], coords.shape[1]
    out = np.empty((oh, ow, c))
    mask = np.zeros((oh, ow), dtype=np.bool_)
    for i in range(oh):
        for j in range(ow):
            x = coords[i, j, 0]
            y = coords[i, j, 1]
            mask[i, j] = x >= -BOUND_EPS and x <= w - 1 + BOUND_EPS and y >= -BOUND_EPS and y <= h - 1 + BOUND_EPS
            x = min(max(x, 0.0), w - 1.0)
            y = min(max(y, 0.0), h - 1.0)
            x0 = int(math.floor(x))
            y0 = int(math.floor(y))
            x1 = min(x0 + 1, w - 1)
            y1 = min(y0 + 1, h - 1)
            ax = x - x0
            ay = y - y0
            for k in range(c):
                out[i, j, k] = ((1.0 - ax) * (1.0 - ay) * src[y0, x0, k] + ax * (1.0 - ay) * src[y0, x1, k]
                                + (1.0 - ax) * ay * src[y1, x0, k] + ax * ay * src[y1, x1, k])
    return out, mask


def _bilinear_numpy(src, coords):
    h, w, _ = src.shape
    x = coords[..., 0]
    y = coords[..., 1]
    mask = (x >= -BOUND_EPS) & (x <= w - 1 + BOUND_EPS) & (y >= -BOUND_EPS) & (y <= h - 1 + BOUND_EPS)
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = (x - x0)[..., None]
    ay = (y - y0)[..., None]
    out = ((1.0 - ax) * (1.0 - ay) * src[y0, x0] + ax * (1.0 - ay) * src[y0, x1]
           + (1.0 - ax) * ay * src[y1, x0] + ax * ay * src[y1, x1])
    return out, mask


def bilinear_sample_ref(src, coords, backend=None):
    """Sample ``src`` (H,W,C) at pixel ``coords`` (h,w,2) given as (u, v).

    Integer coordinates address pixel centers. Out-of-range coordinates are
    clamped to the edge and reported ``False`` in the returned mask.
    """
    src = np.ascontiguousarray(src, dtype=np.float64)
    if src.ndim == 2:
        out, mask = bilinear_sample_ref(src[..., None], coords, backend)
        return out[..., 0], mask
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    fn = _pick(_bilinear_numba, _bilinear_numpy, backend)
    return fn(src, coords)


# ---------------------------------------------------------------------------
# Depth error statistics
# ---------------------------------------------------------------------------


@njit
def _depth_stats_numba(pred, gt):
    n = pred.shape[0]
    abs_rel = 0.0
    sq_rel = 0.0
    sq = 0.0
    sq_log = 0.0
    d1 = 0
    d2 = 0
    d3 = 0
    for i in range(n):
        p = pred[i]
        g = gt[i]
        diff = g - p
        abs_rel += abs(diff) / g
        sq_rel += diff * diff / g
        sq += diff * diff
        dl = math.log(g) - math.log(p)
        sq_log += dl * dl
        ratio = max(p / g, g / p)
        if ratio < 1.25:
            d1 += 1
        if ratio < 1.25 ** 2:
            d2 += 1
        if ratio < 1.25 ** 3:
            d3 += 1
    return np.array([abs_rel / n, sq_rel / n, math.sqrt(sq / n), math.sqrt(sq_log / n),
                     d1 / n, d2 / n, d3 / n])


def _depth_stats_numpy(pred, gt):
    diff = gt - pred
    ratio = np.maximum(pred / gt, gt / pred)
    return np.array([
        np.mean(np.abs(diff) / gt),
        np.mean(diff ** 2 / gt),
        np.sqrt(np.mean(diff ** 2)),
        np.sqrt(np.mean((np.log(gt) - np.log(pred)) ** 2)),
        np.mean(ratio < 1.25),
        np.mean(ratio < 1.25 ** 2),
        np.mean(ratio < 1.25 ** 3),
    ])


def depth_error_stats(pred, gt, backend=None):
    """(abs_rel, sq_rel, rms, rms_log, delta1, delta2, delta3) over flat arrays."""
    pred = np.ascontiguousarray(pred, dtype=np.float64).ravel()
    gt = np.ascontiguousarray(gt, dtype=np.float64).ravel()
    fn = _pick(_depth_stats_numba, _depth_stats_numpy, backend)
    return fn(pred, gt)
