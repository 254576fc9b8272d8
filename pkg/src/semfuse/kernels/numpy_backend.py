"""Pure-NumPy implementation of the per-frame fusion kernels.

Both backends implement the same three entry points:

``frame_pass``
    Project every voxel center into a frame, compute the signed-distance
    update, the per-voxel fusing weight, and (optionally) camera distance and
    incidence cosine. Results land in caller-preallocated scratch arrays;
    nothing in the grid is modified. ``flags`` bit 0 marks voxels that receive
    a TSDF update (in view, valid depth, not occluded beyond the truncation
    band); bit 1 marks voxels inside the truncation band, which are the ones
    that receive semantic observations.

``apply_tsdf``
    Apply the incremental weighted-average update to ``sdf``/``weight`` for
    all flagged voxels. Returns the number of voxels updated.

``scatter_semantic``
    Accumulate one frame of semantic observations into the per-voxel running
    sums. Voxel ids within a frame are unique, so the scatter is race-free.

The ``threads`` argument is accepted for interface parity and ignored here.
"""

from __future__ import annotations

import numpy as np

# weight scheme ids shared with the compiled backend
SCHEME_CONSTANT = 0
SCHEME_NORMAL_DISTANCE = 1
SCHEME_QUADRATIC_DISTANCE = 2


def _sdf_gradient(sdf3, wpos3, voxel_size):
    """Per-axis finite-difference gradient, central where both neighbors are
    observed, one-sided otherwise, zero when no observed neighbor exists."""
    grads = []
    for axis in range(3):
        sp = np.roll(sdf3, -1, axis=axis)
        sm = np.roll(sdf3, 1, axis=axis)
        vp = np.roll(wpos3, -1, axis=axis)
        vm = np.roll(wpos3, 1, axis=axis)
        # voxels on the boundary have no neighbor on the rolled-in side
        edge_hi = [slice(None)] * 3
        edge_hi[axis] = -1
        edge_lo = [slice(None)] * 3
        edge_lo[axis] = 0
        vp = vp.copy()
        vm = vm.copy()
        vp[tuple(edge_hi)] = False
        vm[tuple(edge_lo)] = False
        g = np.zeros_like(sdf3, dtype=np.float64)
        both = vp & vm
        g[both] = (sp[both].astype(np.float64) - sm[both]) / (2.0 * voxel_size)
        only_p = vp & ~vm
        g[only_p] = (sp[only_p].astype(np.float64) - sdf3[only_p]) / voxel_size
        only_m = vm & ~vp
        g[only_m] = (sdf3[only_m].astype(np.float64) - sm[only_m]) / voxel_size
        grads.append(g.reshape(-1))
    return grads


def frame_pass(
    sdf,
    weight,
    dims,
    origin,
    voxel_size,
    truncation,
    pose_inv,
    fx,
    fy,
    cx,
    cy,
    width,
    height,
    depth,
    scheme_id,
    scheme_params,
    need_geom,
    threads,
    pix,
    delta,
    wvox,
    dist,
    inc,
    flags,
):
    dx, dy, dz = (int(v) for v in dims)
    r = pose_inv[:3, :3]
    t = pose_inv[:3, 3]
    xs = origin[0] + (np.arange(dx, dtype=np.float64) + 0.5) * voxel_size
    ys = origin[1] + (np.arange(dy, dtype=np.float64) + 0.5) * voxel_size
    zs = origin[2] + (np.arange(dz, dtype=np.float64) + 0.5) * voxel_size

    def cam_axis(row):
        return (
            r[row, 0] * xs[:, None, None]
            + r[row, 1] * ys[None, :, None]
            + r[row, 2] * zs[None, None, :]
            + t[row]
        ).reshape(-1)

    camx, camy, camz = cam_axis(0), cam_axis(1), cam_axis(2)

    in_front = camz > 1e-9
    zsafe = np.where(in_front, camz, 1.0)
    u = np.rint(fx * camx / zsafe + cx)
    v = np.rint(fy * camy / zsafe + cy)
    in_img = in_front & (u >= 0) & (u < width) & (v >= 0) & (v < height)
    pl = np.zeros(camx.shape, dtype=np.int64)
    pl[in_img] = (v[in_img].astype(np.int64) * width + u[in_img].astype(np.int64))
    d = depth.reshape(-1)[pl]
    d_valid = in_img & np.isfinite(d) & (d > 0)

    draw = d.astype(np.float64) - camz
    upd = d_valid & (draw >= -truncation)
    band = d_valid & (np.abs(draw) <= truncation)

    pix[:] = pl
    delta[:] = np.where(d_valid, np.minimum(draw, truncation), 0.0).astype(np.float32)
    flags[:] = upd.astype(np.uint8) | (band.astype(np.uint8) << 1)

    want_geom = bool(need_geom) or scheme_id != SCHEME_CONSTANT
    if want_geom:
        dvals = np.sqrt(camx * camx + camy * camy + camz * camz)
        dist[:] = dvals.astype(np.float32)
        gx, gy, gz = _sdf_gradient(
            sdf.reshape(dx, dy, dz), (weight > 0).reshape(dx, dy, dz), voxel_size
        )
        gn = np.sqrt(gx * gx + gy * gy + gz * gz)
        # world-frame viewing ray (camera center -> voxel), from camera coords
        rwx = r[0, 0] * camx + r[1, 0] * camy + r[2, 0] * camz
        rwy = r[0, 1] * camx + r[1, 1] * camy + r[2, 1] * camz
        rwz = r[0, 2] * camx + r[1, 2] * camy + r[2, 2] * camz
        dsafe = np.where(dvals > 1e-12, dvals, 1.0)
        dot = np.abs(rwx * gx + rwy * gy + rwz * gz) / dsafe
        cosv = np.where(gn > 1e-9, np.minimum(dot / np.where(gn > 1e-9, gn, 1.0), 1.0), 1.0)
        inc[:] = cosv.astype(np.float32)
    else:
        dvals = np.zeros(camx.shape, dtype=np.float64)
        cosv = np.ones(camx.shape, dtype=np.float64)
        dist.fill(0.0)
        inc.fill(1.0)

    if scheme_id == SCHEME_CONSTANT:
        wvox.fill(1.0)
    elif scheme_id == SCHEME_NORMAL_DISTANCE:
        floor, d_ref = scheme_params[0], scheme_params[1]
        w = np.maximum(cosv, floor) * (d_ref / np.maximum(dvals, d_ref))
        wvox[:] = w.astype(np.float32)
    elif scheme_id == SCHEME_QUADRATIC_DISTANCE:
        floor, d_opt, rad = scheme_params[0], scheme_params[1], scheme_params[2]
        q = (dvals - d_opt) / rad
        wvox[:] = np.maximum(floor, 1.0 - q * q).astype(np.float32)
    else:
        raise ValueError(f"unknown weight scheme id {scheme_id}")


def apply_tsdf(sdf, weight, delta, wvox, flags, threads):
    m = (flags & 1).astype(bool)
    w_old = weight[m]
    wt = wvox[m]
    wsum = w_old + wt
    sdf[m] = (w_old * sdf[m] + wt * delta[m]) / wsum
    weight[m] = wsum
    return int(np.count_nonzero(m))


def scatter_semantic(
    log_sum,
    lin_sum,
    votes,
    weight_sum,
    obs_count,
    idx,
    probs,
    w,
    alpha,
    want_log,
    want_lin,
    want_votes,
    threads,
):
    k = probs.shape[1]
    if want_log:
        log_sum[idx] += w[:, None] * np.log((probs + alpha) / (1.0 + k * alpha))
    if want_lin:
        lin_sum[idx] += w[:, None] * probs
    if want_votes:
        votes[idx, np.argmax(probs, axis=1)] += 1
    weight_sum[idx] += w
    obs_count[idx] += 1
