# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
# cython: language_level=3
"""Compiled fusion kernels.

Same contract as ``numpy_backend``; loops are parallelized with OpenMP over
voxels (``frame_pass``/``apply_tsdf``) or observations (``scatter_semantic``).
All writes are indexed by the loop variable, and within one frame every voxel
appears at most once, so the parallel loops are race-free and the results do
not depend on the thread count.
"""

cimport openmp
from cython.parallel cimport prange
from libc.math cimport fabs, isfinite, log, rint, sqrt

SCHEME_CONSTANT = 0
SCHEME_NORMAL_DISTANCE = 1
SCHEME_QUADRATIC_DISTANCE = 2


cdef inline int _num_threads(int threads) noexcept nogil:
    if threads > 0:
        return threads
    return openmp.omp_get_max_threads()


def frame_pass(
    float[::1] sdf,
    float[::1] weight,
    dims,
    origin,
    double voxel_size,
    double truncation,
    double[:, ::1] pose_inv,
    double fx,
    double fy,
    double cx,
    double cy,
    int width,
    int height,
    float[:, ::1] depth,
    int scheme_id,
    double[::1] scheme_params,
    bint need_geom,
    int threads,
    long long[::1] pix,
    float[::1] delta,
    float[::1] wvox,
    float[::1] dist,
    float[::1] inc,
    unsigned char[::1] flags,
):
    cdef Py_ssize_t dx = dims[0], dy = dims[1], dz = dims[2]
    cdef Py_ssize_t n = dx * dy * dz
    cdef Py_ssize_t stride_x = dy * dz
    cdef double ox = origin[0], oy = origin[1], oz = origin[2]
    cdef double r00 = pose_inv[0, 0], r01 = pose_inv[0, 1], r02 = pose_inv[0, 2], tx = pose_inv[0, 3]
    cdef double r10 = pose_inv[1, 0], r11 = pose_inv[1, 1], r12 = pose_inv[1, 2], ty = pose_inv[1, 3]
    cdef double r20 = pose_inv[2, 0], r21 = pose_inv[2, 1], r22 = pose_inv[2, 2], tz = pose_inv[2, 3]
    cdef double p_a = scheme_params[0], p_b = scheme_params[1], p_c = scheme_params[2]
    cdef bint want_geom = need_geom or scheme_id != 0
    cdef int nt = _num_threads(threads)
    cdef Py_ssize_t i, ix, iy, iz, ui, vi, pixel
    cdef double wxx, wyy, wzz, cxx, cyy, czz, uu, vv, draw, dl
    cdef double dist_d, gxx, gyy, gzz, gnorm, rwx, rwy, rwz, dsafe, dotv, cosv, wv, q, denom
    cdef float dd
    cdef unsigned char fl
    cdef bint vp, vm

    with nogil:
        for i in prange(n, schedule="static", num_threads=nt):
            iz = i % dz
            iy = (i // dz) % dy
            ix = i // stride_x
            wxx = ox + (ix + 0.5) * voxel_size
            wyy = oy + (iy + 0.5) * voxel_size
            wzz = oz + (iz + 0.5) * voxel_size
            cxx = r00 * wxx + r01 * wyy + r02 * wzz + tx
            cyy = r10 * wxx + r11 * wyy + r12 * wzz + ty
            czz = r20 * wxx + r21 * wyy + r22 * wzz + tz

            fl = 0
            pixel = 0
            dl = 0.0
            if czz > 1e-9:
                uu = rint(fx * cxx / czz + cx)
                vv = rint(fy * cyy / czz + cy)
                if uu >= 0 and uu < width and vv >= 0 and vv < height:
                    ui = <Py_ssize_t> uu
                    vi = <Py_ssize_t> vv
                    pixel = vi * width + ui
                    dd = depth[vi, ui]
                    if isfinite(dd) and dd > 0:
                        draw = (<double> dd) - czz
                        dl = draw if draw < truncation else truncation
                        if draw >= -truncation:
                            fl = 1
                        if fabs(draw) <= truncation:
                            fl = fl | 2
            pix[i] = pixel
            delta[i] = <float> dl
            flags[i] = fl

            dist_d = 0.0
            cosv = 1.0
            if want_geom:
                dist_d = sqrt(cxx * cxx + cyy * cyy + czz * czz)
                # finite-difference surface normal from the current field
                vp = ix + 1 < dx and weight[i + stride_x] > 0
                vm = ix > 0 and weight[i - stride_x] > 0
                if vp and vm:
                    gxx = ((<double> sdf[i + stride_x]) - (<double> sdf[i - stride_x])) / (2.0 * voxel_size)
                elif vp:
                    gxx = ((<double> sdf[i + stride_x]) - (<double> sdf[i])) / voxel_size
                elif vm:
                    gxx = ((<double> sdf[i]) - (<double> sdf[i - stride_x])) / voxel_size
                else:
                    gxx = 0.0
                vp = iy + 1 < dy and weight[i + dz] > 0
                vm = iy > 0 and weight[i - dz] > 0
                if vp and vm:
                    gyy = ((<double> sdf[i + dz]) - (<double> sdf[i - dz])) / (2.0 * voxel_size)
                elif vp:
                    gyy = ((<double> sdf[i + dz]) - (<double> sdf[i])) / voxel_size
                elif vm:
                    gyy = ((<double> sdf[i]) - (<double> sdf[i - dz])) / voxel_size
                else:
                    gyy = 0.0
                vp = iz + 1 < dz and weight[i + 1] > 0
                vm = iz > 0 and weight[i - 1] > 0
                if vp and vm:
                    gzz = ((<double> sdf[i + 1]) - (<double> sdf[i - 1])) / (2.0 * voxel_size)
                elif vp:
                    gzz = ((<double> sdf[i + 1]) - (<double> sdf[i])) / voxel_size
                elif vm:
                    gzz = ((<double> sdf[i]) - (<double> sdf[i - 1])) / voxel_size
                else:
                    gzz = 0.0
                gnorm = sqrt(gxx * gxx + gyy * gyy + gzz * gzz)
                rwx = r00 * cxx + r10 * cyy + r20 * czz
                rwy = r01 * cxx + r11 * cyy + r21 * czz
                rwz = r02 * cxx + r12 * cyy + r22 * czz
                dsafe = dist_d if dist_d > 1e-12 else 1.0
                if gnorm > 1e-9:
                    dotv = fabs(rwx * gxx + rwy * gyy + rwz * gzz) / dsafe / gnorm
                    cosv = dotv if dotv < 1.0 else 1.0
                dist[i] = <float> dist_d
                inc[i] = <float> cosv
            else:
                dist[i] = 0.0
                inc[i] = 1.0

            if scheme_id == 0:  # constant
                wv = 1.0
            elif scheme_id == 1:  # normal-distance
                wv = cosv if cosv > p_a else p_a
                denom = dist_d if dist_d > p_b else p_b
                wv = wv * (p_b / denom)
            else:
                q = (dist_d - p_b) / p_c
                wv = 1.0 - q * q
                if wv < p_a:
                    wv = p_a
            wvox[i] = <float> wv


def apply_tsdf(
    float[::1] sdf,
    float[::1] weight,
    float[::1] delta,
    float[::1] wvox,
    unsigned char[::1] flags,
    int threads,
):
    cdef Py_ssize_t n = sdf.shape[0]
    cdef Py_ssize_t i
    cdef long long count = 0
    cdef float w_old, wt
    cdef int nt = _num_threads(threads)
    with nogil:
        for i in prange(n, schedule="static", num_threads=nt):
            if flags[i] & 1:
                w_old = weight[i]
                wt = wvox[i]
                sdf[i] = (w_old * sdf[i] + wt * delta[i]) / (w_old + wt)
                weight[i] = w_old + wt
                count += 1
    return int(count)


def scatter_semantic(
    double[:, ::1] log_sum,
    double[:, ::1] lin_sum,
    int[:, ::1] votes,
    double[::1] weight_sum,
    int[::1] obs_count,
    long long[::1] idx,
    double[:, ::1] probs,
    double[::1] w,
    double alpha,
    bint want_log,
    bint want_lin,
    bint want_votes,
    int threads,
):
    cdef Py_ssize_t b = idx.shape[0]
    cdef Py_ssize_t k = probs.shape[1]
    cdef double denom = 1.0 + k * alpha
    cdef Py_ssize_t i, j, vid, am
    cdef double best
    cdef int nt = _num_threads(threads)
    with nogil:
        for i in prange(b, schedule="static", num_threads=nt):
            vid = idx[i]
            if want_log:
                for j in range(k):
                    log_sum[vid, j] += w[i] * log((probs[i, j] + alpha) / denom)
            if want_lin:
                for j in range(k):
                    lin_sum[vid, j] += w[i] * probs[i, j]
            if want_votes:
                am = 0
                best = probs[i, 0]
                for j in range(1, k):
                    if probs[i, j] > best:
                        best = probs[i, j]
                        am = j
                votes[vid, am] += 1
            weight_sum[vid] += w[i]
            obs_count[vid] += 1
