# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Round loop of projected stochastic MAML for the regularized quadratic loss."""
from libc.math cimport sqrt, isfinite
from libc.stdint cimport int64_t
from libc.stdlib cimport malloc, free


cdef inline void _project(double* w, const double* c, Py_ssize_t d, double radius) noexcept nogil:
    cdef Py_ssize_t j
    cdef double s = 0.0, t
    for j in range(d):
        t = w[j] - c[j]
        s += t * t
    s = sqrt(s)
    if s > radius:
        for j in range(d):
            w[j] = c[j] + radius * (w[j] - c[j]) / s


def run_rounds(
    const double[:, :, ::1] x_in,
    const double[:, ::1] y_in,
    const double[:, :, ::1] x_out,
    const double[:, ::1] y_out,
    const int64_t[:, ::1] tasks,
    const int64_t[:, :, :, ::1] in_idx,
    const int64_t[:, :, :, ::1] out_idx,
    const double[::1] betas,
    double[::1] w,
    double[::1] w_sum,
    double[:, ::1] path,
    double alpha,
    double lam,
    double radius,
    const double[::1] center,
    bint local_project,
    bint server_project,
):
    """Advance ``w`` by ``tasks.shape[0]`` rounds in place.

    Returns ``None`` on success or ``(round, user, local_step)`` of the first
    non-finite local iterate.
    """
    cdef Py_ssize_t T = tasks.shape[0], r = tasks.shape[1]
    cdef Py_ssize_t tau = in_idx.shape[2], K = in_idx.shape[3], b = out_idx.shape[3]
    cdef Py_ssize_t d = w.shape[0]
    cdef Py_ssize_t t, u, s, kk, j, i, p
    cdef double beta, res, sq
    cdef double inv_k = 2.0 / K, inv_b = 2.0 / b, two_lam = 2.0 * lam
    cdef int64_t bad_t = -1, bad_u = -1, bad_s = -1
    cdef double* buf = <double*> malloc(7 * d * sizeof(double))
    if buf == NULL:
        raise MemoryError()
    cdef double* loc = buf
    cdef double* acc = buf + d
    cdef double* gin = buf + 2 * d
    cdef double* wa = buf + 3 * d
    cdef double* gout = buf + 4 * d
    cdef double* hv = buf + 5 * d
    cdef double* cen = buf + 6 * d
    for j in range(d):
        cen[j] = center[j]
    try:
        with nogil:
            for t in range(T):
                beta = betas[t]
                for j in range(d):
                    acc[j] = 0.0
                for u in range(r):
                    i = tasks[t, u]
                    for j in range(d):
                        loc[j] = w[j]
                    for s in range(tau):
                        for j in range(d):
                            gin[j] = 0.0
                        for kk in range(K):
                            p = in_idx[t, u, s, kk]
                            res = -y_in[i, p]
                            for j in range(d):
                                res = res + x_in[i, p, j] * loc[j]
                            for j in range(d):
                                gin[j] += res * x_in[i, p, j]
                        for j in range(d):
                            wa[j] = loc[j] - alpha * (two_lam * loc[j] + inv_k * gin[j])
                            gout[j] = 0.0
                        for kk in range(b):
                            p = out_idx[t, u, s, kk]
                            res = -y_out[i, p]
                            for j in range(d):
                                res = res + x_out[i, p, j] * wa[j]
                            for j in range(d):
                                gout[j] += res * x_out[i, p, j]
                        for j in range(d):
                            gout[j] = two_lam * wa[j] + inv_b * gout[j]
                            hv[j] = 0.0
                        for kk in range(K):
                            p = in_idx[t, u, s, kk]
                            res = 0.0
                            for j in range(d):
                                res = res + x_in[i, p, j] * gout[j]
                            for j in range(d):
                                hv[j] += res * x_in[i, p, j]
                        sq = 0.0
                        for j in range(d):
                            loc[j] = loc[j] - beta * (gout[j] - alpha * (two_lam * gout[j] + inv_k * hv[j]))
                            sq += loc[j] * loc[j]
                        if not isfinite(sq):
                            bad_t = t
                            bad_u = u
                            bad_s = s
                            break
                        if local_project:
                            _project(loc, cen, d, radius)
                    if bad_t >= 0:
                        break
                    for j in range(d):
                        acc[j] += loc[j]
                if bad_t >= 0:
                    break
                for j in range(d):
                    w[j] = acc[j] / r
                if server_project:
                    _project(&w[0], cen, d, radius)
                for j in range(d):
                    w_sum[j] += w[j]
                    path[t, j] = w[j]
    finally:
        free(buf)
    if bad_t >= 0:
        return (int(bad_t), int(bad_u), int(bad_s))
    return None
