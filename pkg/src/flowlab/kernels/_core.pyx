# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled stepping kernel; scalar loops over points and modes.

Semantics match kernels/pure.py: Heun (scheme 0) or Ito-corrected Euler
(scheme 1) advancing n lifted points and optional tangent frames through
S steps.  Returns -1 on success or the index of the first step with a
non-finite state.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, sin, isfinite

cnp.import_array()

cdef enum:               # compile-time scratch bounds
    MAX_DIM = 8          # torus dimension
    MAX_FIELDS = 17      # d + 1
    MAX_VALS = 136       # MAX_FIELDS * MAX_DIM
    MAX_JACS = 1088      # MAX_FIELDS * MAX_DIM * MAX_DIM
    MAX_MAT = 64         # MAX_DIM * MAX_DIM


cdef inline void _eval_point(const double[:, ::1] modes2pi,
                             const double[:, ::1] cos_coef,
                             const double[:, ::1] sin_coef,
                             const long long[::1] offsets,
                             int nf, int N,
                             const double* x,
                             double* vals,          # nf * N
                             double* jacs,          # nf * N * N or NULL
                             bint want_jac) noexcept nogil:
    cdef int k, r, i, j
    cdef double ph, c, s, amp
    for k in range(nf):
        for i in range(N):
            vals[k * N + i] = 0.0
        if want_jac:
            for i in range(N * N):
                jacs[k * N * N + i] = 0.0
        for r in range(offsets[k], offsets[k + 1]):
            ph = 0.0
            for j in range(N):
                ph += modes2pi[r, j] * x[j]
            c = cos(ph)
            s = sin(ph)
            for i in range(N):
                vals[k * N + i] += cos_coef[r, i] * c + sin_coef[r, i] * s
            if want_jac:
                for i in range(N):
                    amp = -cos_coef[r, i] * s + sin_coef[r, i] * c
                    for j in range(N):
                        jacs[k * N * N + i * N + j] += amp * modes2pi[r, j]


cdef inline void _hess_contract(const double[:, ::1] modes2pi,
                                const double[:, ::1] cos_coef,
                                const double[:, ::1] sin_coef,
                                const long long[::1] offsets,
                                int k, int N,
                                const double* x,
                                const double* v,    # N, contraction vector
                                double* out         # N * N, overwritten
                                ) noexcept nogil:
    # out_ij = sum_r -(m_r.v) m_rj (a_ri cos + b_ri sin)
    cdef int r, i, j
    cdef double ph, c, s, mv, w
    for i in range(N * N):
        out[i] = 0.0
    for r in range(offsets[k], offsets[k + 1]):
        ph = 0.0
        mv = 0.0
        for j in range(N):
            ph += modes2pi[r, j] * x[j]
            mv += modes2pi[r, j] * v[j]
        c = cos(ph)
        s = sin(ph)
        for i in range(N):
            w = -mv * (cos_coef[r, i] * c + sin_coef[r, i] * s)
            for j in range(N):
                out[i * N + j] += w * modes2pi[r, j]


def evolve_steps(const double[:, ::1] modes2pi,
                 const double[:, ::1] cos_coef,
                 const double[:, ::1] sin_coef,
                 const long long[::1] offsets,
                 double[:, ::1] lift,
                 frames_obj,
                 const double[:, ::1] dW,
                 double dt,
                 int scheme,
                 rec_lift_obj=None,
                 rec_frames_obj=None):
    cdef int nf = offsets.shape[0] - 1
    cdef int d = nf - 1
    cdef int n = lift.shape[0]
    cdef int N = lift.shape[1]
    cdef Py_ssize_t steps = dW.shape[0]

    if N > MAX_DIM or nf > MAX_FIELDS:
        raise ValueError("kernel compiled for dim <= 8 and d <= 16")

    cdef bint have_frames = frames_obj is not None and frames_obj.size > 0
    cdef double[:, :, ::1] frames
    cdef int m = 0
    if have_frames:
        frames = frames_obj
        m = frames.shape[2]

    cdef bint rec_x = rec_lift_obj is not None
    cdef bint rec_f = rec_frames_obj is not None and have_frames
    cdef double[:, :, ::1] rec_lift
    cdef double[:, :, :, ::1] rec_frames
    if rec_x:
        rec_lift = rec_lift_obj
    if rec_f:
        rec_frames = rec_frames_obj

    # per-point scratch (stack-sized by MAX_DIM / MAX_FIELDS)
    cdef double vals[MAX_VALS]
    cdef double vals_p[MAX_VALS]
    cdef double jacs[MAX_JACS]
    cdef double jacs_p[MAX_JACS]
    cdef double hessk[MAX_MAT]
    cdef double drift_mat[MAX_MAT]
    cdef double x0[MAX_DIM]
    cdef double xp[MAX_DIM]
    cdef double xn[MAX_DIM]
    cdef double acc[MAX_DIM]
    # frame scratch: heap buffers sized N*m (m can be up to N)
    f_buf = np.empty(MAX_MAT, dtype=np.float64)
    fp_buf = np.empty(MAX_MAT, dtype=np.float64)
    fn_buf = np.empty(MAX_MAT, dtype=np.float64)
    cdef double[::1] F0 = f_buf
    cdef double[::1] Fp = fp_buf
    cdef double[::1] Fn = fn_buf

    cdef Py_ssize_t step
    cdef Py_ssize_t fail_step = -1
    cdef int p, k, i, j, col
    cdef double wk, t1, t2
    cdef bint bad

    with nogil:
        for step in range(steps):
            bad = False
            for p in range(n):
                for i in range(N):
                    x0[i] = lift[p, i]
                if have_frames:
                    for i in range(N):
                        for col in range(m):
                            F0[i * m + col] = frames[p, i, col]

                if scheme == 0:
                    # Heun predictor-corrector (Stratonovich-consistent)
                    _eval_point(modes2pi, cos_coef, sin_coef, offsets, nf, N,
                                x0, vals, jacs, have_frames)
                    for i in range(N):
                        acc[i] = vals[i] * dt
                    for k in range(1, nf):
                        wk = dW[step, k - 1]
                        for i in range(N):
                            acc[i] += vals[k * N + i] * wk
                    for i in range(N):
                        xp[i] = x0[i] + acc[i]
                    if have_frames:
                        for i in range(N):
                            for col in range(m):
                                t1 = 0.0
                                for j in range(N):
                                    t1 += jacs[i * N + j] * F0[j * m + col]
                                Fp[i * m + col] = t1 * dt
                        for k in range(1, nf):
                            wk = dW[step, k - 1]
                            for i in range(N):
                                for col in range(m):
                                    t1 = 0.0
                                    for j in range(N):
                                        t1 += jacs[k * N * N + i * N + j] * F0[j * m + col]
                                    Fp[i * m + col] += t1 * wk
                        for i in range(N * m):
                            Fp[i] += F0[i]
                    _eval_point(modes2pi, cos_coef, sin_coef, offsets, nf, N,
                                xp, vals_p, jacs_p, have_frames)
                    for i in range(N):
                        acc[i] = (vals[i] + vals_p[i]) * (0.5 * dt)
                    for k in range(1, nf):
                        wk = 0.5 * dW[step, k - 1]
                        for i in range(N):
                            acc[i] += (vals[k * N + i] + vals_p[k * N + i]) * wk
                    for i in range(N):
                        xn[i] = x0[i] + acc[i]
                    if have_frames:
                        for i in range(N):
                            for col in range(m):
                                t1 = 0.0
                                t2 = 0.0
                                for j in range(N):
                                    t1 += jacs[i * N + j] * F0[j * m + col]
                                    t2 += jacs_p[i * N + j] * Fp[j * m + col]
                                Fn[i * m + col] = (t1 + t2) * (0.5 * dt)
                        for k in range(1, nf):
                            wk = 0.5 * dW[step, k - 1]
                            for i in range(N):
                                for col in range(m):
                                    t1 = 0.0
                                    t2 = 0.0
                                    for j in range(N):
                                        t1 += jacs[k * N * N + i * N + j] * F0[j * m + col]
                                        t2 += jacs_p[k * N * N + i * N + j] * Fp[j * m + col]
                                    Fn[i * m + col] += (t1 + t2) * wk
                        for i in range(N * m):
                            Fn[i] += F0[i]
                else:
                    # Ito-corrected Euler
                    _eval_point(modes2pi, cos_coef, sin_coef, offsets, nf, N,
                                x0, vals, jacs, True)
                    for i in range(N):
                        acc[i] = 0.0
                    for k in range(1, nf):
                        for i in range(N):
                            t1 = 0.0
                            for j in range(N):
                                t1 += jacs[k * N * N + i * N + j] * vals[k * N + j]
                            acc[i] += t1
                    for i in range(N):
                        xn[i] = x0[i] + (vals[i] + 0.5 * acc[i]) * dt
                    for k in range(1, nf):
                        wk = dW[step, k - 1]
                        for i in range(N):
                            xn[i] += vals[k * N + i] * wk
                    if have_frames:
                        for i in range(N * N):
                            drift_mat[i] = jacs[i]
                        for k in range(1, nf):
                            _hess_contract(modes2pi, cos_coef, sin_coef, offsets,
                                           k, N, x0, &vals[k * N], hessk)
                            for i in range(N):
                                for j in range(N):
                                    t1 = 0.0
                                    for col in range(N):
                                        t1 += (jacs[k * N * N + i * N + col]
                                               * jacs[k * N * N + col * N + j])
                                    drift_mat[i * N + j] += 0.5 * (hessk[i * N + j] + t1)
                        for i in range(N):
                            for col in range(m):
                                t1 = 0.0
                                for j in range(N):
                                    t1 += drift_mat[i * N + j] * F0[j * m + col]
                                Fn[i * m + col] = F0[i * m + col] + t1 * dt
                        for k in range(1, nf):
                            wk = dW[step, k - 1]
                            for i in range(N):
                                for col in range(m):
                                    t1 = 0.0
                                    for j in range(N):
                                        t1 += jacs[k * N * N + i * N + j] * F0[j * m + col]
                                    Fn[i * m + col] += t1 * wk

                for i in range(N):
                    if not isfinite(xn[i]):
                        bad = True
                    lift[p, i] = xn[i]
                if have_frames:
                    for i in range(N):
                        for col in range(m):
                            if not isfinite(Fn[i * m + col]):
                                bad = True
                            frames[p, i, col] = Fn[i * m + col]
                if rec_x:
                    for i in range(N):
                        rec_lift[step, p, i] = xn[i]
                if rec_f:
                    for i in range(N):
                        for col in range(m):
                            rec_frames[step, p, i, col] = Fn[i * m + col]
            if bad:
                fail_step = step
                break
    return fail_step
