"""Pure-numpy stepping kernel, vectorized across points.

Reference semantics for the compiled kernel in _core.pyx: both advance n
lifted points (and optionally tangent frames) through S steps of the
driving SDE using either the Stratonovich Heun predictor-corrector
(scheme 0) or the Ito-corrected Euler scheme (scheme 1).

State is the lift in R^N; the trig evaluators are 1-periodic so no
wrapping is needed.  Returns -1 on success or the index of the first step
that produced a non-finite state.
"""

from __future__ import annotations

import numpy as np

SCHEME_HEUN = 0
SCHEME_ITO_EULER = 1


def _eval_fields(modes2pi, cos_coef, sin_coef, offsets, x, want_jac, want_hess_vec=None):
    """Evaluate all fields (and optionally Jacobians) at points x (n, N).

    Returns (vals, jacs, hess_contr): vals[k] is (n, N); jacs[k] is
    (n, N, N) or None; hess_contr[k] is (n, N, N) with entries
    sum_l d_l d_j (X_k)_i * v_l for v = want_hess_vec[k], or None.
    """
    nf = len(offsets) - 1
    phases = x @ modes2pi.T          # (n, R); modes2pi already carries 2 pi
    c = np.cos(phases)
    s = np.sin(phases)
    vals, jacs, hess = [], [], []
    for k in range(nf):
        sl = slice(offsets[k], offsets[k + 1])
        ck, sk = c[:, sl], s[:, sl]
        ac, bs = cos_coef[sl], sin_coef[sl]
        m = modes2pi[sl]
        vals.append(ck @ ac + sk @ bs)
        if want_jac:
            jacs.append(np.einsum("nr,ri,rj->nij", -sk, ac, m)
                        + np.einsum("nr,ri,rj->nij", ck, bs, m))
        else:
            jacs.append(None)
        if want_hess_vec is not None:
            # B_ij = sum_r -(m_r.v) m_rj (a_ri cos_r + b_ri sin_r)
            w = -(want_hess_vec[k] @ m.T)                          # (n, Rk)
            hess.append(np.einsum("nr,ri,rj->nij", w * ck, ac, m)
                        + np.einsum("nr,ri,rj->nij", w * sk, bs, m))
        else:
            hess.append(None)
    return vals, jacs, hess


def evolve_steps(modes2pi, cos_coef, sin_coef, offsets,
                 lift, frames, dW, dt, scheme,
                 rec_lift=None, rec_frames=None) -> int:
    offsets = np.asarray(offsets, dtype=np.int64)
    d = len(offsets) - 2
    steps = dW.shape[0]
    have_frames = frames is not None and frames.size > 0
    x = lift

    for step in range(steps):
        w = dW[step]
        if scheme == SCHEME_HEUN:
            vals, jacs, _ = _eval_fields(modes2pi, cos_coef, sin_coef, offsets,
                                         x, have_frames)
            dx = vals[0] * dt
            for k in range(1, d + 1):
                dx = dx + vals[k] * w[k - 1]
            xp = x + dx
            if have_frames:
                dF = np.einsum("nij,njm->nim", jacs[0], frames) * dt
                for k in range(1, d + 1):
                    dF = dF + np.einsum("nij,njm->nim", jacs[k], frames) * w[k - 1]
                frames_p = frames + dF
            vals_p, jacs_p, _ = _eval_fields(modes2pi, cos_coef, sin_coef, offsets,
                                             xp, have_frames)
            dx2 = (vals[0] + vals_p[0]) * (0.5 * dt)
            for k in range(1, d + 1):
                dx2 = dx2 + (vals[k] + vals_p[k]) * (0.5 * w[k - 1])
            x += dx2
            if have_frames:
                dF2 = (np.einsum("nij,njm->nim", jacs[0], frames)
                       + np.einsum("nij,njm->nim", jacs_p[0], frames_p)) * (0.5 * dt)
                for k in range(1, d + 1):
                    dF2 = dF2 + (np.einsum("nij,njm->nim", jacs[k], frames)
                                 + np.einsum("nij,njm->nim", jacs_p[k], frames_p)
                                 ) * (0.5 * w[k - 1])
                frames += dF2
        else:  # Ito-corrected Euler
            vals, jacs, _ = _eval_fields(modes2pi, cos_coef, sin_coef, offsets,
                                         x, True)
            corr = np.zeros_like(x)
            for k in range(1, d + 1):
                corr += np.einsum("nij,nj->ni", jacs[k], vals[k])
            dx = (vals[0] + 0.5 * corr) * dt
            for k in range(1, d + 1):
                dx = dx + vals[k] * w[k - 1]
            if have_frames:
                _, _, hess = _eval_fields(modes2pi, cos_coef, sin_coef, offsets,
                                          x, False, want_hess_vec=vals)
                drift_mat = jacs[0].copy()
                for k in range(1, d + 1):
                    drift_mat += 0.5 * (hess[k]
                                        + np.einsum("nij,njl->nil", jacs[k], jacs[k]))
                dF = np.einsum("nij,njm->nim", drift_mat, frames) * dt
                for k in range(1, d + 1):
                    dF = dF + np.einsum("nij,njm->nim", jacs[k], frames) * w[k - 1]
                frames += dF
            x += dx

        if not np.isfinite(x).all():
            return step
        if have_frames and not np.isfinite(frames).all():
            return step
        if rec_lift is not None:
            rec_lift[step] = x
        if rec_frames is not None and have_frames:
            rec_frames[step] = frames
    return -1
