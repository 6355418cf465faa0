"""Pullback measures and the drift/fluctuation decomposition for
dissipative flows.

A dissipative test set is a divergence-free set plus a scaled
non-solenoidal perturbation of the drift field X_0: one knob (epsilon)
interpolates conservative -> dissipative.  The pullback measure mu_t is
approximated by evolving a particle cloud forward from time -n under a
fixed two-sided path; the one-point invariant measure m by a long-run
occupation cloud.  Both truncations are reported, not hidden.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .analysis import AnalysisError, fit_exponential_decay
from .fields import TrigCoefficient, VectorFieldSet
from .flow import (FunctionalSpec, _ito_drift_joint, evolve, make_state,
                   per_point_increments)
from .measures import ParticleMeasure, observable_average, pushforward
from .noise import NoisePath
from .trig import TrigPoly


class DissipativeError(RuntimeError):
    pass


def make_dissipative_set(F: VectorFieldSet, epsilon: float,
                         seed: int = 1234) -> VectorFieldSet:
    """Add a gradient (non-solenoidal) trig perturbation of size epsilon to
    the drift X_0; driving fields are untouched."""
    if epsilon == 0.0:
        return F
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    from .trig import half_space_modes
    modes = half_space_modes(F.dim, 1)
    pert = []
    for m in modes:
        mv = np.asarray(m, dtype=np.float64)
        mv /= np.linalg.norm(mv)
        # coefficient parallel to the mode: a pure-gradient (curl-free) term
        pert.append(TrigCoefficient(tuple(m),
                                    epsilon * rng.normal() * mv,
                                    epsilon * rng.normal() * mv))
    fields = [list(F.fields[0]) + pert] + [list(f) for f in F.fields[1:]]
    return VectorFieldSet(F.dim, F.d, fields, divergence_free=False)


def occupation_measure(F: VectorFieldSet, path: NoisePath, *, t_burn: float,
                       t_end: float, sample_every: int, x0,
                       scheme: str = "heun") -> ParticleMeasure:
    """Long-run occupation cloud approximating the one-point invariant
    measure m (exact = Lebesgue in the conservative case)."""
    state, traj = evolve(F, np.atleast_2d(x0), path, 0.0, t_end,
                         scheme=scheme, record=True)
    i_burn = round(t_burn / path.dt)
    pts = traj.torus[i_burn::sample_every, 0, :]
    from .measures import from_points
    return from_points(pts)


def pullback_measure(F: VectorFieldSet, nu: ParticleMeasure, n: float,
                     t: float, path: NoisePath,
                     scheme: str = "heun") -> ParticleMeasure:
    """mu_t^(n) = the cloud nu evolved from time -n to t under the fixed
    two-sided path.  n = 0 is the ordinary pushforward over [0, t]."""
    if n < 0:
        raise DissipativeError("pullback depth must be >= 0")
    return pushforward(F, nu, path, t, t0=-float(n), scheme=scheme)


@dataclass
class PullbackRun:
    """Observable values mu_t^(n)(A) per depth for one fixed path."""

    depths: np.ndarray
    values: np.ndarray            # (len(depths),) or (reps, len(depths))
    t: float
    seed: int


@dataclass
class PullbackConvergence:
    depths: np.ndarray
    gaps: np.ndarray              # mean |mu^(n)(nu1)(A) - mu^(n)(nu2)(A)| over reps
    gap_se: np.ndarray
    cauchy_gaps: np.ndarray       # mean |mu^(n+1)(nu1)(A) - mu^(n)(nu1)(A)|
    cauchy_se: np.ndarray
    rho: float | None             # fitted geometric rate per unit depth
    rho_ci: tuple | None
    r_squared: float | None


def pullback_convergence(F: VectorFieldSet, nu1: ParticleMeasure,
                         nu2: ParticleMeasure, A: TrigPoly, depths, t: float,
                         *, seed: int, dt: float, reps: int,
                         scheme: str = "heun") -> PullbackConvergence:
    """Gap sequences |mu_t^(n)(nu1)(A) - mu_t^(n)(nu2)(A)| and the
    self-Cauchy sequence, with a fitted geometric rate rho = e^(-fit rate).

    Depths share one path per realization (append-only two-sided
    extension)."""
    depths = np.asarray(sorted(depths), dtype=np.float64)
    n_max = float(depths[-1])
    gaps = np.empty((reps, len(depths)))
    cauchy = np.empty((reps, len(depths) - 1))
    for rep in range(reps):
        path = NoisePath(seed=seed, stream_id=rep, d=F.d, dt=dt,
                         i_min=-round((n_max + 1) / dt), i_max=round(t / dt) + 1)
        vals1, vals2 = [], []
        for n in depths:
            m1 = pullback_measure(F, nu1, n, t, path, scheme=scheme)
            m2 = pullback_measure(F, nu2, n, t, path, scheme=scheme)
            vals1.append(observable_average(m1, A))
            vals2.append(observable_average(m2, A))
        vals1, vals2 = np.array(vals1), np.array(vals2)
        gaps[rep] = np.abs(vals1 - vals2)
        cauchy[rep] = np.abs(np.diff(vals1))
    gap_mean = gaps.mean(axis=0)
    gap_se = gaps.std(axis=0, ddof=1) / np.sqrt(reps)
    cauchy_mean = cauchy.mean(axis=0)
    cauchy_se = cauchy.std(axis=0, ddof=1) / np.sqrt(reps)
    try:
        fit = fit_exponential_decay(depths, gap_mean)
        rho, rho_ci, r2 = float(np.exp(-fit.rate)), \
            (float(np.exp(-fit.rate_ci[1])), float(np.exp(-fit.rate_ci[0]))), \
            fit.r_squared
    except AnalysisError:
        rho, rho_ci, r2 = None, None, None
    return PullbackConvergence(depths=depths, gaps=gap_mean, gap_se=gap_se,
                               cauchy_gaps=cauchy_mean, cauchy_se=cauchy_se,
                               rho=rho, rho_ci=rho_ci, r_squared=r2)


# -- drift decomposition ---------------------------------------------------------

@dataclass
class DecompositionResult:
    """A_t = C_t + B_t(x) per particle: drift part from cloud-averaged
    coefficients, fluctuation part from the residuals."""

    C: np.ndarray                # (V,)
    B: np.ndarray                # (n_particles, V)
    A: np.ndarray                # (n_particles, V)
    identity_residual: float     # max |A - (C + B)|
    t: float
    depth: float


def drift_decomposition(F: VectorFieldSet, spec: FunctionalSpec,
                        nu: ParticleMeasure, depth: float, t: float,
                        path: NoisePath, *, scheme: str = "heun",
                        block: int = 256) -> DecompositionResult:
    """Accumulate C_t (cloud-averaged coefficients) and per-particle B_t
    (residual coefficients) along the pullback cloud from -depth to t.

    The cloud plays the role of mu_s at every grid step; averages are
    weight-weighted.  All three accumulators use the same Ito-form rules,
    so A_t(x) = C_t + B_t(x) holds to accumulation roundoff.
    """
    if spec.arity != 1:
        raise DissipativeError("decomposition needs an arity-1 functional")
    dt = path.dt
    i0, i1 = -round(depth / dt), round(t / dt)
    w = nu.weights / nu.total_mass
    V = spec.value_dim
    n = nu.n_particles
    A = np.zeros((n, V))
    C = np.zeros(V)
    B = np.zeros((n, V))
    state = make_state(nu.lift, dt, i0 * dt)
    pos = i0
    while pos < i1:
        b = min(block, i1 - pos)
        t_next = (pos + b) * dt
        state, traj = evolve(F, state, path, pos * dt, t_next, scheme=scheme,
                             record=True)
        dW = path.increments(pos, pos + b)
        inc = per_point_increments(F, spec, traj.lift[:-1], dW, dt)  # (b, n, V)
        inc_C = np.einsum("n,bnv->bv", w, inc)
        A += np.add.reduce(inc, axis=0)
        C += np.add.reduce(inc_C, axis=0)
        B += np.add.reduce(inc - inc_C[:, None, :], axis=0)
        pos += b
    resid = float(np.max(np.abs(A - (C[None, :] + B))))
    return DecompositionResult(C=C, B=B, A=A, identity_residual=resid,
                               t=t, depth=depth)
