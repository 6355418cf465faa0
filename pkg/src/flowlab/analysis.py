"""Estimators that turn simulations into checks of the limit theorems:
Lyapunov exponents, stopping-time statistics, correlation decay,
occupation fractions, normality reports and the CLT variance D(A).

Every "is the claim consistent with the data" output is three-valued
(consistent / inconsistent / underpowered), gated on CI width and fit
quality; finite runs must not overclaim an asymptotic statement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .flow import batch_mgs, evolve, make_state
from .geometry import torus_distance

CONSISTENT = "consistent"
INCONSISTENT = "inconsistent"
UNDERPOWERED = "underpowered"

KS_1PCT = math.sqrt(-math.log(0.005) / 2.0)  # asymptotic 1% KS critical factor


class AnalysisError(ValueError):
    pass


# -- decay fits -----------------------------------------------------------------

@dataclass
class DecayFit:
    """Fitted C * exp(-rate * t), optionally with a separation exponent p."""

    amplitude: float
    rate: float
    r_squared: float
    rate_ci: tuple
    n_points: int
    separation_exponent: float | None = None

    def rate_positive_95(self) -> bool:
        return self.rate_ci[0] > 0.0


def fit_exponential_decay(t, y, min_points: int = 3) -> DecayFit:
    """Log-linear OLS on strictly positive ordinates; 95% CI on the rate."""
    t = np.asarray(t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    keep = y > 0
    t, y = t[keep], y[keep]
    n = len(t)
    if n < min_points:
        raise AnalysisError(f"need >= {min_points} positive ordinates, have {n}")
    if np.ptp(t) == 0:
        raise AnalysisError("degenerate fit: all abscissae equal")
    ly = np.log(y)
    slope, intercept = np.polyfit(t, ly, 1)
    resid = ly - (slope * t + intercept)
    ss_res = float(resid @ resid)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    dof = n - 2
    if dof > 0 and ss_res > 0:
        se = math.sqrt(ss_res / dof / float(np.sum((t - t.mean()) ** 2)))
        half = stats.t.ppf(0.975, dof) * se
    else:
        half = 0.0
    rate = -slope
    if not math.isfinite(rate):
        raise AnalysisError("non-finite fitted rate")
    return DecayFit(amplitude=math.exp(intercept), rate=rate, r_squared=r2,
                    rate_ci=(rate - half, rate + half), n_points=n)


def fit_separation_exponent(separations, amplitudes) -> tuple[float, tuple]:
    """Slope of log amplitude against log separation: amplitude ~ d^-p.

    Returns (p_hat, 95% CI)."""
    d = np.log(np.asarray(separations, dtype=np.float64))
    a = np.log(np.asarray(amplitudes, dtype=np.float64))
    fit = fit_exponential_decay(d, np.exp(a), min_points=3)
    # reusing the OLS machinery: rate here is -d(log a)/d(log d) = p
    return fit.rate, fit.rate_ci


# -- normality ------------------------------------------------------------------

@dataclass
class CltReport:
    """Moment and KS summary of a (weighted) scalar sample against the
    normal fitted to its first two moments."""

    n_effective: float
    mean: float
    variance: float
    skewness: float
    excess_kurtosis: float
    ks_stat: float
    ks_critical: float
    skew_tol: float
    kurt_tol: float

    @property
    def passed_ks(self) -> bool:
        return self.ks_stat < self.ks_critical

    @property
    def passed_moments(self) -> bool:
        return (abs(self.skewness) <= self.skew_tol
                and abs(self.excess_kurtosis) <= self.kurt_tol)

    @property
    def passed(self) -> bool:
        return self.passed_ks and self.passed_moments


@dataclass
class VectorCltReport:
    per_coordinate: list
    covariance: np.ndarray

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.per_coordinate)


def normality_report(sample, weights=None, *, skew_tol: float = 0.1,
                     kurt_tol: float = 0.2, min_effective: float = 100.0):
    """CltReport for scalars, VectorCltReport (per coordinate plus full
    covariance) for vector samples.  Weight-scale invariant; degenerate
    (zero-variance) samples are rejected."""
    x = np.asarray(sample, dtype=np.float64)
    if x.ndim == 2:
        if weights is None:
            w = np.full(len(x), 1.0 / len(x))
        else:
            w = np.asarray(weights, dtype=np.float64)
            w = w / w.sum()
        mean = w @ x
        centered = x - mean
        cov = np.einsum("b,bi,bj->ij", w, centered, centered)
        reports = [normality_report(x[:, j], weights, skew_tol=skew_tol,
                                    kurt_tol=kurt_tol, min_effective=min_effective)
                   for j in range(x.shape[1])]
        return VectorCltReport(per_coordinate=reports, covariance=cov)

    if weights is None:
        w = np.full(len(x), 1.0 / len(x))
    else:
        w = np.asarray(weights, dtype=np.float64)
        if np.any(w < 0):
            raise AnalysisError("weights must be nonnegative")
        w = w / w.sum()
    ess = 1.0 / float(w @ w)
    if ess < min_effective:
        raise AnalysisError(f"effective sample size {ess:.1f} below {min_effective}")
    mean = float(w @ x)
    c = x - mean
    var = float(w @ c ** 2)
    if not math.isfinite(var) or var <= 1e-24 * (1.0 + mean * mean):
        raise AnalysisError("degenerate sample: zero or non-finite variance")
    sd = math.sqrt(var)
    skew = float(w @ c ** 3) / sd ** 3
    kurt = float(w @ c ** 4) / var ** 2 - 3.0

    order = np.argsort(x)
    cdf_hi = np.cumsum(w[order])
    cdf_lo = cdf_hi - w[order]
    model = stats.norm.cdf(x[order], loc=mean, scale=sd)
    ks = float(max(np.max(np.abs(cdf_hi - model)), np.max(np.abs(model - cdf_lo))))

    return CltReport(n_effective=ess, mean=mean, variance=var, skewness=skew,
                     excess_kurtosis=kurt, ks_stat=ks,
                     ks_critical=KS_1PCT / math.sqrt(ess),
                     skew_tol=skew_tol, kurt_tol=kurt_tol)


# -- stopping times ---------------------------------------------------------------

@dataclass
class StoppingRecord:
    """Alternating hits of the r/2 level and delta-grid-resolved escapes
    past r, for one two-point trajectory."""

    sigma_times: np.ndarray
    tau_times: np.ndarray
    r: float
    delta: float
    truncated: bool            # horizon ended inside a pending (sigma, tau) pair
    pending_sigma: float | None = None

    def __post_init__(self):
        s, t = self.sigma_times, self.tau_times
        if len(t) > len(s) or len(s) - len(t) > (1 if self.truncated else 0):
            raise AnalysisError("stopping record lost interlacing")
        merged = np.empty(len(s) + len(t))
        merged[0::2] = s
        merged[1::2] = t if len(t) == len(s) else np.append(t, np.inf)
        if np.any(np.diff(merged[: len(s) + len(t)]) <= 0):
            raise AnalysisError("stopping times must interlace strictly")


def _level_crossings(times, series, level):
    """Interpolated crossing times of a level (both directions)."""
    s = series - level
    out = []
    for i in range(len(s) - 1):
        if s[i] == 0.0:
            out.append(times[i])
        elif s[i] * s[i + 1] < 0.0:
            frac = s[i] / (s[i] - s[i + 1])
            out.append(times[i] + frac * (times[i + 1] - times[i]))
    if s[-1] == 0.0:
        out.append(times[-1])
    return np.array(out)


def stopping_times(distances, dt: float, r: float, delta: float,
                   t0: float = 0.0) -> StoppingRecord:
    """sigma_j / tau_j per the grid-resolved escape construction.

    distances: the pair-distance series on the dt grid (dt must divide
    delta).  sigma_j is the first interpolated crossing of r/2 after
    tau_{j-1}; tau_j is the smallest delta-grid time t >= s1 + delta for
    some r-crossing s1 >= sigma_j with the distance staying above r/2 on
    [s1, t].
    """
    dist = np.asarray(distances, dtype=np.float64)
    steps_per_delta = delta / dt
    if abs(round(steps_per_delta) - steps_per_delta) > 1e-9:
        raise AnalysisError("dt must divide delta")
    times = t0 + dt * np.arange(len(dist))
    horizon = times[-1]

    half_cross = _level_crossings(times, dist, r / 2.0)
    full_cross = _level_crossings(times, dist, r)
    # first grid time at or after which the distance has dipped to <= r/2
    below = dist <= r / 2.0

    def first_below(after_t):
        idx = np.searchsorted(times, after_t, side="right")
        sub = np.nonzero(below[idx:])[0]
        if sub.size == 0:
            return None
        j = idx + sub[0]
        # refine with the interpolated crossing inside (t_{j-1}, t_j]
        if j > 0 and dist[j - 1] > r / 2.0:
            frac = (dist[j - 1] - r / 2.0) / (dist[j - 1] - dist[j])
            return times[j - 1] + frac * dt
        return times[j]

    def next_delta_grid(t):
        k = math.ceil(t / delta - 1e-12)
        return k * delta

    sigmas, taus = [], []
    search = t0
    truncated = False
    pending = None
    while True:
        cand = half_cross[half_cross > search] if sigmas or taus else \
            half_cross[half_cross >= search]
        if cand.size == 0:
            break
        sigma = float(cand[0])
        tau = None
        for s1 in full_cross[full_cross >= sigma]:
            t_star = next_delta_grid(s1 + delta)
            if t_star > horizon + 1e-12:
                break
            dip = first_below(s1)
            if dip is not None and dip <= t_star:
                continue  # window [s1, t_star] leaves G_{r/2}: s1 invalid
            tau = float(t_star)
            break
        if tau is None:
            truncated = True
            pending = sigma
            break
        sigmas.append(sigma)
        taus.append(tau)
        search = tau
    return StoppingRecord(sigma_times=np.array(sigmas), tau_times=np.array(taus),
                          r=r, delta=delta, truncated=truncated,
                          pending_sigma=pending)


# -- moments of stopping durations -------------------------------------------------

def tail_fit(samples, min_samples: int = 200) -> DecayFit:
    """Exponential tail fit of P(tau > t): log-linear on the empirical
    survival function above the 50th percentile."""
    s = np.sort(np.asarray(samples, dtype=np.float64))
    n = len(s)
    if n < min_samples:
        raise AnalysisError(f"need >= {min_samples} samples, have {n}")
    if s[0] == s[-1]:
        raise AnalysisError("degenerate sample: zero variance")
    survival = 1.0 - (np.arange(1, n + 1)) / n
    keep = (s >= np.median(s)) & (survival > 0)
    return fit_exponential_decay(s[keep], survival[keep])


def exp_moment(samples, alpha: float, *, tail_rate: float | None = None,
               n_boot: int = 400, seed: int = 0):
    """Estimate E exp(alpha * tau) with a bootstrap 95% CI.

    alpha must sit below the fitted tail rate (otherwise the moment
    diverges and the estimator is rejected)."""
    s = np.asarray(samples, dtype=np.float64)
    if alpha != 0.0:
        gamma = tail_rate if tail_rate is not None else tail_fit(s).rate
        if alpha >= gamma:
            raise AnalysisError(
                f"alpha = {alpha:.4g} is not below the fitted tail rate "
                f"{gamma:.4g}; the exponential moment is untrustworthy")
    vals = np.exp(alpha * s)
    est = float(vals.mean())
    if alpha == 0.0:
        return est, (est, est)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    boots = np.array([vals[rng.integers(0, len(vals), len(vals))].mean()
                      for _ in range(n_boot)])
    return est, (float(np.quantile(boots, 0.025)), float(np.quantile(boots, 0.975)))


# -- Lyapunov exponents -------------------------------------------------------------

@dataclass
class LyapunovEstimate:
    exponents: np.ndarray          # sorted descending
    ci: np.ndarray                 # (N, 2)
    sum_estimate: float
    sum_se: float
    log_det_rate: float | None     # independent accumulation route
    T: float
    dt: float
    segments: int

    @property
    def top(self) -> float:
        return float(self.exponents[0])

    @property
    def top_ci(self) -> tuple:
        return tuple(self.ci[0])


def _segment_rates(F, path, x0, frames0, T, qr_every, scheme, segments, t0=0.0):
    """Evolve with frames through `segments` equal chunks; per-segment
    log-growth rates per column, plus the independent log|det| rate."""
    dt = path.dt
    steps_total = round(T / dt)
    per_seg = steps_total // segments
    if per_seg == 0:
        raise AnalysisError("T too small for the requested segment count")
    per_seg -= per_seg % qr_every or 0
    if per_seg == 0:
        raise AnalysisError("segment shorter than one QR interval")
    state = make_state(np.atleast_2d(x0), dt, t0, frames=frames0)
    m = state.frames.shape[2]
    rates = np.empty((segments, m))
    t = t0
    for s in range(segments):
        prev = state.log_r[0].copy()
        t_next = (round(t / dt) + per_seg) * dt
        state = evolve(F, state, path, t, t_next, scheme=scheme,
                       qr_every=qr_every)
        rates[s] = (state.log_r[0] - prev) / (per_seg * dt)
        t = t_next
    T_eff = per_seg * segments * dt
    logdet_rate = (float(state.log_det[0]) / T_eff
                   if state.log_det is not None else None)
    return rates, logdet_rate, T_eff


def lyapunov_top(F, path, x0, v0, T: float, *, qr_every: int = 10,
                 segments: int = 20, scheme: str = "heun") -> LyapunovEstimate:
    """lambda_1 from the log growth of one tangent vector; CI from batch
    means over the segments."""
    v0 = np.asarray(v0, dtype=np.float64)
    norm = np.linalg.norm(v0)
    if abs(norm - 1.0) > 1e-12:
        raise AnalysisError("v0 must be a unit vector")
    rates, _, T_eff = _segment_rates(F, path, x0, v0[:, None], T, qr_every,
                                     scheme, segments)
    est = rates.mean(axis=0)
    se = rates.std(axis=0, ddof=1) / math.sqrt(segments)
    half = stats.t.ppf(0.975, segments - 1) * se
    return LyapunovEstimate(
        exponents=est, ci=np.stack([est - half, est + half], axis=1),
        sum_estimate=float(est.sum()), sum_se=float(np.linalg.norm(se)),
        log_det_rate=None, T=T_eff, dt=path.dt, segments=segments)


def lyapunov_spectrum(F, path, x0, T: float, *, qr_every: int = 10,
                      segments: int = 20, scheme: str = "heun") -> LyapunovEstimate:
    """Full spectrum by the QR method; exponents are time averages of
    log|r_ii|.  The sum carries a batch-mean standard error, and the
    independently accumulated log|det| rate is reported for the
    bookkeeping identity sum lambda_i = (1/T) log det."""
    N = F.dim
    rates, logdet_rate, T_eff = _segment_rates(F, path, x0, N, T, qr_every,
                                               scheme, segments)
    est = rates.mean(axis=0)
    se = rates.std(axis=0, ddof=1) / math.sqrt(segments)
    order = np.argsort(est)[::-1]
    est, se = est[order], se[order]
    half = stats.t.ppf(0.975, segments - 1) * se
    sum_rates = rates.sum(axis=1)
    sum_se = float(sum_rates.std(ddof=1) / math.sqrt(segments))
    return LyapunovEstimate(
        exponents=est, ci=np.stack([est - half, est + half], axis=1),
        sum_estimate=float(sum_rates.mean()), sum_se=sum_se,
        log_det_rate=logdet_rate, T=T_eff, dt=path.dt, segments=segments)


@dataclass
class CarverhillReport:
    lambda_lognorm: float
    lognorm_ci: tuple
    lambda_integral: float
    integral_ci: tuple
    agree: bool

    @property
    def verdict(self) -> str:
        return CONSISTENT if self.agree else INCONSISTENT


def carverhill_check(F, path, x0, u0, T: float, *, qr_every: int = 10,
                     segments: int = 20, sample_every: int = 10,
                     fd_step: float = 1e-4, scheme: str = "heun") -> CarverhillReport:
    """Cross-check lambda_1 against the stationary average of
    R(v) = g_0(v) + (1/2) sum_k L_Xt_k g_k(v) over the unit-tangent-bundle
    trajectory, g_k(v) = <DX_k(x) u, u>.

    The 1/2 on the Lie-derivative term is the Ito correction that makes
    the time average of R equal the log-norm growth rate.  Derivatives
    L_Xt_k g_k are central differences along the induced field on the
    bundle (step fd_step).
    """
    u0 = np.asarray(u0, dtype=np.float64)
    if abs(np.linalg.norm(u0) - 1.0) > 1e-12:
        raise AnalysisError("u0 must be a unit vector")
    dt = path.dt
    steps_total = round(T / dt)
    per_seg = (steps_total // segments) // qr_every * qr_every
    if per_seg == 0:
        raise AnalysisError("T too small for segments x qr_every")

    state = make_state(np.atleast_2d(x0), dt, 0.0, frames=u0[:, None])
    rate_seg = np.empty(segments)
    R_seg = np.empty(segments)
    t = 0.0
    for s in range(segments):
        prev = float(state.log_r[0, 0])
        t_next = (round(t / dt) + per_seg) * dt
        state, traj = evolve(F, state, path, t, t_next, scheme=scheme,
                             qr_every=qr_every, record=True)
        rate_seg[s] = (float(state.log_r[0, 0]) - prev) / (per_seg * dt)
        xs = traj.lift[::sample_every, 0, :]
        ws = traj.frames[::sample_every, 0, :, 0]
        us = ws / np.linalg.norm(ws, axis=1, keepdims=True)
        R_seg[s] = float(np.mean(_carverhill_R(F, xs, us, fd_step)))
        t = t_next

    tq = stats.t.ppf(0.975, segments - 1)
    l1 = float(rate_seg.mean())
    se1 = float(rate_seg.std(ddof=1) / math.sqrt(segments))
    l2 = float(R_seg.mean())
    se2 = float(R_seg.std(ddof=1) / math.sqrt(segments))
    agree = abs(l1 - l2) <= tq * math.hypot(se1, se2)
    return CarverhillReport(
        lambda_lognorm=l1, lognorm_ci=(l1 - tq * se1, l1 + tq * se1),
        lambda_integral=l2, integral_ci=(l2 - tq * se2, l2 + tq * se2),
        agree=agree)


def _g(F, k, xs, us):
    """g_k(x, u) = <DX_k(x) u, u> batched over samples."""
    jac = F.jacobian(k, xs)
    return np.einsum("bij,bj,bi->b", jac, us, us)


def _carverhill_R(F, xs, us, h):
    """R = g_0 + 1/2 sum_k central-difference of g_k along the induced
    field Xt_k(x, u) = (X_k(x), (I - u u^T) DX_k(x) u)."""
    out = _g(F, 0, xs, us)
    for k in range(1, F.d + 1):
        Xk = F.eval(k, xs)
        jac = F.jacobian(k, xs)
        du = np.einsum("bij,bj->bi", jac, us)
        du -= us * np.einsum("bi,bi->b", us, du)[:, None]
        xp, up = xs + h * Xk, us + h * du
        xm, um = xs - h * Xk, us - h * du
        up /= np.linalg.norm(up, axis=1, keepdims=True)
        um /= np.linalg.norm(um, axis=1, keepdims=True)
        out = out + 0.5 * (_g(F, k, xp, up) - _g(F, k, xm, um)) / (2.0 * h)
    return out


# -- occupation and correlation ------------------------------------------------------

def occupation_fraction(traj_lift, dt: float, r: float) -> float:
    """Fraction of the trajectory time with min pairwise distance <= r,
    trapezoidal on the grid."""
    lift = np.asarray(traj_lift, dtype=np.float64)
    S1, n, _ = lift.shape
    if n < 2:
        raise AnalysisError("occupation fraction needs >= 2 points")
    iu, ju = np.triu_indices(n, 1)
    dmin = np.min(torus_distance(lift[:, iu, :], lift[:, ju, :]), axis=1)
    ind = (dmin <= r).astype(np.float64)
    T = (S1 - 1) * dt
    return float(np.trapezoid(ind, dx=dt) / T)


@dataclass
class CorrelationCurve:
    times: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    fit: DecayFit | None
    verdict: str
    separation: float


def correlation_fit(times, values, stderr, *, r2_gate: float = 0.9,
                    min_points: int = 4,
                    significance: float = 3.0) -> tuple[DecayFit | None, str]:
    """Fit |rho(t)| ~ C e^(-theta t) with the R^2 gate.

    The window runs from the first ordinate up to the first one that drops
    below significance * stderr: for a genuinely decaying curve everything
    past the noise floor carries no rate information, while a flat curve
    keeps its full window and fails the gate instead of forcing a fit.
    """
    times = np.asarray(times, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    stderr = np.asarray(stderr, dtype=np.float64)
    sig = np.abs(values) > significance * stderr
    if not sig[0]:
        return None, UNDERPOWERED
    cut = int(np.argmin(sig)) if not sig.all() else len(sig)
    if cut < min_points:
        return None, UNDERPOWERED
    try:
        fit = fit_exponential_decay(times[:cut], np.abs(values[:cut]),
                                    min_points=min_points)
    except AnalysisError:
        return None, UNDERPOWERED
    if fit.r_squared < r2_gate or not fit.rate_positive_95():
        return fit, INCONSISTENT
    return fit, CONSISTENT


# -- D(A) -----------------------------------------------------------------------------

@dataclass
class DAEstimate:
    slope: float                  # regression estimate of D(A)
    slope_ci: tuple
    per_measure: float | None     # nu(A_t^2) / (nu(M) t) at the horizon
    per_measure_ci: tuple | None
    horizon: float
    dt: float

    @property
    def agree(self) -> bool:
        if self.per_measure is None:
            return True
        lo1, hi1 = self.slope_ci
        lo2, hi2 = self.per_measure_ci
        return max(lo1, lo2) <= min(hi1, hi2)


def estimate_DA_from_samples(times, A_samples, *, n_boot: int = 400,
                             seed: int = 0, through_origin: bool = True):
    """D(A) as the slope of E A_t^2 against t.

    A_samples: (reps, len(times)) functional values.  CI by bootstrap over
    realizations.
    """
    A = np.asarray(A_samples, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    if A.ndim != 2 or A.shape[1] != len(t):
        raise AnalysisError("A_samples must be (reps, len(times))")

    def slope_of(block):
        m2 = np.mean(block ** 2, axis=0)
        if through_origin:
            return float((t @ m2) / (t @ t))
        return float(np.polyfit(t, m2, 1)[0])

    est = slope_of(A)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    reps = A.shape[0]
    boots = np.array([slope_of(A[rng.integers(0, reps, reps)])
                      for _ in range(n_boot)])
    return est, (float(np.quantile(boots, 0.025)), float(np.quantile(boots, 0.975)))
