"""Integration of the driving SDE for n-point motions with shared noise.

All n points of one state advance under the same NoisePath.  The state is
kept as lifts in R^N (the trig evaluators are 1-periodic, so the dynamics
never needs wrapping); torus coordinates are derived views, which makes
the lift - torus in Z^N invariant exact.

Two schemes: "heun" (Stratonovich predictor-corrector, the default) and
"ito_euler" (explicit Euler on the Ito form, drift corrected by
1/2 sum_k DX_k X_k).  Additive functionals are always accumulated in Ito
form: dA = sum_k alpha_k dtheta_k + [a + 1/2 sum_k L_(X_k..X_k) alpha_k] dt,
with the Lie-derivative term exact for trig-polynomial coefficients.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .fields import VectorFieldSet
from .geometry import wrap_torus
from .noise import NoisePath
from .trig import TrigPoly, quadrature_grid

SCHEMES = {"heun": kernels.SCHEME_HEUN, "ito_euler": kernels.SCHEME_ITO_EULER}
DEFAULT_QR_EVERY = 10
_GRID_TOL = 1e-9
_MAX_BLOCK = 1024


class FlowError(RuntimeError):
    pass


class FlowOverflowError(FlowError):
    """Raised when a realization produced a non-finite state."""


class CenteringError(FlowError):
    """Raised when the centering constant cannot be bounded as requested."""


@dataclass(frozen=True)
class LiftedPoint:
    """A torus point together with its lift to the universal cover."""

    torus: np.ndarray
    lift: np.ndarray


@dataclass
class FunctionalSpec:
    """Additive functional of the n-point motion in Stratonovich form.

    alphas are the d noise coefficients and drift the dt coefficient; all
    are trig polynomials on (T^N)^arity with a common value dimension
    (scalars or vectors).
    """

    arity: int
    alphas: tuple
    drift: TrigPoly
    centered: bool = False
    centering_constants: dict = field(default_factory=dict)

    def __post_init__(self):
        self.alphas = tuple(self.alphas)
        dims = {a.dim for a in self.alphas} | {self.drift.dim}
        vdims = {a.value_dim for a in self.alphas} | {self.drift.value_dim}
        if len(dims) != 1 or len(vdims) != 1:
            raise ValueError("functional coefficients must share domain and value dims")
        if self.drift.dim % self.arity != 0:
            raise ValueError("coefficient domain is not (T^N)^arity")

    @property
    def value_dim(self) -> int:
        return self.drift.value_dim

    @property
    def point_dim(self) -> int:
        return self.drift.dim // self.arity


@dataclass
class MultiPointState:
    """n lifted points sharing one noise path, plus optional tangent frames
    and functional accumulators."""

    step_index: int
    dt: float
    lift: np.ndarray                    # (n, N)
    frames: np.ndarray | None = None    # (n, N, m)
    log_r: np.ndarray | None = None     # (n, m): accumulated log|r_ii| from QR
    log_det: np.ndarray | None = None   # (n,): independent log|det| accumulator
    functionals: list = field(default_factory=list)            # joint, each (V,)
    per_point_functionals: list = field(default_factory=list)  # each (n, V)

    @property
    def n_points(self) -> int:
        return self.lift.shape[0]

    @property
    def dim(self) -> int:
        return self.lift.shape[1]

    @property
    def time(self) -> float:
        return self.step_index * self.dt

    @property
    def torus(self) -> np.ndarray:
        return wrap_torus(self.lift)

    @property
    def points(self) -> list[LiftedPoint]:
        t = self.torus
        return [LiftedPoint(torus=t[i].copy(), lift=self.lift[i].copy())
                for i in range(self.n_points)]

    def copy(self) -> "MultiPointState":
        return MultiPointState(
            step_index=self.step_index, dt=self.dt, lift=self.lift.copy(),
            frames=None if self.frames is None else self.frames.copy(),
            log_r=None if self.log_r is None else self.log_r.copy(),
            log_det=None if self.log_det is None else self.log_det.copy(),
            functionals=[a.copy() for a in self.functionals],
            per_point_functionals=[a.copy() for a in self.per_point_functionals],
        )


@dataclass
class Trajectory:
    """Recorded states on the grid, initial state included."""

    start_index: int
    dt: float
    lift: np.ndarray                  # (S + 1, n, N)
    frames: np.ndarray | None = None  # (S + 1, n, N, m)

    @property
    def times(self) -> np.ndarray:
        return (self.start_index + np.arange(self.lift.shape[0])) * self.dt

    @property
    def torus(self) -> np.ndarray:
        return wrap_torus(self.lift)


def make_state(points, dt: float, t0: float = 0.0, *, frames=None,
               n_functionals: int = 0, functional_dims=(),
               n_per_point: int = 0, per_point_dims=()) -> MultiPointState:
    """Fresh state at time t0 from torus points (n, N); lifts start equal
    to the torus coordinates."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n, N = pts.shape
    idx = _grid_index(t0, dt)
    fr = None
    log_r = None
    log_det = None
    if frames is not None:
        if isinstance(frames, (int, np.integer)):
            m = int(frames)
            fr = np.broadcast_to(np.eye(N)[:, :m], (n, N, m)).copy()
        else:
            fr = np.array(frames, dtype=np.float64)
            if fr.ndim == 2:
                fr = np.broadcast_to(fr, (n,) + fr.shape).copy()
        m = fr.shape[2]
        if m == N:
            dets = np.linalg.det(fr)
            if np.any(dets <= 0):
                raise FlowError("initial frames must have positive determinant")
            log_det = np.zeros(n)
        log_r = np.zeros((n, m))
    return MultiPointState(
        step_index=idx, dt=dt, lift=pts.copy(), frames=fr,
        log_r=log_r, log_det=log_det,
        functionals=[np.zeros(v) for v in (functional_dims or [1] * n_functionals)],
        per_point_functionals=[np.zeros((n, v))
                               for v in (per_point_dims or [1] * n_per_point)],
    )


def _grid_index(t: float, dt: float) -> int:
    idx = round(t / dt)
    if abs(idx * dt - t) > _GRID_TOL * max(1.0, abs(t)):
        raise FlowError(f"time {t} is not on the dt = {dt} grid")
    return int(idx)


def batch_mgs(frames: np.ndarray) -> np.ndarray:
    """In-place modified Gram-Schmidt on a batch of (N, m) frames.

    Returns log|r_jj| per frame (n, m).  Diagonal entries are the column
    norms encountered during orthogonalization, always positive for full
    column rank inputs.
    """
    n, N, m = frames.shape
    logs = np.empty((n, m))
    for j in range(m):
        v = frames[:, :, j].copy()
        for k in range(j):
            proj = np.einsum("ni,ni->n", frames[:, :, k], v)
            v -= proj[:, None] * frames[:, :, k]
        r = np.linalg.norm(v, axis=1)
        logs[:, j] = np.log(r)
        frames[:, :, j] = v / r[:, None]
    return logs


# -- functional accumulation -------------------------------------------------

def _ito_drift_joint(F: VectorFieldSet, spec: FunctionalSpec, pre) -> np.ndarray:
    """phi(z) = a(z) + 1/2 sum_k grad alpha_k(z) . (X_k,...,X_k)(z) on a
    block of configurations pre (B, n, N); returns (B, V)."""
    B, n, N = pre.shape
    Z = pre.reshape(B, n * N)
    phi = spec.drift.eval(Z)
    for k in range(1, F.d + 1):
        diag = F.eval(k, pre).reshape(B, n * N)
        grad = spec.alphas[k - 1].jacobian(Z)        # (B, V, nN)
        phi = phi + 0.5 * np.einsum("bvz,bz->bv", grad, diag)
    return phi


def joint_increments(F: VectorFieldSet, spec: FunctionalSpec, pre, dW,
                     dt: float) -> np.ndarray:
    """Per-step Ito increments of a joint functional: (B, V)."""
    B, n, N = pre.shape
    Z = pre.reshape(B, n * N)
    out = _ito_drift_joint(F, spec, pre) * dt
    for k in range(1, F.d + 1):
        out = out + spec.alphas[k - 1].eval(Z) * dW[:, k - 1][:, None]
    return out


def per_point_increments(F: VectorFieldSet, spec: FunctionalSpec, pre, dW,
                         dt: float) -> np.ndarray:
    """Per-step Ito increments of an arity-1 functional evaluated at every
    point: (B, n, V)."""
    if spec.arity != 1:
        raise ValueError("per-point accumulation requires an arity-1 functional")
    phi = spec.drift.eval(pre)                      # (B, n, V)
    for k in range(1, F.d + 1):
        Xk = F.eval(k, pre)                          # (B, n, N)
        grad = spec.alphas[k - 1].jacobian(pre)      # (B, n, V, N)
        phi = phi + 0.5 * np.einsum("bnvj,bnj->bnv", grad, Xk)
    out = phi * dt
    for k in range(1, F.d + 1):
        out = out + spec.alphas[k - 1].eval(pre) * dW[:, None, k - 1][:, :, None]
    return out


# -- stepping -----------------------------------------------------------------

def evolve(F: VectorFieldSet, initial, path: NoisePath, t0: float, t1: float, *,
           scheme: str = "heun", frames=None, functionals=(),
           per_point_functionals=(), qr_every: int = DEFAULT_QR_EVERY,
           record: bool = False):
    """Advance the n-point state from t0 to t1 under the shared path.

    initial: a MultiPointState (resumed, must sit at t0) or torus points
    (n, N).  functionals / per_point_functionals: FunctionalSpecs whose
    accumulators ride along in the state.  With record=True the full grid
    trajectory is returned as (state, Trajectory).

    Backward integration is rejected; pullback runs integrate forward from
    negative times instead.
    """
    if scheme not in SCHEMES:
        raise FlowError(f"unknown scheme {scheme!r}; expected one of {sorted(SCHEMES)}")
    dt = path.dt
    i0 = _grid_index(t0, dt)
    i1 = _grid_index(t1, dt)
    if i1 <= i0:
        raise FlowError("backward or empty time interval: require t1 > t0")

    functionals = list(functionals)
    per_point = list(per_point_functionals)

    if isinstance(initial, MultiPointState):
        state = initial.copy()
        if state.step_index != i0:
            raise FlowError(f"state sits at t = {state.time}, not t0 = {t0}")
        if abs(state.dt - dt) > 1e-15:
            raise FlowError("state dt does not match path dt")
        if frames is not None and state.frames is None:
            raise FlowError("cannot add frames to an existing state")
        if len(state.functionals) != len(functionals):
            if state.functionals:
                raise FlowError("functional list does not match state accumulators")
            state.functionals = [np.zeros(s.value_dim) for s in functionals]
        if len(state.per_point_functionals) != len(per_point):
            if state.per_point_functionals:
                raise FlowError("per-point functional list does not match state")
            state.per_point_functionals = [
                np.zeros((state.n_points, s.value_dim)) for s in per_point]
    else:
        state = make_state(initial, dt, t0, frames=frames,
                           functional_dims=[s.value_dim for s in functionals],
                           per_point_dims=[s.value_dim for s in per_point])

    for s in functionals:
        if s.arity != state.n_points or s.point_dim != state.dim:
            raise FlowError("joint functional arity/dimension mismatch")
    for s in per_point:
        if s.point_dim != state.dim:
            raise FlowError("per-point functional dimension mismatch")

    packed = F.packed()
    n, N = state.lift.shape
    total = i1 - i0
    have_frames = state.frames is not None
    need_pre = bool(functionals or per_point)

    rec_lift_full = np.empty((total, n, N)) if record else None
    rec_frames_full = (np.empty((total,) + state.frames.shape)
                       if record and have_frames else None)
    init_lift = state.lift.copy() if record else None
    init_frames = state.frames.copy() if record and have_frames else None

    block_limit = qr_every if (have_frames and qr_every > 0) else _MAX_BLOCK
    block_limit = max(1, min(block_limit, _MAX_BLOCK))
    buf = np.empty((min(block_limit, total), n, N)) if (need_pre and not record) else None

    scheme_id = SCHEMES[scheme]
    done = 0
    while done < total:
        b = min(block_limit, total - done)
        dW = path.increments(i0 + done, i0 + done + b)
        if record:
            rec = rec_lift_full[done:done + b]
            rec_f = rec_frames_full[done:done + b] if rec_frames_full is not None else None
        else:
            rec = buf[:b] if buf is not None else None
            rec_f = None
        pre_first = state.lift.copy() if need_pre else None

        bad = kernels.evolve_steps(
            packed.modes2pi, packed.cos_coef, packed.sin_coef, packed.offsets,
            state.lift, state.frames, dW, dt, scheme_id, rec, rec_f)
        if bad >= 0:
            t_bad = (i0 + done + bad + 1) * dt
            raise FlowOverflowError(
                f"non-finite state at t = {t_bad:.6g} (step {i0 + done + bad}); "
                f"|lift| max = {np.nanmax(np.abs(state.lift)):.3g}")

        if need_pre:
            pre = np.concatenate([pre_first[None], rec[:b - 1]]) if b > 1 else pre_first[None]
            for idx, s in enumerate(functionals):
                inc = joint_increments(F, s, pre, dW, dt)
                state.functionals[idx] += np.add.reduce(inc, axis=0)
            for idx, s in enumerate(per_point):
                inc = per_point_increments(F, s, pre, dW, dt)
                state.per_point_functionals[idx] += np.add.reduce(inc, axis=0)

        done += b
        if have_frames and qr_every > 0 and done % qr_every == 0:
            if state.log_det is not None:
                state.log_det += np.log(np.abs(np.linalg.det(state.frames)))
            state.log_r += batch_mgs(state.frames)

    state.step_index = i1
    if record:
        lift_all = np.concatenate([init_lift[None], rec_lift_full])
        frames_all = (np.concatenate([init_frames[None], rec_frames_full])
                      if rec_frames_full is not None else None)
        return state, Trajectory(start_index=i0, dt=dt, lift=lift_all,
                                 frames=frames_all)
    return state


def step(F: VectorFieldSet, state: MultiPointState, path: NoisePath,
         scheme: str = "heun", **kwargs) -> MultiPointState:
    """Advance one grid step."""
    t0 = state.time
    return evolve(F, state, path, t0, t0 + path.dt, scheme=scheme, **kwargs)


def functional_series(F: VectorFieldSet, spec: FunctionalSpec, traj: Trajectory,
                      dW: np.ndarray, per_point: bool = False) -> np.ndarray:
    """Cumulative functional values along a recorded trajectory.

    Returns (S + 1, V) for a joint functional (A_0 = 0) or (S + 1, n, V)
    with per_point=True; dW must be the increments used to produce traj.
    """
    pre = traj.lift[:-1]
    dt = traj.dt
    if per_point:
        inc = per_point_increments(F, spec, pre, dW, dt)
        out = np.zeros((len(traj.lift),) + inc.shape[1:])
    else:
        inc = joint_increments(F, spec, pre, dW, dt)
        out = np.zeros((len(traj.lift), inc.shape[1]))
    np.cumsum(inc, axis=0, out=out[1:])
    return out


# -- centering ----------------------------------------------------------------

def displacement_functional(F: VectorFieldSet) -> FunctionalSpec:
    """The vector functional whose value is the lift displacement:
    alpha_k = X_k, a = X_0 (arity 1, values in R^N)."""
    return FunctionalSpec(arity=1,
                          alphas=tuple(F.poly(k) for k in range(1, F.d + 1)),
                          drift=F.poly(0))


def _mean_drift_samples(F: VectorFieldSet, spec: FunctionalSpec,
                        points: np.ndarray) -> np.ndarray:
    """Evaluate a(z) + 1/2 sum_k L_(X_k..X_k) alpha_k(z) at configurations
    points (B, arity * N); returns (B, V)."""
    B = points.shape[0]
    pre = points.reshape(B, spec.arity, spec.point_dim)
    return _ito_drift_joint(F, spec, pre)


def center_functional(F: VectorFieldSet, spec: FunctionalSpec, *,
                      mc_samples: int | None = None, measure=None,
                      tol: float = 1e-3, seed: int = 0) -> FunctionalSpec:
    """Return a centered copy of the functional.

    Arity >= 2: subtracts from a the mean of a + 1/2 sum_k L alpha_k over
    mu^n.  Arity 1: additionally subtracts the mu-mean from every alpha_k.

    mu is Lebesgue by default, integrated exactly on a tensor grid (trig
    closure makes the grid quadrature exact); pass mc_samples to use a
    seeded Monte Carlo estimate instead, or measure=ParticleMeasure to
    average over a particle approximation of an invariant measure.  Both
    stochastic routes enforce a standard-error gate at tol.
    """
    dim = spec.drift.dim
    alphas = spec.alphas
    constants: dict = {}

    def mean_of(values, weights=None):
        if weights is None:
            return np.add.reduce(values, axis=0) / len(values), 0.0
        w = weights / weights.sum()
        m = np.einsum("b,bv->v", w, values)
        var = np.einsum("b,bv->v", w, (values - m) ** 2)
        ess = 1.0 / np.sum(w * w)
        se = float(np.max(np.sqrt(var / max(ess, 1.0))))
        return m, se

    if measure is not None:
        cloud = np.asarray(measure.torus, dtype=np.float64)
        weights = np.asarray(measure.weights, dtype=np.float64)
        if spec.arity > 1:
            rng = np.random.default_rng(np.random.SeedSequence(seed))
            n_cfg = mc_samples or 4096
            idx = rng.integers(0, len(cloud), size=(n_cfg, spec.arity))
            pts = cloud[idx].reshape(n_cfg, dim)
            wts = np.prod(weights[idx], axis=1)
        else:
            pts = cloud
            wts = weights
        sample_weights = wts
        stochastic = True
    elif mc_samples is not None:
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        pts = rng.random((int(mc_samples), dim))
        sample_weights = None
        stochastic = True
    else:
        # exact tensor-grid quadrature: integrand bandwidth is bounded by
        # max alpha mode + max field mode per axis
        band = max([spec.drift.max_mode] + [a.max_mode for a in alphas]) \
            + max(F.poly(k).max_mode for k in range(F.d + 1))
        pts = quadrature_grid(dim, 2 * band + 1) if band > 0 else np.zeros((1, dim))
        sample_weights = None
        stochastic = False

    if spec.arity == 1:
        new_alphas = []
        for k, a in enumerate(alphas):
            if stochastic:
                vals = a.eval(pts)
                m, se = mean_of(vals, sample_weights)
                if sample_weights is None:
                    se = float(np.max(vals.std(axis=0) / np.sqrt(len(vals))))
                if se > tol:
                    raise CenteringError(
                        f"alpha_{k + 1} mean CI half-width {1.96 * se:.3g} "
                        f"exceeds tol {tol:.3g}; increase samples")
            else:
                m = a.mean()
            constants[f"alpha_{k + 1}"] = np.asarray(m, dtype=np.float64)
            new_alphas.append(a.add_constant(-np.atleast_1d(m)))
        alphas = tuple(new_alphas)
        spec = replace(spec, alphas=alphas)

    vals = _mean_drift_samples(F, replace(spec, alphas=alphas), pts)
    if stochastic:
        m, se = mean_of(vals, sample_weights)
        if sample_weights is None:
            se = float(np.max(vals.std(axis=0) / np.sqrt(len(vals))))
        if se > tol:
            raise CenteringError(
                f"drift mean CI half-width {1.96 * se:.3g} exceeds tol "
                f"{tol:.3g}; increase samples")
    else:
        m = np.add.reduce(vals, axis=0) / len(vals)
    constants["drift"] = np.asarray(m, dtype=np.float64)
    drift = spec.drift.add_constant(-np.atleast_1d(m))

    return FunctionalSpec(arity=spec.arity, alphas=alphas, drift=drift,
                          centered=True, centering_constants=constants)


# -- trajectory export ---------------------------------------------------------

def trajectory_to_csv(traj: Trajectory, fh, header_lines=()) -> None:
    """One row per (time, point): t, point, torus coords, lift coords and,
    when recorded, the frame entries."""
    S1, n, N = traj.lift.shape
    m = traj.frames.shape[3] if traj.frames is not None else 0
    for line in header_lines:
        fh.write(f"# {line}\n")
    writer = csv.writer(fh, lineterminator="\n")
    cols = (["t", "point"]
            + [f"torus_{i}" for i in range(N)]
            + [f"lift_{i}" for i in range(N)]
            + [f"frame_{i}{j}" for i in range(N) for j in range(m)])
    writer.writerow(cols)
    torus = traj.torus
    times = traj.times
    for s in range(S1):
        for p in range(n):
            row = [repr(float(times[s])), p]
            row += [repr(float(v)) for v in torus[s, p]]
            row += [repr(float(v)) for v in traj.lift[s, p]]
            if m:
                row += [repr(float(v)) for v in traj.frames[s, p].ravel()]
            writer.writerow(row)
