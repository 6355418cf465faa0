"""Particle-cloud measures on the torus: p-energy, pushforward,
observable averages and normalized displacement samples.

A cloud discretizes a (usually non-atomic) measure nu; the off-diagonal
pair-sum convention for I_p documents that bias.  Clouds carry their
time-0 torus coordinates so displacement statistics never need a second
object.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .flow import LiftedPoint, evolve
from .geometry import torus_distance_matrix, wrap_torus
from .trig import TrigPoly

PAIR_BLOCK = 2 ** 14


class MeasureError(ValueError):
    pass


@dataclass
class ParticleMeasure:
    """Weighted particles with lift tracking.

    torus (n, N) in [0,1)^N, lift (n, N) with lift - torus in Z^N,
    origin (n, N): torus coordinates at creation time (for displacement
    statistics under the flow).
    """

    torus: np.ndarray
    lift: np.ndarray
    weights: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        self.torus = np.atleast_2d(np.asarray(self.torus, dtype=np.float64))
        self.lift = np.atleast_2d(np.asarray(self.lift, dtype=np.float64))
        self.weights = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        self.origin = np.atleast_2d(np.asarray(self.origin, dtype=np.float64))
        if np.any(self.weights < 0):
            raise MeasureError("weights must be nonnegative")
        if not (len(self.torus) == len(self.lift) == len(self.weights)
                == len(self.origin)):
            raise MeasureError("particle arrays must have equal length")

    @property
    def n_particles(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.torus.shape[1]

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    @property
    def particles(self) -> list[LiftedPoint]:
        return [LiftedPoint(torus=self.torus[i].copy(), lift=self.lift[i].copy())
                for i in range(self.n_particles)]

    def is_probability(self, tol: float = 1e-12) -> bool:
        return abs(self.total_mass - 1.0) <= tol

    def scaled(self, c: float) -> "ParticleMeasure":
        return ParticleMeasure(self.torus, self.lift, c * self.weights, self.origin)

    # -- serialization -------------------------------------------------------
    def to_csv(self, fh, header_lines=()) -> None:
        for line in header_lines:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        N = self.dim
        writer.writerow(["weight"] + [f"torus_{i}" for i in range(N)]
                        + [f"lift_{i}" for i in range(N)])
        for i in range(self.n_particles):
            writer.writerow([repr(float(self.weights[i]))]
                            + [repr(float(v)) for v in self.torus[i]]
                            + [repr(float(v)) for v in self.lift[i]])

    @classmethod
    def from_csv(cls, fh) -> "ParticleMeasure":
        rows = [r for r in csv.reader(line for line in fh
                                      if not line.startswith("#")) if r]
        head = rows[0]
        N = sum(1 for c in head if c.startswith("torus_"))
        data = np.array(rows[1:], dtype=np.float64)
        torus = data[:, 1:1 + N]
        lift = data[:, 1 + N:1 + 2 * N]
        return cls(torus=torus, lift=lift, weights=data[:, 0], origin=torus.copy())


def from_points(points, weights=None) -> ParticleMeasure:
    """Cloud at time 0: lifts equal torus coordinates, uniform weights by
    default (normalized to a probability measure)."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    pts = wrap_torus(pts)
    n = len(pts)
    if weights is None:
        weights = np.full(n, 1.0 / n)
    return ParticleMeasure(torus=pts, lift=pts.copy(), weights=weights,
                           origin=pts.copy())


# -- initial-measure generators -------------------------------------------------

def grid_measure(dim: int, per_axis: int) -> ParticleMeasure:
    """Uniform grid cloud with per_axis^dim equal-weight particles."""
    axis = np.arange(per_axis) / per_axis
    grids = np.meshgrid(*([axis] * dim), indexing="ij")
    return from_points(np.stack([g.ravel() for g in grids], axis=1))


def ball_measure(center, radius: float, n: int, seed: int = 0) -> ParticleMeasure:
    """n uniform samples from a Euclidean ball (radius < 1/2) on the torus."""
    center = np.asarray(center, dtype=np.float64)
    dim = center.size
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    out = np.empty((n, dim))
    got = 0
    while got < n:
        cand = rng.uniform(-radius, radius, size=(2 * (n - got) + 16, dim))
        cand = cand[np.sum(cand * cand, axis=1) <= radius * radius]
        take = min(len(cand), n - got)
        out[got:got + take] = center + cand[:take]
        got += take
    return from_points(out)


def curve_measure(dim: int, n: int, center=None, radius: float = 0.25,
                  seed: int = 0) -> ParticleMeasure:
    """n equal-weight samples along a smooth closed curve (a planar circle
    in the first two coordinates), the image-of-a-submanifold case."""
    if dim < 2:
        raise MeasureError("curve measures need dim >= 2")
    if center is None:
        center = np.full(dim, 0.5)
    s = (np.arange(n) + 0.5) / n
    pts = np.tile(np.asarray(center, dtype=np.float64), (n, 1))
    pts[:, 0] += radius * np.cos(2 * np.pi * s)
    pts[:, 1] += radius * np.sin(2 * np.pi * s)
    return from_points(pts)


# -- energy ---------------------------------------------------------------------

def p_energy(nu: ParticleMeasure, p: float) -> float:
    """I_p(nu) = sum_{i != j} w_i w_j / d(x_i, x_j)^p with the torus metric.

    Returns +inf if distinct particles coincide.  Above PAIR_BLOCK
    particles the double sum runs in blocks (a pure reordering, combined
    with compensated accumulation)."""
    if p <= 0:
        raise MeasureError("p must be positive")
    n = nu.n_particles
    if n < 2:
        raise MeasureError("p-energy needs at least 2 particles "
                           "(atomic self-energy is excluded by convention)")
    w = nu.weights
    tor = nu.torus
    total = 0.0
    comp = 0.0  # Kahan carry
    for i0 in range(0, n, PAIR_BLOCK):
        bi = slice(i0, min(i0 + PAIR_BLOCK, n))
        for j0 in range(0, n, PAIR_BLOCK):
            bj = slice(j0, min(j0 + PAIR_BLOCK, n))
            dmat = torus_distance_matrix_blocks(tor[bi], tor[bj])
            if i0 == j0:
                np.fill_diagonal(dmat, np.inf)
            if np.any(dmat == 0.0):
                return float("inf")
            contrib = float(np.sum((w[bi][:, None] * w[bj][None, :]) / dmat ** p))
            y = contrib - comp
            t = total + y
            comp = (t - total) - y
            total = t
    return total


def torus_distance_matrix_blocks(a, b) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    diff -= np.round(diff)
    return np.sqrt(np.sum(diff * diff, axis=-1))


# -- dynamics --------------------------------------------------------------------

def pushforward(F, nu: ParticleMeasure, path, t: float, t0: float = 0.0,
                scheme: str = "heun") -> ParticleMeasure:
    """nu_t: every particle evolved under the shared path; weights and
    origins unchanged."""
    if t == t0:
        return ParticleMeasure(nu.torus.copy(), nu.lift.copy(),
                               nu.weights.copy(), nu.origin.copy())
    state = evolve(F, nu.lift, path, t0, t, scheme=scheme)
    return ParticleMeasure(torus=state.torus, lift=state.lift,
                           weights=nu.weights.copy(), origin=nu.origin.copy())


def observable_average(nu: ParticleMeasure, b: TrigPoly) -> float:
    """integral of b over nu (weighted sum at torus coordinates); b must
    be a scalar trig polynomial with zero constant mode."""
    if b.value_dim != 1:
        raise MeasureError("observable must be scalar-valued")
    if float(np.abs(b.mean()).max()) > 0.0:
        raise MeasureError("observable must have zero constant mode")
    vals = b.eval(nu.torus)[:, 0]
    return float(np.dot(nu.weights, vals))


def displacement_sample(nu_t: ParticleMeasure, drift, t: float):
    """Weighted sample of (lift - origin - v t) / sqrt(t) representing the
    law of the normalized displacement under nu for this realization.

    Returns (samples (n, N), weights (n,))."""
    if not t > 0:
        raise MeasureError("t must be positive")
    v = np.asarray(drift, dtype=np.float64)
    samples = (nu_t.lift - nu_t.origin - v * t) / np.sqrt(t)
    return samples, nu_t.weights.copy()
