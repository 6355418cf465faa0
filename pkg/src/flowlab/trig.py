"""Real trigonometric polynomials on the flat torus [0,1)^D.

Everything dynamical in this package (vector fields, functional
coefficients, observables) is a finite trig polynomial

    f(x) = sum_m  a_m cos(2 pi m.x) + b_m sin(2 pi m.x),   m in Z^D,

with vector values in R^V.  The class keeps the representation canonical
(one representative per {m, -m} pair, zero sin part on the zero mode) so
that evaluation, differentiation and exact torus integration are closed
operations on the coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * np.pi


def _canonicalize(modes, cos_coef, sin_coef):
    """Flip mode signs so the first nonzero component is positive and merge
    duplicate rows.  sin coefficients flip sign with the mode."""
    modes = np.atleast_2d(np.asarray(modes, dtype=np.int64))
    cos_coef = np.atleast_2d(np.asarray(cos_coef, dtype=np.float64))
    sin_coef = np.atleast_2d(np.asarray(sin_coef, dtype=np.float64))
    if not (len(modes) == len(cos_coef) == len(sin_coef)):
        raise ValueError("modes and coefficient arrays must have equal length")
    if cos_coef.shape != sin_coef.shape:
        raise ValueError("cos and sin coefficient shapes differ")
    if not (np.isfinite(cos_coef).all() and np.isfinite(sin_coef).all()):
        raise ValueError("coefficients must be finite")

    merged: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}
    order: list[tuple] = []
    for m, a, b in zip(modes, cos_coef, sin_coef):
        nz = np.nonzero(m)[0]
        if nz.size and m[nz[0]] < 0:
            m = -m
            b = -b
        if nz.size == 0:
            b = np.zeros_like(b)  # sin(0) contributes nothing
        key = tuple(int(v) for v in m)
        if key in merged:
            oa, ob = merged[key]
            merged[key] = (oa + a, ob + b)
        else:
            merged[key] = (a.copy(), b.copy())
            order.append(key)
    out_modes = np.array(order, dtype=np.int64).reshape(len(order), modes.shape[1])
    out_cos = np.array([merged[k][0] for k in order], dtype=np.float64)
    out_sin = np.array([merged[k][1] for k in order], dtype=np.float64)
    return out_modes, out_cos, out_sin


@dataclass(frozen=True)
class TrigPoly:
    """Trig polynomial T^D -> R^V given by (modes, cos_coef, sin_coef)."""

    modes: np.ndarray      # (M, D) int64, canonical representatives
    cos_coef: np.ndarray   # (M, V) float64
    sin_coef: np.ndarray   # (M, V) float64

    def __init__(self, modes, cos_coef, sin_coef):
        m, a, b = _canonicalize(modes, cos_coef, sin_coef)
        object.__setattr__(self, "modes", m)
        object.__setattr__(self, "cos_coef", a)
        object.__setattr__(self, "sin_coef", b)

    # -- basic geometry ----------------------------------------------------
    @property
    def dim(self) -> int:
        return self.modes.shape[1]

    @property
    def value_dim(self) -> int:
        return self.cos_coef.shape[1]

    @property
    def max_mode(self) -> int:
        if len(self.modes) == 0:
            return 0
        return int(np.abs(self.modes).max())

    @classmethod
    def zero(cls, dim: int, value_dim: int = 1) -> "TrigPoly":
        return cls(np.zeros((1, dim), dtype=np.int64),
                   np.zeros((1, value_dim)), np.zeros((1, value_dim)))

    @classmethod
    def constant(cls, dim: int, value) -> "TrigPoly":
        v = np.atleast_1d(np.asarray(value, dtype=np.float64))
        return cls(np.zeros((1, dim), dtype=np.int64),
                   v.reshape(1, -1), np.zeros((1, v.size)))

    # -- evaluation --------------------------------------------------------
    def eval(self, x) -> np.ndarray:
        """Evaluate at points x of shape (..., D); returns (..., V)."""
        x = np.asarray(x, dtype=np.float64)
        phases = TWO_PI * (x @ self.modes.T.astype(np.float64))  # (..., M)
        return np.cos(phases) @ self.cos_coef + np.sin(phases) @ self.sin_coef

    def jacobian(self, x) -> np.ndarray:
        """d f_v / d x_j at points (..., D); returns (..., V, D)."""
        x = np.asarray(x, dtype=np.float64)
        mf = self.modes.astype(np.float64)
        phases = TWO_PI * (x @ mf.T)
        c, s = np.cos(phases), np.sin(phases)
        # d/dx_j [a cos + b sin] = 2 pi m_j (-a sin + b cos)
        return TWO_PI * (np.einsum("...m,mv,mj->...vj", -s, self.cos_coef, mf)
                         + np.einsum("...m,mv,mj->...vj", c, self.sin_coef, mf))

    def directional_derivative(self, x, direction) -> np.ndarray:
        """(grad f . direction) at points (..., D) with direction (..., D)."""
        jac = self.jacobian(x)
        return np.einsum("...vj,...j->...v", jac, np.asarray(direction, dtype=np.float64))

    # -- algebra on coefficients --------------------------------------------
    def mean(self) -> np.ndarray:
        """Exact Lebesgue mean over the torus: the zero-mode cos coefficient."""
        zero = np.all(self.modes == 0, axis=1)
        if zero.any():
            return self.cos_coef[zero][0].copy()
        return np.zeros(self.value_dim)

    def add_constant(self, c) -> "TrigPoly":
        c = np.broadcast_to(np.asarray(c, dtype=np.float64), (self.value_dim,))
        modes = np.vstack([self.modes, np.zeros((1, self.dim), dtype=np.int64)])
        cos_coef = np.vstack([self.cos_coef, c.reshape(1, -1)])
        sin_coef = np.vstack([self.sin_coef, np.zeros((1, self.value_dim))])
        return TrigPoly(modes, cos_coef, sin_coef)

    def __add__(self, other: "TrigPoly") -> "TrigPoly":
        if other.dim != self.dim or other.value_dim != self.value_dim:
            raise ValueError("incompatible trig polynomials")
        return TrigPoly(np.vstack([self.modes, other.modes]),
                        np.vstack([self.cos_coef, other.cos_coef]),
                        np.vstack([self.sin_coef, other.sin_coef]))

    def scale(self, c: float) -> "TrigPoly":
        return TrigPoly(self.modes, c * self.cos_coef, c * self.sin_coef)

    def component(self, v: int) -> "TrigPoly":
        return TrigPoly(self.modes, self.cos_coef[:, v : v + 1], self.sin_coef[:, v : v + 1])

    def embed(self, total_dim: int, offset: int) -> "TrigPoly":
        """View as a polynomial on a larger torus, acting on coordinates
        [offset, offset + D)."""
        if offset < 0 or offset + self.dim > total_dim:
            raise ValueError("embedding window out of range")
        modes = np.zeros((len(self.modes), total_dim), dtype=np.int64)
        modes[:, offset : offset + self.dim] = self.modes
        return TrigPoly(modes, self.cos_coef, self.sin_coef)


def half_space_modes(dim: int, bandwidth: int, include_zero: bool = False) -> np.ndarray:
    """Canonical representatives m with |m|_inf <= bandwidth, one per {m,-m}."""
    if bandwidth < 0:
        raise ValueError("bandwidth must be >= 0")
    grids = np.meshgrid(*([np.arange(-bandwidth, bandwidth + 1)] * dim), indexing="ij")
    all_modes = np.stack([g.ravel() for g in grids], axis=1).astype(np.int64)
    keep = []
    for m in all_modes:
        nz = np.nonzero(m)[0]
        if nz.size == 0:
            if include_zero:
                keep.append(m)
        elif m[nz[0]] > 0:
            keep.append(m)
    return np.array(keep, dtype=np.int64).reshape(-1, dim)


def quadrature_grid(dim: int, points_per_axis: int) -> np.ndarray:
    """Uniform tensor grid on [0,1)^D, flattened to (points_per_axis^D, D).

    Integrates any trig polynomial whose nonzero modes have some component
    not divisible by points_per_axis exactly (discrete orthogonality).
    """
    axis = np.arange(points_per_axis, dtype=np.float64) / points_per_axis
    grids = np.meshgrid(*([axis] * dim), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)
