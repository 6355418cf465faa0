"""Periodic vector-field sets on the flat torus T^N = [0,1)^N.

A driving set consists of d+1 trig-polynomial fields X_0 ... X_d (X_0 is
the drift).  Values, Jacobians and divergences are closed forms of the
coefficients; nothing in the core evaluators uses finite differences.
Bracket expressions and the nondegeneracy rank checks live here too.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .trig import TrigPoly, half_space_modes

RANK_TOLERANCE = 1e-8        # relative singular-value cutoff for rank reports
MAX_BRACKET_DEPTH = 6
_BRACKET_BASE_STEP = 1e-4    # FD step when differentiating a depth-1 bracket


class FieldSetError(ValueError):
    pass


@dataclass(frozen=True)
class TrigCoefficient:
    """One Fourier mode of a vector field: value a cos(2 pi m.x) + b sin(2 pi m.x)."""

    mode: tuple[int, ...]
    cos_part: np.ndarray
    sin_part: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mode", tuple(int(v) for v in self.mode))
        object.__setattr__(self, "cos_part", np.asarray(self.cos_part, dtype=np.float64))
        object.__setattr__(self, "sin_part", np.asarray(self.sin_part, dtype=np.float64))


@dataclass(frozen=True)
class PackedFields:
    """Flat coefficient arrays consumed by the stepping kernels.

    Row r carries one mode of one field; rows of field k live at
    offsets[k]:offsets[k+1].  modes2pi stores 2 pi m for direct use as
    phase gradients.
    """

    modes2pi: np.ndarray   # (R, N) float64
    cos_coef: np.ndarray   # (R, N) float64
    sin_coef: np.ndarray   # (R, N) float64
    offsets: np.ndarray    # (d + 2,) int64


class VectorFieldSet:
    """d+1 periodic trig-polynomial fields with exact derivatives."""

    def __init__(self, dim: int, d: int, fields: list[list[TrigCoefficient]],
                 divergence_free: bool = False):
        if dim < 1 or d < 1:
            raise FieldSetError("need dim >= 1 and d >= 1")
        if len(fields) != d + 1:
            raise FieldSetError(f"expected {d + 1} fields (X0..X{d}), got {len(fields)}")
        self.dim = dim
        self.d = d
        self.divergence_free = bool(divergence_free)
        self.fields: list[list[TrigCoefficient]] = [list(f) for f in fields]
        self._polys: list[TrigPoly] = []
        for coeffs in self.fields:
            if coeffs:
                modes = np.array([c.mode for c in coeffs], dtype=np.int64)
                cos_c = np.array([c.cos_part for c in coeffs], dtype=np.float64)
                sin_c = np.array([c.sin_part for c in coeffs], dtype=np.float64)
                self._polys.append(TrigPoly(modes, cos_c, sin_c))
            else:
                self._polys.append(TrigPoly.zero(dim, dim))
        for p in self._polys:
            if p.dim != dim or p.value_dim != dim:
                raise FieldSetError("coefficient shapes inconsistent with dim")
        if self.divergence_free:
            bad = _max_divergence_residual(self._polys)
            if bad > 1e-12:
                raise FieldSetError(
                    f"divergence_free flag set but m.coefficient residual is {bad:.3e}")
        self._packed = _pack(self._polys)

    # -- evaluation ---------------------------------------------------------
    def poly(self, k: int) -> TrigPoly:
        if not 0 <= k <= self.d:
            raise IndexError(f"field index {k} out of range 0..{self.d}")
        return self._polys[k]

    def eval(self, k: int, x) -> np.ndarray:
        """X_k at torus points x of shape (..., N)."""
        return self.poly(k).eval(x)

    def jacobian(self, k: int, x) -> np.ndarray:
        """DX_k at x: entries d(X_k)_i / dx_j, shape (..., N, N)."""
        return self.poly(k).jacobian(x)

    def divergence(self, k: int, x) -> np.ndarray:
        """div X_k = trace DX_k at x."""
        jac = self.jacobian(k, x)
        return np.trace(jac, axis1=-2, axis2=-1)

    def packed(self) -> PackedFields:
        return self._packed

    # -- serialization -------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": "flowlab-fieldset-v1",
            "dim": self.dim,
            "d": self.d,
            "divergence_free": self.divergence_free,
            "fields": [
                [{"mode": list(c.mode),
                  "cos": [float(v) for v in c.cos_part],
                  "sin": [float(v) for v in c.sin_part]}
                 for c in coeffs]
                for coeffs in self.fields
            ],
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def from_dict(cls, data: dict) -> "VectorFieldSet":
        if data.get("format") != "flowlab-fieldset-v1":
            raise FieldSetError("unrecognized field-set format")
        fields = [
            [TrigCoefficient(tuple(c["mode"]), np.array(c["cos"]), np.array(c["sin"]))
             for c in coeffs]
            for coeffs in data["fields"]
        ]
        return cls(int(data["dim"]), int(data["d"]), fields,
                   divergence_free=bool(data["divergence_free"]))

    @classmethod
    def load(cls, path) -> "VectorFieldSet":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _pack(polys: list[TrigPoly]) -> PackedFields:
    from .trig import TWO_PI

    rows_m, rows_c, rows_s, offsets = [], [], [], [0]
    for p in polys:
        rows_m.append(p.modes.astype(np.float64) * TWO_PI)
        rows_c.append(p.cos_coef)
        rows_s.append(p.sin_coef)
        offsets.append(offsets[-1] + len(p.modes))
    return PackedFields(
        modes2pi=np.ascontiguousarray(np.vstack(rows_m)),
        cos_coef=np.ascontiguousarray(np.vstack(rows_c)),
        sin_coef=np.ascontiguousarray(np.vstack(rows_s)),
        offsets=np.array(offsets, dtype=np.int64),
    )


def _max_divergence_residual(polys: list[TrigPoly]) -> float:
    worst = 0.0
    for p in polys:
        for m, a, b in zip(p.modes, p.cos_coef, p.sin_coef):
            worst = max(worst, abs(float(m @ a)), abs(float(m @ b)))
    return worst


def project_divergence_free(mode, vec) -> np.ndarray:
    """Orthogonal projection of a coefficient vector onto {v : m.v = 0}."""
    m = np.asarray(mode, dtype=np.float64)
    v = np.asarray(vec, dtype=np.float64)
    m2 = float(m @ m)
    if m2 == 0.0:
        return v.copy()
    return v - (float(m @ v) / m2) * m


def make_field_set(dim: int, d: int, *, bandwidth: int = 1, seed: int | None = None,
                   divergence_free: bool = False, coefficients=None,
                   amplitude: float = 1.0, decay: float = 1.0,
                   include_constant: bool = False) -> VectorFieldSet:
    """Construct a field set, either from explicit coefficients or randomly.

    Random draws put independent N(0, sigma_m^2) components on each canonical
    mode with sigma_m = amplitude / (1 + |m|^2)^(decay / 2).  With
    divergence_free set, every nonzero-mode coefficient vector is projected
    onto {v : m.v = 0}, so div X_k vanishes identically.
    """
    if dim < 1 or d < 1:
        raise FieldSetError("need dim >= 1 and d >= 1")

    if coefficients is not None:
        fields = []
        for spec_coeffs in coefficients:
            coeffs = []
            for mode, cos_part, sin_part in spec_coeffs:
                mode = tuple(int(v) for v in mode)
                a = np.asarray(cos_part, dtype=np.float64)
                b = np.asarray(sin_part, dtype=np.float64)
                if not (np.isfinite(a).all() and np.isfinite(b).all()):
                    raise FieldSetError("explicit coefficients must be finite")
                if divergence_free and any(mode):
                    if dim == 1 and (np.any(a != 0) or np.any(b != 0)):
                        raise FieldSetError(
                            "no nonconstant divergence-free trig field exists in 1D")
                    a = project_divergence_free(mode, a)
                    b = project_divergence_free(mode, b)
                coeffs.append(TrigCoefficient(mode, a, b))
            fields.append(coeffs)
        if len(fields) != d + 1:
            raise FieldSetError(f"expected coefficients for {d + 1} fields")
        return VectorFieldSet(dim, d, fields, divergence_free=divergence_free)

    if divergence_free and dim == 1 and bandwidth >= 1:
        raise FieldSetError("no nonconstant divergence-free trig field exists in 1D")

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    modes = half_space_modes(dim, bandwidth, include_zero=include_constant)
    fields = []
    for _ in range(d + 1):
        coeffs = []
        for m in modes:
            sigma = amplitude / (1.0 + float(m @ m)) ** (decay / 2.0)
            a = rng.normal(0.0, sigma, size=dim)
            b = rng.normal(0.0, sigma, size=dim)
            if not any(m):
                b = np.zeros(dim)
            elif divergence_free:
                a = project_divergence_free(m, a)
                b = project_divergence_free(m, b)
            coeffs.append(TrigCoefficient(tuple(m), a, b))
        fields.append(coeffs)
    return VectorFieldSet(dim, d, fields, divergence_free=divergence_free)


# -- bracket expressions ----------------------------------------------------

@dataclass(frozen=True)
class FieldExpr:
    """A bracket tree over base-field indices.

    Leaves hold a field index; interior nodes are Lie brackets of their
    children.  depth is the tree height (leaves have depth 0).
    """

    index: int | None = None
    left: "FieldExpr | None" = None
    right: "FieldExpr | None" = None
    depth: int = 0

    @classmethod
    def leaf(cls, k: int) -> "FieldExpr":
        return cls(index=k)

    def is_leaf(self) -> bool:
        return self.index is not None

    def __str__(self) -> str:
        if self.is_leaf():
            return f"X{self.index}"
        return f"[{self.left},{self.right}]"


def lie_bracket(F: VectorFieldSet, e1: FieldExpr, e2: FieldExpr) -> FieldExpr:
    for e in (e1, e2):
        _validate_expr(F, e)
    depth = 1 + max(e1.depth, e2.depth)
    if depth > MAX_BRACKET_DEPTH:
        raise FieldSetError(f"bracket depth {depth} exceeds maximum {MAX_BRACKET_DEPTH}")
    return FieldExpr(left=e1, right=e2, depth=depth)


def _validate_expr(F: VectorFieldSet, e: FieldExpr) -> None:
    if e.is_leaf():
        if not 0 <= e.index <= F.d:
            raise FieldSetError(f"field index {e.index} out of range 0..{F.d}")
    else:
        _validate_expr(F, e.left)
        _validate_expr(F, e.right)


def eval_expr(F: VectorFieldSet, e: FieldExpr, x) -> np.ndarray:
    """Evaluate a bracket expression at a single torus point.

    [e1,e2](x) = De2(x).e1(x) - De1(x).e2(x).  Base-field Jacobians are
    exact; Jacobians of composite expressions use nested central
    differences with step 1e-4 * 10^(depth-1).
    """
    x = np.asarray(x, dtype=np.float64)
    _validate_expr(F, e)
    return _eval_expr(F, e, x)


def _eval_expr(F, e, x):
    if e.is_leaf():
        return F.eval(e.index, x)
    v1 = _eval_expr(F, e.left, x)
    v2 = _eval_expr(F, e.right, x)
    j2 = _expr_jacobian(F, e.right, x)
    j1 = _expr_jacobian(F, e.left, x)
    return j2 @ v1 - j1 @ v2


def _expr_jacobian(F, e, x):
    if e.is_leaf():
        return F.jacobian(e.index, x)
    h = _BRACKET_BASE_STEP * 10.0 ** (e.depth - 1)
    n = F.dim
    jac = np.empty((n, n))
    for j in range(n):
        step = np.zeros(n)
        step[j] = h
        jac[:, j] = (_eval_expr(F, e, x + step) - _eval_expr(F, e, x - step)) / (2.0 * h)
    return jac


# -- rank checks ------------------------------------------------------------

@dataclass(frozen=True)
class RankReport:
    """Numerical span evidence for one nondegeneracy check at one point."""

    rank: int
    target: int
    passed: bool
    singular_values: np.ndarray
    depth: int
    n_columns: int
    note: str = ""

    def __str__(self) -> str:
        status = "pass" if self.passed else f"fail at depth {self.depth}"
        return (f"rank {self.rank}/{self.target} from {self.n_columns} brackets "
                f"({status})")


def enumerate_brackets(F: VectorFieldSet, depth: int,
                       include_drift: bool = False) -> list[FieldExpr]:
    """All bracket expressions of tree height <= depth over X_1..X_d
    (optionally including X_0), deduplicated only by the trivial [e,e] = 0."""
    if depth < 1:
        raise FieldSetError("depth must be >= 1")
    indices = range(0 if include_drift else 1, F.d + 1)
    levels: list[list[FieldExpr]] = [[FieldExpr.leaf(k) for k in indices]]
    for h in range(1, depth):
        pool = [e for lv in levels for e in lv]
        new = []
        for i, a in enumerate(pool):
            for b in pool[i + 1:]:
                if max(a.depth, b.depth) == h - 1:
                    new.append(FieldExpr(left=a, right=b, depth=h))
        levels.append(new)
    return [e for lv in levels for e in lv]


def _rank_from_columns(columns: np.ndarray, target: int, depth: int,
                       note: str = "") -> RankReport:
    sv = np.linalg.svd(columns, compute_uv=False) if columns.size else np.zeros(1)
    cutoff = RANK_TOLERANCE * (sv[0] if sv.size and sv[0] > 0 else 1.0)
    rank = int((sv > cutoff).sum())
    return RankReport(rank=rank, target=target, passed=rank >= target,
                      singular_values=sv, depth=depth,
                      n_columns=columns.shape[1] if columns.ndim == 2 else 0,
                      note=note)


def bracket_span_rank(F: VectorFieldSet, points, depth: int,
                      include_drift: bool = False) -> RankReport:
    """Rank of the span of bracket columns for the n-point motion.

    points: (N,) for the one-point check or (n, N) with pairwise distinct
    rows for the n-point check.  Each bracket column stacks the expression
    evaluated at every point (the diagonal action of the driving fields).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n, N = pts.shape
    if N != F.dim:
        raise FieldSetError("points have wrong dimension")
    if n >= 2:
        from .geometry import min_pairwise_distance
        if min_pairwise_distance(pts) < 1e-12:
            raise FieldSetError(
                "configuration lies on the generalized diagonal; "
                "the n-point nondegeneracy check requires pairwise distinct points")
    exprs = enumerate_brackets(F, depth, include_drift=include_drift)
    cols = np.empty((n * N, len(exprs)))
    for c, e in enumerate(exprs):
        for i in range(n):
            cols[i * N:(i + 1) * N, c] = _eval_expr(F, e, pts[i])
    return _rank_from_columns(cols, target=n * N, depth=depth)


def check_projective_hypoellipticity(F: VectorFieldSet, x, u,
                                     depth: int) -> RankReport:
    """Rank of the bracket span of the induced fields on the unit tangent
    bundle T^N x S^(N-1) at v = (x, u), against dim = 2N - 1.

    The induced field is Xt_k(x, u) = (X_k(x), (I - u u^T) DX_k(x) u); its
    brackets are computed by central differences on a local chart
    (x, s) -> (x, normalize(u + E s)) with E an orthonormal basis of u-perp.
    """
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    N = F.dim
    if x.shape != (N,) or u.shape != (N,):
        raise FieldSetError("x and u must be N-vectors")
    if abs(float(u @ u) - 1.0) > 1e-12:
        raise FieldSetError("u must be a unit vector (|u| = 1 within 1e-12)")

    # orthonormal completion of u
    basis = np.linalg.qr(np.column_stack([u] + [e for e in np.eye(N)]))[0]
    E = basis[:, 1:N]  # (N, N-1)
    dim_chart = 2 * N - 1

    def chart_field(k):
        def g(y):
            xx, s = y[:N], y[N:]
            w_raw = u + E @ s
            norm = float(np.linalg.norm(w_raw))
            w = w_raw / norm
            horiz = F.eval(k, xx)
            vert = F.jacobian(k, xx) @ w
            vert = vert - w * float(w @ vert)
            # invert the chart differential J(s) = (I - w w^T) E / |u + E s|
            J = (E - np.outer(w, w @ E)) / norm
            s_dot = np.linalg.lstsq(J, vert, rcond=None)[0]
            return np.concatenate([horiz, s_dot])
        return g

    base = [chart_field(k) for k in range(1, F.d + 1)]
    y0 = np.concatenate([x, np.zeros(N - 1)])
    exprs = enumerate_brackets(F, depth)  # reuse the tree shapes
    cols = np.empty((dim_chart, len(exprs)))
    for c, e in enumerate(exprs):
        cols[:, c] = _eval_numeric_expr(e, base, y0)
    return _rank_from_columns(cols, target=dim_chart, depth=depth,
                              note="unit-tangent-bundle check")


def _eval_numeric_expr(e: FieldExpr, base, y):
    if e.is_leaf():
        # base list indexes X_1..X_d
        return base[e.index - 1](y)
    v1 = _eval_numeric_expr(e.left, base, y)
    v2 = _eval_numeric_expr(e.right, base, y)
    j2 = _numeric_jacobian(e.right, base, y)
    j1 = _numeric_jacobian(e.left, base, y)
    return j2 @ v1 - j1 @ v2


def _numeric_jacobian(e: FieldExpr, base, y):
    # leaves get one notch tighter steps than depth-1 brackets
    h = _BRACKET_BASE_STEP * 10.0 ** (e.depth - 1) if e.depth >= 1 else 1e-5
    n = y.size
    jac = np.empty((n, n))
    for j in range(n):
        step = np.zeros(n)
        step[j] = h
        jac[:, j] = (_eval_numeric_expr(e, base, y + step)
                     - _eval_numeric_expr(e, base, y - step)) / (2.0 * h)
    return jac
