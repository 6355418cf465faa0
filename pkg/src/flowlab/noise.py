"""Seeded two-sided Brownian driving paths with bridge refinement.

Every increment is a pure function of (seed, stream_id, level, index):
level-0 increments come from a Philox generator keyed per block of
indices, and each refinement level derives its increments from the level
above via Brownian-bridge midpoints.  No state is stored beyond a cache,
so paths can be recomputed, extended to more negative indices, or sampled
concurrently without coordination.

Increments are snapped to the dyadic lattice 2^-(33 + level).  The offset
is ~1e-10, far below every statistical tolerance in the package, and it
buys exact binary64 identities: refined pairs sum to their coarse
increment exactly, and partial sums telescope exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BLOCK = 1024                # increments generated per generator key
MAX_REFINEMENT_LEVEL = 16   # lattice sums stay exact well past this depth
_LATTICE_BASE = 2.0 ** -33


class NoiseError(ValueError):
    pass


def _zigzag(i: int) -> int:
    """Map a signed index to a distinct nonnegative one (for spawn keys)."""
    return 2 * i if i >= 0 else -2 * i - 1


def _block_generator(seed: int, stream_id: int, level: int, block: int,
                     kind: int) -> np.random.Generator:
    ss = np.random.SeedSequence(
        entropy=seed,
        spawn_key=(kind, stream_id, level, _zigzag(block)),
    )
    return np.random.Generator(np.random.Philox(ss))


def _snap(values: np.ndarray, lattice: float) -> np.ndarray:
    return np.round(values / lattice) * lattice


@dataclass
class NoisePath:
    """Grid-sampled d-dimensional Brownian path theta(t), t = i * dt.

    increment(i) covers [i*dt, (i+1)*dt) and is available for
    i_min <= i < i_max.  value(i) = theta(i*dt) is anchored at value(0) = 0.
    Instances are immutable; range extension and refinement return new
    paths sharing the generator parameters.
    """

    seed: int
    stream_id: int
    d: int
    dt: float
    i_min: int
    i_max: int
    level: int = 0
    parent: "NoisePath | None" = None
    _blocks: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.d < 1:
            raise NoiseError("d must be >= 1")
        if not self.dt > 0:
            raise NoiseError("dt must be positive")
        if self.i_max <= self.i_min:
            raise NoiseError("index range is empty")
        if self.level > MAX_REFINEMENT_LEVEL:
            raise NoiseError(
                f"refinement level {self.level} exceeds maximum {MAX_REFINEMENT_LEVEL}")

    # -- generation ----------------------------------------------------------
    @property
    def _lattice(self) -> float:
        return _LATTICE_BASE * 2.0 ** -self.level

    def _block(self, b: int) -> np.ndarray:
        blk = self._blocks.get(b)
        if blk is not None:
            return blk
        if self.level == 0:
            g = _block_generator(self.seed, self.stream_id, 0, b, kind=0)
            blk = _snap(g.standard_normal((BLOCK, self.d)) * np.sqrt(self.dt),
                        self._lattice)
        else:
            # fine indices [b*BLOCK, (b+1)*BLOCK) pair up over coarse
            # indices [b*BLOCK/2, (b+1)*BLOCK/2); generation is index-pure,
            # so the parent's advertised range does not apply here
            c0 = b * BLOCK // 2
            coarse = self.parent._gather(c0, c0 + BLOCK // 2)
            g = _block_generator(self.seed, self.stream_id, self.level, b, kind=1)
            mids = _snap(g.standard_normal((BLOCK // 2, self.d))
                         * (0.5 * np.sqrt(2.0 * self.dt)), self._lattice)
            half = 0.5 * coarse  # exact: both operands on the coarse lattice
            blk = np.empty((BLOCK, self.d))
            blk[0::2] = half + mids
            blk[1::2] = half - mids
        blk.setflags(write=False)
        self._blocks[b] = blk
        return blk

    # -- access ---------------------------------------------------------------
    def increment(self, i: int) -> np.ndarray:
        if not self.i_min <= i < self.i_max:
            raise NoiseError(f"index {i} outside range [{self.i_min}, {self.i_max})")
        b, r = divmod(i, BLOCK)
        return self._block(b)[r]

    def increments(self, i0: int, i1: int) -> np.ndarray:
        """Increments for indices [i0, i1) as an (i1 - i0, d) array."""
        if i1 < i0:
            raise NoiseError("need i0 <= i1")
        if not (self.i_min <= i0 and i1 <= self.i_max):
            raise NoiseError(
                f"indices [{i0}, {i1}) outside range [{self.i_min}, {self.i_max})")
        return self._gather(i0, i1)

    def _gather(self, i0: int, i1: int) -> np.ndarray:
        out = np.empty((i1 - i0, self.d))
        pos = i0
        while pos < i1:
            b, r = divmod(pos, BLOCK)
            take = min(BLOCK - r, i1 - pos)
            out[pos - i0: pos - i0 + take] = self._block(b)[r: r + take]
            pos += take
        return out

    def value(self, i: int) -> np.ndarray:
        """theta(i * dt) = signed sum of increments between 0 and i."""
        if not self.i_min <= i <= self.i_max:
            raise NoiseError(f"index {i} outside range [{self.i_min}, {self.i_max}]")
        if i == 0:
            return np.zeros(self.d)
        if i > 0:
            return self.increments(0, i).sum(axis=0)
        return -self.increments(i, 0).sum(axis=0)

    # -- derived paths ---------------------------------------------------------
    def with_range(self, i_min: int, i_max: int) -> "NoisePath":
        """Same path over a different index window (append-only semantics:
        increments at shared indices are identical)."""
        ext = NoisePath(self.seed, self.stream_id, self.d, self.dt,
                        i_min, i_max, level=self.level, parent=self.parent)
        ext._blocks = self._blocks  # shared cache, immutable blocks
        return ext

    def refine(self) -> "NoisePath":
        """Half-step path consistent with this one: fine(2i) + fine(2i+1)
        equals coarse(i) exactly, midpoint deviations ~ N(0, dt/4)."""
        if self.level + 1 > MAX_REFINEMENT_LEVEL:
            raise NoiseError(
                f"refinement level {self.level + 1} exceeds maximum "
                f"{MAX_REFINEMENT_LEVEL}")
        return NoisePath(self.seed, self.stream_id, self.d, self.dt / 2.0,
                         2 * self.i_min, 2 * self.i_max,
                         level=self.level + 1, parent=self)


def make_path(seed: int, stream_id: int, d: int, dt: float,
              index_range: tuple[int, int]) -> NoisePath:
    """Level-0 path over grid indices [i_min, i_max)."""
    i_min, i_max = int(index_range[0]), int(index_range[1])
    return NoisePath(seed=int(seed), stream_id=int(stream_id), d=int(d),
                     dt=float(dt), i_min=i_min, i_max=i_max)
