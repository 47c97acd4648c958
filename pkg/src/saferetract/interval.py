"""Interval arithmetic and layer-by-layer bound propagation.

Bounds are computed with ordinary round-to-nearest floating point, then each
affine layer is widened by a standard a-priori bound on summation error. The
widening covers both the bound computation and the concrete forward pass, so
a floating-point forward evaluation never escapes the enclosure whatever
order its sums run in. The slack is of order 1e-15 relative to the layer's
magnitudes.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

if TYPE_CHECKING:
    from .network import Network


class IntervalError(ValueError):
    """Raised for malformed intervals/boxes or dimension mismatches."""


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float

    def __post_init__(self):
        lo, hi = float(self.lo), float(self.hi)
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise IntervalError(f"interval endpoints must be finite, got [{lo}, {hi}]")
        if lo > hi:
            raise IntervalError(f"interval lower bound {lo} exceeds upper bound {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def width(self) -> float:
        return self.hi - self.lo

    @property
    def mid(self) -> float:
        return 0.5 * (self.lo + self.hi)

    def __contains__(self, value) -> bool:
        if isinstance(value, Interval):
            return self.lo <= value.lo and value.hi <= self.hi
        return self.lo <= value <= self.hi

    def overlaps(self, other: "Interval") -> bool:
        return self.lo <= other.hi and other.lo <= self.hi

    def __add__(self, other: "Interval") -> "Interval":
        return Interval(self.lo + other.lo, self.hi + other.hi)

    def __sub__(self, other: "Interval") -> "Interval":
        return Interval(self.lo - other.hi, self.hi - other.lo)

    def __neg__(self) -> "Interval":
        return Interval(-self.hi, -self.lo)

    def __mul__(self, other) -> "Interval":
        if not isinstance(other, Interval):
            other = Interval(other, other)
        corners = (self.lo * other.lo, self.lo * other.hi, self.hi * other.lo, self.hi * other.hi)
        return Interval(min(corners), max(corners))

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"[{self.lo!r}, {self.hi!r}]"


class Box:
    """Axis-aligned product of closed intervals.

    Endpoints are held as two read-only float64 arrays so boxes can be fed
    straight into the vectorised propagation routines.
    """

    __slots__ = ("lo", "hi")

    def __init__(self, lo, hi):
        lo = np.array(lo, dtype=np.float64).reshape(-1)
        hi = np.array(hi, dtype=np.float64).reshape(-1)
        if lo.shape != hi.shape:
            raise IntervalError(f"box bound shapes differ: {lo.shape} vs {hi.shape}")
        if lo.size == 0:
            raise IntervalError("box must have at least one dimension")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise IntervalError("box endpoints must be finite")
        bad = np.flatnonzero(lo > hi)
        if bad.size:
            k = int(bad[0])
            raise IntervalError(f"box dimension {k}: lower bound {lo[k]} exceeds upper bound {hi[k]}")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def __setattr__(self, name, value):
        raise AttributeError("Box is immutable")

    @classmethod
    def from_intervals(cls, dims: Iterable[Interval | Sequence[float]]) -> "Box":
        pairs = [(d.lo, d.hi) if isinstance(d, Interval) else tuple(d) for d in dims]
        if not pairs:
            raise IntervalError("box must have at least one dimension")
        lo, hi = zip(*pairs)
        return cls(lo, hi)

    @classmethod
    def point(cls, x) -> "Box":
        x = np.asarray(x, dtype=np.float64)
        return cls(x, x)

    @property
    def dims(self) -> tuple[Interval, ...]:
        return tuple(Interval(a, b) for a, b in zip(self.lo, self.hi))

    @property
    def ndim(self) -> int:
        return self.lo.size

    def __len__(self) -> int:
        return self.lo.size

    def __getitem__(self, k: int) -> Interval:
        return Interval(self.lo[k], self.hi[k])

    @property
    def widths(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def volume(self) -> float:
        return float(np.prod(self.widths))

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.ndim:
            raise IntervalError(f"point has {x.shape[-1]} dims, box has {self.ndim}")
        return bool(np.all((self.lo <= x) & (x <= self.hi)))

    def issubset(self, other: "Box") -> bool:
        _check_same_dim(self, other)
        return bool(np.all(other.lo <= self.lo) and np.all(self.hi <= other.hi))

    def hull(self, other: "Box") -> "Box":
        _check_same_dim(self, other)
        return Box(np.minimum(self.lo, other.lo), np.maximum(self.hi, other.hi))

    def bisect(self, dim: int) -> tuple["Box", "Box"]:
        mid = 0.5 * (self.lo[dim] + self.hi[dim])
        left_hi = self.hi.copy()
        left_hi[dim] = mid
        right_lo = self.lo.copy()
        right_lo[dim] = mid
        return Box(self.lo, left_hi), Box(right_lo, self.hi)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=(n, self.ndim))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Box):
            return NotImplemented
        return np.array_equal(self.lo, other.lo) and np.array_equal(self.hi, other.hi)

    def __hash__(self) -> int:
        return hash((self.lo.tobytes(), self.hi.tobytes()))

    def __repr__(self) -> str:
        inner = ", ".join(f"[{a!r}, {b!r}]" for a, b in zip(self.lo, self.hi))
        return f"Box({inner})"


def _check_same_dim(a: Box, b: Box) -> None:
    if a.ndim != b.ndim:
        raise IntervalError(f"box dimension mismatch: {a.ndim} vs {b.ndim}")


# -- vectorised kernels -------------------------------------------------------
# lo/hi are (n_boxes, n_dims) arrays. These are the hot path of the verifier.

def affine_bounds_array(weights: np.ndarray, biases: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    w_pos = np.maximum(weights, 0.0)
    w_neg = np.minimum(weights, 0.0)
    out_lo = lo @ w_pos.T + hi @ w_neg.T + biases
    out_hi = hi @ w_pos.T + lo @ w_neg.T + biases
    # Any order of summing n terms errs by at most n*u*sum|terms| (u = eps/2);
    # take one such bound for our sums and one for the forward pass, doubled.
    n_terms = 2 * weights.shape[1] + 2
    mag = np.maximum(np.abs(lo), np.abs(hi)) @ np.abs(weights).T + np.abs(biases)
    slack = (2.0 * n_terms * _EPS) * mag
    return out_lo - slack, out_hi + slack


_EPS = float(np.finfo(np.float64).eps)


def relu_bounds_array(lo: np.ndarray, hi: np.ndarray):
    return np.maximum(lo, 0.0), np.maximum(hi, 0.0)


def propagate_array(network: "Network", lo: np.ndarray, hi: np.ndarray):
    """Propagate a batch of boxes; returns (out_lo, out_hi) of shape (n, output_dim)."""
    lo = np.atleast_2d(np.asarray(lo, dtype=np.float64))
    hi = np.atleast_2d(np.asarray(hi, dtype=np.float64))
    if lo.shape[1] != network.input_dim:
        raise IntervalError(f"input has {lo.shape[1]} dims, network expects {network.input_dim}")
    for layer in network.layers:
        lo, hi = affine_bounds_array(layer.weights, layer.biases, lo, hi)
        if layer.activation == "relu":
            lo, hi = relu_bounds_array(lo, hi)
    return lo, hi


# -- box-level API --------------------------------------------------------------

def affine_bounds(weights, biases, box: Box) -> Box:
    """Interval image of ``x -> W x + b`` over ``box``.

    Each output row is ``sum_k min(w_k lo_k, w_k hi_k) + b`` for the lower
    bound and the matching max for the upper bound.
    """
    weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    biases = np.asarray(biases, dtype=np.float64).reshape(-1)
    if weights.shape[1] != box.ndim:
        raise IntervalError(f"weight matrix has {weights.shape[1]} columns, box has {box.ndim} dims")
    if biases.size != weights.shape[0]:
        raise IntervalError(f"bias length {biases.size} does not match {weights.shape[0]} weight rows")
    lo, hi = affine_bounds_array(weights, biases, box.lo[None, :], box.hi[None, :])
    return Box(lo[0], hi[0])


def relu_bounds(box: Box) -> Box:
    lo, hi = relu_bounds_array(box.lo, box.hi)
    return Box(lo, hi)


def propagate(network: "Network", box: Box) -> Box:
    """Enclosure of the network's image of ``box`` by layer-wise interval propagation."""
    if box.ndim != network.input_dim:
        raise IntervalError(f"box has {box.ndim} dims, network expects {network.input_dim}")
    lo, hi = propagate_array(network, box.lo[None, :], box.hi[None, :])
    return Box(lo[0], hi[0])


class Comparison(enum.Enum):
    LESS = "less"
    GREATER = "greater"
    UNKNOWN = "unknown"


def moore_compare(yi: Interval, yj: Interval) -> Comparison:
    """Order two intervals: LESS iff yi.hi < yj.lo, GREATER iff yi.lo > yj.hi."""
    if yi.hi < yj.lo:
        return Comparison.LESS
    if yi.lo > yj.hi:
        return Comparison.GREATER
    return Comparison.UNKNOWN
