"""Branch-and-bound verification of safety properties by interval propagation.

The property's input box is bisected until each subarea is proved (no unsafe
action can win anywhere in it), violated (an unsafe action provably wins
everywhere in it, confirmed by a concrete counterexample) or reaches the
minimum width, at which point it stays undecided. Undecided mass counts
toward the violation rate, which therefore upper-bounds the fraction of the
input box where the policy picks an unsafe action.

Subareas are processed level by level in fixed-size batches taken from a
FIFO queue, so a finite budget is spent on the coarsest boxes first. The batch
sequence depends only on the inputs and ``batch_size``; workers split
each batch into fixed chunks, so results do not depend on the worker count.
"""
from __future__ import annotations

import csv
import enum
import hashlib
import json
import os
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .interval import Box, IntervalError, propagate_array
from .network import Network, forward
from .property import ActionNotSelected, OutputBound, PropertySuite, SafetyProperty

CHUNK = 1024
MAX_ORACLE_POINTS = 10**7


class Verdict(enum.Enum):
    PROVED = "proved"
    VIOLATED = "violated"
    UNDECIDED = "undecided"


_PROVED, _CANDIDATE, _UNDECIDED = 0, 1, 2


def default_workers() -> int:
    return max(1, int(os.environ.get("SAFERETRACT_WORKERS", "1")))


# -- per-box primitives ------------------------------------------------------------

def _classify(network: Network, prop: SafetyProperty, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Interval verdict codes for a batch, before concrete confirmation."""
    out_lo, out_hi = propagate_array(network, lo, hi)
    cond = prop.condition
    if isinstance(cond, OutputBound):
        j = cond.output_index
        req = cond.required
        inside = (out_lo[:, j] >= req.lo) & (out_hi[:, j] <= req.hi)
        disjoint = (out_hi[:, j] < req.lo) | (out_lo[:, j] > req.hi)
    else:
        unsafe = prop.unsafe_mask(network.output_dim)
        # Proved: every unsafe hi lies below some safe lo, i.e. below the largest safe lo.
        inside = out_hi[:, unsafe].max(axis=1) < out_lo[:, ~unsafe].max(axis=1)
        # Violated: some unsafe lo lies above every safe hi.
        disjoint = out_lo[:, unsafe].max(axis=1) > out_hi[:, ~unsafe].max(axis=1)
    codes = np.full(len(lo), _UNDECIDED, dtype=np.int8)
    codes[inside] = _PROVED
    codes[disjoint] = _CANDIDATE
    return codes


def _box_seed(lo: np.ndarray, hi: np.ndarray, seed: int) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(np.ascontiguousarray(lo, dtype=np.float64).tobytes())
    h.update(np.ascontiguousarray(hi, dtype=np.float64).tobytes())
    h.update(int(seed).to_bytes(8, "little", signed=True))
    return int.from_bytes(h.digest(), "little")


def find_counterexample(network: Network, box: Box, prop: SafetyProperty,
                        confirm_samples: int = 32, rng=None) -> Optional[np.ndarray]:
    """Center of ``box`` first, then up to ``confirm_samples`` uniform draws.

    Returns the first point the network gets wrong, or None. The default RNG
    is seeded from the box itself so the answer is reproducible.
    """
    center = box.center
    if prop.is_violated(forward(network, center[None, :]))[0]:
        return center
    if confirm_samples <= 0:
        return None
    if rng is None:
        rng = np.random.default_rng(_box_seed(box.lo, box.hi, 0))
    pts = box.sample(confirm_samples, rng)
    bad = np.flatnonzero(prop.is_violated(forward(network, pts)))
    return pts[bad[0]] if bad.size else None


def check_subarea(network: Network, box: Box, prop: SafetyProperty, confirm_samples: int = 32) -> Verdict:
    """Single-box verdict; interval dominance must be confirmed concretely to count as violated."""
    prop.check_network(network)
    if box.ndim != network.input_dim:
        raise IntervalError(f"box has {box.ndim} dims, network expects {network.input_dim}")
    code = _classify(network, prop, box.lo[None, :], box.hi[None, :])[0]
    if code == _PROVED:
        return Verdict.PROVED
    if code == _CANDIDATE and find_counterexample(network, box, prop, confirm_samples) is not None:
        return Verdict.VIOLATED
    return Verdict.UNDECIDED


def normalized_widths(box: Box, original_widths) -> np.ndarray:
    ow = np.asarray(original_widths, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(ow > 0, box.widths / np.where(ow > 0, ow, 1.0), 0.0)


def split(box: Box, original_widths, min_width_fraction: float = 0.0) -> tuple[Box, Box]:
    """Midpoint bisection of the dimension with the largest normalized width.

    Ties go to the lowest dimension index. Raises ValueError when every
    dimension is already at or below ``min_width_fraction``.
    """
    nw = normalized_widths(box, original_widths)
    d = int(np.argmax(nw))
    if not nw[d] > min_width_fraction:
        raise ValueError("cannot split: every dimension is at the minimum width")
    return box.bisect(d)


def grid_oracle(network: Network, prop: SafetyProperty, points_per_dim: int) -> float:
    """Fraction of a dense grid over the property box where the property fails.

    Degenerate dimensions stay at their single value; the others get
    ``points_per_dim`` evenly spaced points including both endpoints.
    """
    prop.check_network(network)
    box = prop.input_box
    active = np.flatnonzero(box.widths > 0)
    total = points_per_dim ** len(active)
    if total > MAX_ORACLE_POINTS:
        raise ValueError(f"grid too large: {total} points (limit {MAX_ORACLE_POINTS})")
    axes = [np.linspace(box.lo[d], box.hi[d], points_per_dim) for d in active]
    base = box.lo.copy()
    violated = 0
    chunk = 200_000
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total))
        pts = np.repeat(base[None, :], len(idx), axis=0)
        rem = idx
        for d, ax in zip(active[::-1], axes[::-1]):
            pts[:, d] = ax[rem % points_per_dim]
            rem = rem // points_per_dim
        violated += int(prop.is_violated(forward(network, pts)).sum())
    return violated / total


# -- report --------------------------------------------------------------------

@dataclass
class VerificationReport:
    property_name: str
    violation_rate: float
    proved_rate: float
    violated_rate: float
    undecided_rate: float
    counterexamples: list = field(default_factory=list)
    n_counterexamples: int = 0
    subareas_examined: int = 0
    max_depth_reached: int = 0
    wall_time: float = 0.0
    exhausted: bool = False
    config: dict = field(default_factory=dict)
    # Leaf boxes (lo, hi arrays), kept only when requested.
    violated_boxes: Optional[tuple] = field(default=None, repr=False)
    undecided_boxes: Optional[tuple] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "property": self.property_name,
            "violation_rate": self.violation_rate,
            "proved_rate": self.proved_rate,
            "violated_rate": self.violated_rate,
            "undecided_rate": self.undecided_rate,
            "n_counterexamples": self.n_counterexamples,
            "counterexamples": [
                {"input": c["input"].tolist(), "outputs": c["outputs"].tolist(), "action": c["action"]}
                for c in self.counterexamples
            ],
            "subareas_examined": self.subareas_examined,
            "max_depth_reached": self.max_depth_reached,
            "wall_time": self.wall_time,
            "exhausted": self.exhausted,
            "config": self.config,
        }

    def csv_row(self) -> dict:
        return {
            "name": self.property_name,
            "proved": self.proved_rate,
            "violated": self.violated_rate,
            "undecided": self.undecided_rate,
            "violation_rate": self.violation_rate,
            "counterexamples": self.n_counterexamples,
            "subareas": self.subareas_examined,
            "time": round(self.wall_time, 6),
        }


REPORT_CSV_FIELDS = ("name", "proved", "violated", "undecided", "violation_rate", "counterexamples", "subareas", "time")


def write_reports(reports: Sequence[VerificationReport], json_path=None, csv_path=None) -> None:
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump([r.to_dict() for r in reports], fh, indent=1)
            fh.write("\n")
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_CSV_FIELDS)
            w.writeheader()
            for r in reports:
                w.writerow(r.csv_row())


# -- the estimator ---------------------------------------------------------------

class IntervalVerifier(BaseEstimator):
    """Configured verifier; ``verify`` runs one property, ``verify_suite`` many.

    Parameters
    ----------
    min_width_fraction : float
        Subareas whose every dimension is at most this fraction of the
        property's original width are left undecided.
    max_subareas : int
        Budget on examined subareas. Subareas whose children no longer fit in
        the budget count as undecided and the report is flagged ``exhausted``.
    confirm_samples : int
        Random points tried (after the center) to confirm a violation.
    workers : int or None
        Threads per batch; None reads ``SAFERETRACT_WORKERS`` (default 1).
    split_rule : {"widest", "round_robin"}
    """

    def __init__(self, min_width_fraction=2.0**-10, max_subareas=2**22, confirm_samples=32,
                 workers=None, batch_size=4096, split_rule="widest", seed=0,
                 max_counterexamples=100, keep_boxes=False):
        self.min_width_fraction = min_width_fraction
        self.max_subareas = max_subareas
        self.confirm_samples = confirm_samples
        self.workers = workers
        self.batch_size = batch_size
        self.split_rule = split_rule
        self.seed = seed
        self.max_counterexamples = max_counterexamples
        self.keep_boxes = keep_boxes

    def _validate_params(self):
        if not 0.0 < self.min_width_fraction < 1.0:
            raise ValueError("min_width_fraction must be in (0, 1)")
        if self.max_subareas < 1 or self.batch_size < 1:
            raise ValueError("max_subareas and batch_size must be positive")
        if self.split_rule not in ("widest", "round_robin"):
            raise ValueError(f"unknown split_rule {self.split_rule!r}")

    def _max_splits(self) -> int:
        # A dimension split s times may be split again while 2**-s > min_width_fraction.
        m = 0
        while 0.5**m > self.min_width_fraction:
            m += 1
        return m

    def verify(self, network: Network, prop: SafetyProperty) -> VerificationReport:
        self._validate_params()
        prop.check_network(network)
        t0 = time.perf_counter()
        workers = self.workers or default_workers()
        root = prop.input_box
        ndim = root.ndim
        splittable = root.widths > 0
        cap = np.where(splittable, self._max_splits(), 0)

        mass = {"proved": {}, "violated": {}, "undecided": {}}

        def add(kind, depths):
            if depths.size:
                vals, counts = np.unique(depths, return_counts=True)
                bucket = mass[kind]
                for v, c in zip(vals.tolist(), counts.tolist()):
                    bucket[v] = bucket.get(v, 0) + c

        vio_lo, vio_hi, vio_pts, und_lo, und_hi = [], [], [], [], []
        # FIFO of fixed-size batches: boxes are examined shallowest first, so when
        # the budget runs out the undecided remainder is as fine as it can be.
        queue = deque([(root.lo[None, :].copy(), root.hi[None, :].copy(), np.zeros((1, ndim), dtype=np.int16))])
        queued = 1
        examined = 0
        max_depth = 0
        exhausted = False
        pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
        try:
            while queue:
                lo, hi, sp = queue.popleft()
                queued -= len(lo)
                examined += len(lo)
                depth = sp.sum(axis=1)
                max_depth = max(max_depth, int(depth.max()))

                codes = self._classify_batch(network, prop, lo, hi, pool)
                add("proved", depth[codes == _PROVED])

                cand = np.flatnonzero(codes == _CANDIDATE)
                if cand.size:
                    pts, ok = self._confirm(network, prop, lo[cand], hi[cand])
                    conf = cand[ok]
                    add("violated", depth[conf])
                    vio_lo.append(lo[conf])
                    vio_hi.append(hi[conf])
                    vio_pts.append(pts[ok])
                    codes[cand[~ok]] = _UNDECIDED

                und = np.flatnonzero(codes == _UNDECIDED)
                if not und.size:
                    continue
                u_lo, u_hi, u_sp = lo[und], hi[und], sp[und]
                room_mask = u_sp < cap
                terminal = ~room_mask.any(axis=1)
                if terminal.any():
                    add("undecided", depth[und][terminal])
                    if self.keep_boxes:
                        und_lo.append(u_lo[terminal])
                        und_hi.append(u_hi[terminal])
                go = ~terminal
                n_go = int(go.sum())
                if n_go and examined + queued + 2 * n_go > self.max_subareas:
                    # Children would never be examined: the parents stay undecided.
                    exhausted = True
                    add("undecided", depth[und][go])
                    if self.keep_boxes:
                        und_lo.append(u_lo[go])
                        und_hi.append(u_hi[go])
                elif n_go:
                    queued += 2 * n_go
                    self._push_children(queue, u_lo[go], u_hi[go], u_sp[go], room_mask[go])
        finally:
            if pool is not None:
                pool.shutdown()

        rates = {k: _mass(v) for k, v in mass.items()}
        total = rates["proved"] + rates["violated"] + rates["undecided"]
        assert total == 1, f"volume not conserved: {total}"

        counterexamples, n_ce = self._counterexamples(network, vio_lo, vio_hi, vio_pts)
        report = VerificationReport(
            property_name=prop.name,
            violation_rate=float(rates["violated"] + rates["undecided"]),
            proved_rate=float(rates["proved"]),
            violated_rate=float(rates["violated"]),
            undecided_rate=float(rates["undecided"]),
            counterexamples=counterexamples,
            n_counterexamples=n_ce,
            subareas_examined=examined,
            max_depth_reached=max_depth,
            wall_time=time.perf_counter() - t0,
            exhausted=exhausted,
            config={k: v for k, v in self.get_params().items() if k not in ("workers", "keep_boxes")},
        )
        if self.keep_boxes:
            report.violated_boxes = _stack_boxes(vio_lo, vio_hi, ndim)
            report.undecided_boxes = _stack_boxes(und_lo, und_hi, ndim)
        return report

    def verify_suite(self, network: Network, suite: PropertySuite) -> list[VerificationReport]:
        suite = suite.normalized()
        for prop in suite:
            prop.check_network(network)
        return [self.verify(network, prop) for prop in suite]

    # -- internals --

    def _classify_batch(self, network, prop, lo, hi, pool) -> np.ndarray:
        n = len(lo)
        bounds = [(s, min(s + CHUNK, n)) for s in range(0, n, CHUNK)]
        if pool is None or len(bounds) == 1:
            parts = [_classify(network, prop, lo[a:b], hi[a:b]) for a, b in bounds]
        else:
            parts = list(pool.map(lambda ab: _classify(network, prop, lo[ab[0]:ab[1]], hi[ab[0]:ab[1]]), bounds))
        return np.concatenate(parts)

    def _confirm(self, network, prop, lo, hi):
        centers = 0.5 * (lo + hi)
        ok = prop.is_violated(forward(network, centers))
        pts = centers.copy()
        for i in np.flatnonzero(~ok):
            box = Box(lo[i], hi[i])
            rng = np.random.default_rng(_box_seed(lo[i], hi[i], self.seed))
            p = find_counterexample(network, box, prop, self.confirm_samples, rng)
            if p is not None:
                pts[i] = p
                ok[i] = True
        return pts, ok

    def _push_children(self, queue, lo, hi, sp, room_mask):
        if self.split_rule == "widest":
            # Largest normalized width == fewest splits so far; argmin picks the lowest index on ties.
            d = np.argmin(np.where(room_mask, sp, np.iinfo(sp.dtype).max), axis=1)
        else:
            depth = sp.sum(axis=1)
            order = np.cumsum(room_mask, axis=1)
            n_ok = order[:, -1]
            pick = depth % n_ok + 1
            d = np.argmax(order == pick[:, None], axis=1)
        rows = np.arange(len(lo))
        mid = 0.5 * (lo[rows, d] + hi[rows, d])
        left_hi = hi.copy()
        left_hi[rows, d] = mid
        right_lo = lo.copy()
        right_lo[rows, d] = mid
        child_sp = sp.copy()
        child_sp[rows, d] += 1
        c_lo = np.concatenate([lo, right_lo])
        c_hi = np.concatenate([left_hi, hi])
        c_sp = np.concatenate([child_sp, child_sp])
        for s in range(0, len(c_lo), self.batch_size):
            e = s + self.batch_size
            queue.append((c_lo[s:e], c_hi[s:e], c_sp[s:e]))

    def _counterexamples(self, network, vio_lo, vio_hi, vio_pts):
        if not vio_lo:
            return [], 0
        lo = np.concatenate(vio_lo)
        hi = np.concatenate(vio_hi)
        pts = np.concatenate(vio_pts)
        if not len(lo):
            return [], 0
        # Canonical order: lexicographic on (lo, hi) so reports are traversal independent.
        keys = np.concatenate([lo, hi], axis=1)
        order = np.lexsort(keys.T[::-1])
        sel = pts[order[: self.max_counterexamples]]
        outs = forward(network, sel)
        ces = [
            {"input": x, "outputs": y, "action": int(np.argmax(y))}
            for x, y in zip(sel, outs)
        ]
        return ces, len(lo)


def _mass(bucket: dict) -> Fraction:
    return sum((Fraction(c, 2**d) for d, c in bucket.items()), Fraction(0))


def _stack_boxes(los, his, ndim):
    if not los:
        return np.zeros((0, ndim)), np.zeros((0, ndim))
    return np.concatenate(los), np.concatenate(his)


def verify(network: Network, prop: SafetyProperty, **config) -> VerificationReport:
    """Functional shortcut for ``IntervalVerifier(**config).verify(network, prop)``."""
    return IntervalVerifier(**config).verify(network, prop)
