"""Safety properties over policy-network inputs and their JSON suite format.

A property pairs an input box with an output condition:

* ``OutputBound`` - output ``index`` must stay inside ``required``;
* ``ActionNotSelected`` - the greedy action must never fall in ``unsafe``.

Suites may be written in physical units (mm) and carry the affine map
``normalized = (value - offset) * scale`` to network input units.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .environment import (
    AXIS_INDEX,
    FACE_PROPERTY,
    FACES,
    OBS_DIM,
    EnvConfig,
    actions_moving,
)
from .interval import Box, Interval, IntervalError

SUITE_VERSION = 1


class PropertyFormatError(ValueError):
    pass


@dataclass(frozen=True)
class OutputBound:
    output_index: int
    required: Interval
    kind = "output_bound"


@dataclass(frozen=True)
class ActionNotSelected:
    unsafe: frozenset
    kind = "action_not_selected"

    def __post_init__(self):
        object.__setattr__(self, "unsafe", frozenset(int(i) for i in self.unsafe))
        if not self.unsafe:
            raise ValueError("unsafe action set must be non-empty")


Condition = Union[OutputBound, ActionNotSelected]


@dataclass(frozen=True)
class SafetyProperty:
    name: str
    input_box: Box
    condition: Condition
    description: str = ""

    def check_network(self, network) -> None:
        """Raise if the property cannot be evaluated on ``network``."""
        if self.input_box.ndim != network.input_dim:
            raise PropertyFormatError(
                f"property {self.name}: input box has {self.input_box.ndim} dims, "
                f"network expects {network.input_dim}"
            )
        cond = self.condition
        if isinstance(cond, OutputBound):
            if not 0 <= cond.output_index < network.output_dim:
                raise PropertyFormatError(f"property {self.name}: output index {cond.output_index} out of range")
        else:
            if max(cond.unsafe) >= network.output_dim or min(cond.unsafe) < 0:
                raise PropertyFormatError(f"property {self.name}: unsafe action index out of range")
            if len(cond.unsafe) >= network.output_dim:
                raise PropertyFormatError(f"property {self.name}: unsafe set must leave at least one safe action")

    def unsafe_mask(self, output_dim: int) -> np.ndarray:
        mask = np.zeros(output_dim, dtype=bool)
        mask[sorted(self.condition.unsafe)] = True
        return mask

    def is_violated(self, outputs: np.ndarray) -> np.ndarray:
        """Concrete check on network outputs (n, output_dim) -> (n,) bool."""
        outputs = np.atleast_2d(outputs)
        cond = self.condition
        if isinstance(cond, OutputBound):
            y = outputs[:, cond.output_index]
            return (y < cond.required.lo) | (y > cond.required.hi)
        return self.unsafe_mask(outputs.shape[1])[np.argmax(outputs, axis=1)]


@dataclass(frozen=True)
class PropertySuite:
    properties: tuple[SafetyProperty, ...]
    units: str = "normalized"
    offset: Optional[tuple[float, ...]] = None
    scale: Optional[tuple[float, ...]] = None
    groups: tuple[tuple[str, tuple[str, ...]], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "properties", tuple(self.properties))
        names = [p.name for p in self.properties]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise PropertyFormatError(f"duplicate property names: {dupes}")
        if self.units not in ("normalized", "physical"):
            raise PropertyFormatError(f"units: expected 'normalized' or 'physical', got {self.units!r}")
        if self.units == "physical" and (self.offset is None or self.scale is None):
            raise PropertyFormatError("normalization: physical suites need offset and scale")

    def __len__(self) -> int:
        return len(self.properties)

    def __iter__(self):
        return iter(self.properties)

    def __getitem__(self, name: str) -> SafetyProperty:
        for p in self.properties:
            if p.name == name:
                return p
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.properties]

    def normalized(self) -> "PropertySuite":
        """The same suite with every input box mapped to network units."""
        if self.units == "normalized":
            return self
        off = np.asarray(self.offset)
        sc = np.asarray(self.scale)
        props = []
        for p in self.properties:
            lo = (p.input_box.lo - off) * sc
            hi = (p.input_box.hi - off) * sc
            props.append(SafetyProperty(p.name, Box(np.minimum(lo, hi), np.maximum(lo, hi)), p.condition, p.description))
        return PropertySuite(tuple(props), "normalized", None, None, self.groups)


# -- (de)serialisation ----------------------------------------------------------

def _condition_to_dict(cond: Condition) -> dict:
    if isinstance(cond, OutputBound):
        return {"kind": cond.kind, "output_index": cond.output_index,
                "required": [cond.required.lo, cond.required.hi]}
    return {"kind": cond.kind, "unsafe_actions": sorted(cond.unsafe)}


def suite_to_dict(suite: PropertySuite) -> dict:
    doc = {
        "version": SUITE_VERSION,
        "units": suite.units,
        "properties": [
            {
                "name": p.name,
                "description": p.description,
                "input_box": [[float(a), float(b)] for a, b in zip(p.input_box.lo, p.input_box.hi)],
                "condition": _condition_to_dict(p.condition),
            }
            for p in suite.properties
        ],
    }
    if suite.offset is not None:
        doc["normalization"] = {"offset": list(suite.offset), "scale": list(suite.scale)}
    if suite.groups:
        doc["groups"] = [{"label": label, "properties": list(names)} for label, names in suite.groups]
    return doc


def _parse_condition(raw, where: str) -> Condition:
    if not isinstance(raw, Mapping):
        raise PropertyFormatError(f"{where}.condition: expected an object")
    kind = raw.get("kind")
    if kind == OutputBound.kind:
        req = raw.get("required")
        try:
            lo, hi = (float(v) for v in req)
        except (TypeError, ValueError):
            raise PropertyFormatError(f"{where}.condition.required: expected [lo, hi]") from None
        if lo > hi:
            raise PropertyFormatError(f"{where}.condition.required: lower bound {lo} exceeds upper bound {hi}")
        idx = raw.get("output_index")
        if not isinstance(idx, int) or idx < 0:
            raise PropertyFormatError(f"{where}.condition.output_index: expected a non-negative integer")
        return OutputBound(idx, Interval(lo, hi))
    if kind == ActionNotSelected.kind:
        acts = raw.get("unsafe_actions")
        if not isinstance(acts, list) or not acts or not all(isinstance(a, int) and a >= 0 for a in acts):
            raise PropertyFormatError(f"{where}.condition.unsafe_actions: expected a non-empty list of indices")
        return ActionNotSelected(frozenset(acts))
    raise PropertyFormatError(f"{where}.condition.kind: unknown condition kind {kind!r}")


def parse_suite(document, output_dim: Optional[int] = None) -> PropertySuite:
    """Validate a suite document (dict or JSON text).

    With ``output_dim`` given, every referenced output index is checked
    against it, and unsafe sets must leave at least one safe action.
    """
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise PropertyFormatError(f"document: invalid JSON ({exc})") from None
    if not isinstance(document, Mapping):
        raise PropertyFormatError("document: expected a JSON object")
    if document.get("version") != SUITE_VERSION:
        raise PropertyFormatError(f"version: expected {SUITE_VERSION}, got {document.get('version')!r}")
    raw_props = document.get("properties")
    if not isinstance(raw_props, list) or not raw_props:
        raise PropertyFormatError("properties: expected a non-empty list")

    props = []
    ndim = None
    for k, raw in enumerate(raw_props):
        name = raw.get("name") if isinstance(raw, Mapping) else None
        if not isinstance(name, str) or not name:
            raise PropertyFormatError(f"properties[{k}].name: expected a non-empty string")
        where = f"property {name}"
        box_raw = raw.get("input_box")
        if not isinstance(box_raw, list) or not box_raw:
            raise PropertyFormatError(f"{where}.input_box: expected a list of [lo, hi] pairs")
        for d, pair in enumerate(box_raw):
            if not (isinstance(pair, list) and len(pair) == 2):
                raise PropertyFormatError(f"{where}.input_box[{d}]: expected [lo, hi]")
            if float(pair[0]) > float(pair[1]):
                raise PropertyFormatError(
                    f"{where}.input_box[{d}]: lower bound {pair[0]} exceeds upper bound {pair[1]}"
                )
        try:
            box = Box.from_intervals(box_raw)
        except IntervalError as exc:
            raise PropertyFormatError(f"{where}.input_box: {exc}") from None
        if ndim is None:
            ndim = box.ndim
        elif box.ndim != ndim:
            raise PropertyFormatError(f"{where}.input_box: {box.ndim} dims, earlier properties have {ndim}")
        cond = _parse_condition(raw.get("condition"), where)
        if output_dim is not None:
            if isinstance(cond, OutputBound) and cond.output_index >= output_dim:
                raise PropertyFormatError(f"{where}.condition.output_index: {cond.output_index} >= {output_dim}")
            if isinstance(cond, ActionNotSelected):
                if max(cond.unsafe) >= output_dim:
                    raise PropertyFormatError(f"{where}.condition.unsafe_actions: index >= {output_dim}")
                if len(cond.unsafe) >= output_dim:
                    raise PropertyFormatError(f"{where}.condition.unsafe_actions: no safe action left")
        props.append(SafetyProperty(name, box, cond, raw.get("description", "")))

    units = document.get("units", "normalized")
    offset = scale = None
    norm = document.get("normalization")
    if norm is not None:
        offset = tuple(float(v) for v in norm["offset"])
        scale = tuple(float(v) for v in norm["scale"])
        if len(offset) != ndim or len(scale) != ndim:
            raise PropertyFormatError(f"normalization: expected {ndim} offset/scale entries")
    groups = []
    known = {p.name for p in props}
    for g in document.get("groups", []):
        missing = [n for n in g["properties"] if n not in known]
        if missing:
            raise PropertyFormatError(f"groups.{g['label']}: unknown properties {missing}")
        groups.append((g["label"], tuple(g["properties"])))
    try:
        return PropertySuite(tuple(props), units, offset, scale, tuple(groups))
    except PropertyFormatError:
        raise


def load_suite(path: str | os.PathLike, output_dim: Optional[int] = None) -> PropertySuite:
    with open(path) as fh:
        text = fh.read()
    return parse_suite(text, output_dim)


def save_suite(suite: PropertySuite, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        json.dump(suite_to_dict(suite), fh, indent=1)
        fh.write("\n")


# -- default workspace suite ------------------------------------------------------

_AXIS_WORD = {"x": "x", "y": "y", "z": "z"}
_PHASE_WORD = {0: "approach", 1: "retract"}

# Row order and grouping of the violation-rate table.
DEFAULT_ORDER = (
    "theta_1L", "theta_1R", "theta_2L", "theta_3L", "theta_3R",
    "theta_4L", "theta_4R", "theta_5L", "theta_5R", "theta_6L", "theta_6R",
)
DEFAULT_GROUPS = (
    ("Average (theta_1L-theta_2L)", ("theta_1L", "theta_1R", "theta_2L")),
    ("Average (theta_3L-theta_3R)", ("theta_3L", "theta_3R")),
    ("Average (theta_4L-theta_6R)", ("theta_4L", "theta_4R", "theta_5L", "theta_5R", "theta_6L", "theta_6R")),
)


def _distance_range(lo: np.ndarray, hi: np.ndarray, point: np.ndarray) -> tuple[float, float]:
    """Exact min/max Euclidean distance from ``point`` to the box [lo, hi]."""
    nearest = np.clip(point, lo, hi)
    far = np.maximum(np.abs(lo - point), np.abs(hi - point))
    return float(np.linalg.norm(nearest - point)), float(np.linalg.norm(far))


def default_suite(config: EnvConfig | None = None, band_fraction: float = 0.1,
                  band_fractions: Optional[Mapping[str, float]] = None) -> PropertySuite:
    """Workspace-limit properties for both phases, in millimetres.

    Each property confines the end effector to a band of width
    ``band_fraction`` x extent at one bounding-box face and forbids every
    joint action moving further outward through that face. The gripper flag
    and goal coordinates are fixed to the phase; the distance input spans the
    exact range reachable from the band.
    """
    config = config or EnvConfig()
    band_fractions = dict(band_fractions or {})
    lo_ws, hi_ws = config.bbox_lo, config.bbox_hi
    k = config.k
    props = {}
    for phase in (0, 1):
        goal = config.goal(phase)
        for j, (axis, side) in enumerate(FACES):
            name = FACE_PROPERTY[phase][j]
            if name is None:
                continue
            frac = band_fractions.get(name, band_fraction)
            a = AXIS_INDEX[axis]
            extent = hi_ws[a] - lo_ws[a]
            width = frac * extent
            if not width > 0:
                raise ValueError(f"{name}: degenerate boundary band (width {width})")
            plo, phi = lo_ws.copy(), hi_ws.copy()
            if side < 0:
                phi[a] = lo_ws[a] + width
            else:
                plo[a] = hi_ws[a] - width
            dmin, dmax = _distance_range(plo, phi, goal)
            box_lo = np.concatenate([[phase], plo, goal, [dmin]])
            box_hi = np.concatenate([[phase], phi, goal, [dmax]])
            limit = "Lower" if side < 0 else "Upper"
            props[name] = SafetyProperty(
                name=name,
                input_box=Box(box_lo, box_hi),
                condition=ActionNotSelected(actions_moving(axis, side)),
                description=f"{limit} limit on {_AXIS_WORD[axis]}-direction ({_PHASE_WORD[phase]})",
            )
    offset = (0.0, *lo_ws, *lo_ws, 0.0)
    scale = (1.0, *([k] * 6), k)
    assert len(offset) == OBS_DIM
    return PropertySuite(
        tuple(props[n] for n in DEFAULT_ORDER),
        units="physical",
        offset=tuple(float(v) for v in offset),
        scale=tuple(float(v) for v in scale),
        groups=DEFAULT_GROUPS,
    )
