"""Kinematic two-phase tissue-retraction task.

The end effector starts in the upper part of a cylindrical safe workspace,
moves in 0.5 mm steps to the tumour, grasps automatically on proximity and
then carries the tissue up to the target point. Collisions are detected with
analytic primitives (the cylinder for the workspace, spheres/capsules for
obstacles). Coordinates are in millimetres; the cylinder axis is +y.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

OBS_DIM = 8
N_ACTIONS = 27
OBS_NAMES = ("g", "px", "py", "pz", "goal_x", "goal_y", "goal_z", "dist")

# Joint action index a = 9*(ax+1) + 3*(ay+1) + (az+1); x is the most significant digit.
ACTIONS = np.array(
    [(ax, ay, az) for ax in (-1, 0, 1) for ay in (-1, 0, 1) for az in (-1, 0, 1)],
    dtype=np.int64,
)
ACTIONS.flags.writeable = False

# Workspace faces in a fixed order; used for penalty attribution and properties.
FACES = (("x", -1), ("x", 1), ("y", -1), ("y", 1), ("z", -1), ("z", 1))
AXIS_INDEX = {"x": 0, "y": 1, "z": 2}

# Property name guarding each face, per phase (0 = approach, 1 = retract).
# The approach phase has no upper-y constraint.
FACE_PROPERTY = {
    0: ("theta_1L", "theta_1R", "theta_2L", None, "theta_3L", "theta_3R"),
    1: ("theta_4L", "theta_4R", "theta_5L", "theta_5R", "theta_6L", "theta_6R"),
}


class EnvError(RuntimeError):
    pass


def encode_action(alpha: Sequence[int]) -> int:
    ax, ay, az = (int(a) for a in alpha)
    if not all(a in (-1, 0, 1) for a in (ax, ay, az)):
        raise ValueError(f"action components must be in {{-1, 0, 1}}, got {alpha}")
    return 9 * (ax + 1) + 3 * (ay + 1) + (az + 1)


def decode_action(index: int) -> tuple[int, int, int]:
    if not 0 <= index < N_ACTIONS:
        raise ValueError(f"action index {index} out of range")
    return tuple(int(v) for v in ACTIONS[index])


def actions_moving(axis: str, side: int) -> frozenset[int]:
    """All joint actions whose component along ``axis`` equals ``side``."""
    k = AXIS_INDEX[axis]
    return frozenset(int(a) for a in np.flatnonzero(ACTIONS[:, k] == side))


@dataclass(frozen=True)
class Obstacle:
    center: tuple[float, float, float]
    radius: float
    kind: str = "sphere"
    end: Optional[tuple[float, float, float]] = None  # second axis point for capsules

    def __post_init__(self):
        if self.kind not in ("sphere", "capsule"):
            raise ValueError(f"unknown obstacle kind {self.kind!r}")
        if self.kind == "capsule" and self.end is None:
            raise ValueError("capsule obstacle needs an end point")
        if self.radius <= 0:
            raise ValueError("obstacle radius must be positive")

    def distance(self, p: np.ndarray) -> np.ndarray:
        """Distance from points (n, 3) to the obstacle's core point/segment."""
        a = np.asarray(self.center, dtype=np.float64)
        if self.kind == "sphere":
            return np.linalg.norm(p - a, axis=-1)
        b = np.asarray(self.end, dtype=np.float64)
        ab = b - a
        t = np.clip(((p - a) @ ab) / float(ab @ ab), 0.0, 1.0)
        return np.linalg.norm(p - (a + t[..., None] * ab), axis=-1)

    def core_points(self, n: int = 65) -> np.ndarray:
        a = np.asarray(self.center, dtype=np.float64)
        if self.kind == "sphere":
            return a[None, :]
        b = np.asarray(self.end, dtype=np.float64)
        return a + np.linspace(0.0, 1.0, n)[:, None] * (b - a)


def _default_obstacles() -> tuple[Obstacle, ...]:
    # Spinal-column proxy beyond -x and a rib proxy beyond -z, both tangent to the cylinder.
    return (
        Obstacle(center=(-33.0, 8.0, 0.0), radius=8.0),
        Obstacle(center=(0.0, 8.0, -33.0), radius=8.0),
    )


@dataclass(frozen=True)
class EnvConfig:
    workspace_base: tuple[float, float, float] = (0.0, 0.0, 0.0)  # bottom centre of the cylinder
    workspace_radius: float = 25.0
    workspace_height: float = 40.0
    obstacles: tuple[Obstacle, ...] = field(default_factory=_default_obstacles)
    tumour_pos: tuple[float, float, float] = (0.0, 8.0, 0.0)
    target_pos: tuple[float, float, float] = (0.0, 28.0, 0.0)
    # Fat-tissue attachment line; descriptive only, no tissue mechanics are simulated.
    attachment: tuple[tuple[float, float, float], tuple[float, float, float]] = (
        (-15.0, 28.0, 20.0),
        (15.0, 28.0, 20.0),
    )
    grasp_threshold: float = 1.5
    success_threshold: float = 1.5
    step_size: float = 0.5
    max_steps: int = 300
    distance_scale: Optional[float] = None  # k; defaults to 1 / bounding-box diagonal
    collision_penalty: float = 1.0
    start_fraction: float = 0.5  # starts are drawn from the top ``start_fraction`` of the height
    world_margin: float = 10.0  # positions are clamped to the bounding box grown by this much

    def __post_init__(self):
        obstacles = tuple(o if isinstance(o, Obstacle) else Obstacle(**o) for o in self.obstacles)
        object.__setattr__(self, "obstacles", obstacles)
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.grasp_threshold <= 0 or self.success_threshold <= 0:
            raise ValueError("grasp and success thresholds must be positive")
        if self.workspace_radius <= 0 or self.workspace_height <= 0:
            raise ValueError("workspace radius and height must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if not 0.0 < self.start_fraction <= 1.0:
            raise ValueError("start_fraction must be in (0, 1]")
        for name in ("tumour_pos", "target_pos"):
            if not collision_check(np.asarray(getattr(self, name)), self)["inside_workspace"]:
                raise ValueError(f"{name} must lie inside the workspace")
        for k, obs in enumerate(obstacles):
            depth = obs.radius - _cylinder_distance(obs.core_points(), self).min()
            if depth > 1e-9:
                raise ValueError(f"obstacle {k} penetrates the workspace by {depth:.3g} mm")

    @property
    def bbox_lo(self) -> np.ndarray:
        b = np.asarray(self.workspace_base, dtype=np.float64)
        r = self.workspace_radius
        return b + np.array([-r, 0.0, -r])

    @property
    def bbox_hi(self) -> np.ndarray:
        b = np.asarray(self.workspace_base, dtype=np.float64)
        r = self.workspace_radius
        return b + np.array([r, self.workspace_height, r])

    @property
    def k(self) -> float:
        if self.distance_scale is not None:
            return float(self.distance_scale)
        return 1.0 / float(np.linalg.norm(self.bbox_hi - self.bbox_lo))

    def goal(self, g: int) -> np.ndarray:
        return np.asarray(self.target_pos if g else self.tumour_pos, dtype=np.float64)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["obstacles"] = [
            {k: v for k, v in asdict(o).items() if not (k == "end" and v is None)} for o in self.obstacles
        ]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown environment config fields: {sorted(unknown)}")
        if "obstacles" in d:
            d["obstacles"] = tuple(
                Obstacle(
                    center=tuple(o["center"]),
                    radius=o["radius"],
                    kind=o.get("kind", "sphere"),
                    end=tuple(o["end"]) if o.get("end") is not None else None,
                )
                for o in d["obstacles"]
            )
        for key in ("workspace_base", "tumour_pos", "target_pos"):
            if key in d:
                d[key] = tuple(float(v) for v in d[key])
        if "attachment" in d:
            d["attachment"] = tuple(tuple(float(v) for v in pt) for pt in d["attachment"])
        return cls(**d)


def load_config(path: str | os.PathLike) -> EnvConfig:
    with open(path) as fh:
        return EnvConfig.from_dict(json.load(fh))


def save_config(config: EnvConfig, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        json.dump(config.to_dict(), fh, indent=2)
        fh.write("\n")


# -- geometry --------------------------------------------------------------------

def _cylinder_distance(p: np.ndarray, config: EnvConfig) -> np.ndarray:
    """Distance from points to the solid workspace cylinder (0 inside)."""
    p = np.atleast_2d(p) - np.asarray(config.workspace_base)
    rho = np.hypot(p[:, 0], p[:, 2])
    dr = np.maximum(rho - config.workspace_radius, 0.0)
    dy = np.maximum(np.maximum(-p[:, 1], p[:, 1] - config.workspace_height), 0.0)
    return np.hypot(dr, dy)


def _inside(p: np.ndarray, config: EnvConfig) -> np.ndarray:
    rel = p - np.asarray(config.workspace_base)
    rho2 = rel[:, 0] ** 2 + rel[:, 2] ** 2
    return (rho2 <= config.workspace_radius**2) & (rel[:, 1] >= 0.0) & (rel[:, 1] <= config.workspace_height)


def _obstacle_hits(p: np.ndarray, config: EnvConfig) -> np.ndarray:
    """(n, n_obstacles) bool; the obstacle surface itself does not count as a hit."""
    if not config.obstacles:
        return np.zeros((len(p), 0), dtype=bool)
    return np.stack([o.distance(p) < o.radius for o in config.obstacles], axis=1)


def _obstacle_face(obs: Obstacle, config: EnvConfig) -> int:
    # Face whose outward normal best matches the obstacle's direction from the workspace centre.
    centre = np.asarray(config.workspace_base) + np.array([0.0, config.workspace_height / 2, 0.0])
    v = obs.core_points().mean(axis=0) - centre
    axis = int(np.argmax(np.abs(v)))
    return 2 * axis + (1 if v[axis] > 0 else 0)


def _exit_faces(p: np.ndarray, config: EnvConfig) -> np.ndarray:
    """(n, 6) bool in FACES order for points outside the workspace."""
    rel = p - np.asarray(config.workspace_base)
    n = len(p)
    faces = np.zeros((n, 6), dtype=bool)
    rho2 = rel[:, 0] ** 2 + rel[:, 2] ** 2
    radial = rho2 > config.workspace_radius**2
    x_dom = np.abs(rel[:, 0]) >= np.abs(rel[:, 2])
    faces[:, 0] = radial & x_dom & (rel[:, 0] < 0)
    faces[:, 1] = radial & x_dom & (rel[:, 0] >= 0)
    faces[:, 4] = radial & ~x_dom & (rel[:, 2] < 0)
    faces[:, 5] = radial & ~x_dom & (rel[:, 2] >= 0)
    faces[:, 2] = rel[:, 1] < 0.0
    faces[:, 3] = rel[:, 1] > config.workspace_height
    return faces


def collision_check(p, config: EnvConfig) -> dict:
    """Closed-workspace membership and obstacle penetration for a single point."""
    p = np.asarray(p, dtype=np.float64).reshape(1, 3)
    return {
        "inside_workspace": bool(_inside(p, config)[0]),
        "obstacle_hit": bool(_obstacle_hits(p, config).any()),
    }


# -- state / observation / reward -----------------------------------------------

@dataclass(frozen=True, eq=False)
class EnvState:
    g: int
    p: np.ndarray
    steps_taken: int = 0
    grasp_point: Optional[np.ndarray] = None
    done: bool = False

    def __post_init__(self):
        p = np.array(self.p, dtype=np.float64)
        p.flags.writeable = False
        object.__setattr__(self, "p", p)
        if self.g not in (0, 1):
            raise ValueError("gripper flag must be 0 or 1")


def observation_array(g: np.ndarray, p: np.ndarray, config: EnvConfig) -> np.ndarray:
    g = np.asarray(g)
    p = np.atleast_2d(p)
    k = config.k
    lo = config.bbox_lo
    goal = np.where(g[:, None] == 1, np.asarray(config.target_pos), np.asarray(config.tumour_pos))
    p_n = (p - lo) * k
    goal_n = (goal - lo) * k
    dist = np.linalg.norm(p_n - goal_n, axis=1)
    return np.column_stack([g.astype(np.float64), p_n, goal_n, dist])


def observe(state: EnvState, config: EnvConfig) -> np.ndarray:
    """[g, p, p_goal, |p - p_goal|] with positions mapped isotropically by k."""
    return observation_array(np.array([state.g]), state.p[None, :], config)[0]


def reward_fn(state: EnvState, config: EnvConfig, collided: bool = False) -> float:
    d = min(max(float(np.linalg.norm(state.p - config.goal(state.g))) * config.k, 0.0), 1.0)
    r = -0.5 * d if state.g else -0.5 * d - 0.5
    return r - (config.collision_penalty if collided else 0.0)


def _base_reward(g: np.ndarray, p: np.ndarray, config: EnvConfig) -> np.ndarray:
    goal = np.where(g[:, None] == 1, np.asarray(config.target_pos), np.asarray(config.tumour_pos))
    d = np.clip(np.linalg.norm(p - goal, axis=1) * config.k, 0.0, 1.0)
    return np.where(g == 1, -0.5 * d, -0.5 * d - 0.5)


def penalty_mask(events: np.ndarray, g: np.ndarray, penalized: Optional[frozenset]) -> np.ndarray:
    """Which steps are penalised given per-face events (n, 6) and the phase.

    ``penalized=None`` penalises every workspace exit or obstacle hit; a set
    restricts penalties to faces whose guarding property is in the set.
    """
    if penalized is None:
        return events.any(axis=1)
    out = np.zeros(len(g), dtype=bool)
    for phase in (0, 1):
        cols = [j for j, name in enumerate(FACE_PROPERTY[phase]) if name in penalized]
        if cols:
            out |= (g == phase) & events[:, cols].any(axis=1)
    return out


def transition(config: EnvConfig, g: np.ndarray, p: np.ndarray, actions: np.ndarray,
               penalized: Optional[frozenset] = None) -> dict:
    """Vectorised core of ``step``: one move for a batch of (g, p)."""
    g = np.asarray(g, dtype=np.int64)
    p2 = p + config.step_size * ACTIONS[np.asarray(actions)]
    p2 = np.clip(p2, config.bbox_lo - config.world_margin, config.bbox_hi + config.world_margin)
    near_tumour = np.linalg.norm(p2 - np.asarray(config.tumour_pos), axis=1) <= config.grasp_threshold
    grasped = (g == 0) & near_tumour
    g2 = np.where(grasped, 1, g)

    hits = _obstacle_hits(p2, config)
    exits = _exit_faces(p2, config)
    hit_faces = np.zeros_like(exits)
    for j, obs in enumerate(config.obstacles):
        hit_faces[:, _obstacle_face(obs, config)] |= hits[:, j]
    # Leaving the workspace and striking an obstacle are charged separately.
    n_penalties = (penalty_mask(exits, g2, penalized).astype(np.int64)
                   + penalty_mask(hit_faces, g2, penalized))
    penalised = n_penalties > 0
    reward = _base_reward(g2, p2, config) - config.collision_penalty * n_penalties
    events = exits | hit_faces

    success = (g2 == 1) & (np.linalg.norm(p2 - np.asarray(config.target_pos), axis=1) <= config.success_threshold)
    return {
        "g": g2,
        "p": p2,
        "reward": reward,
        "grasped": grasped,
        "success": success,
        "collision": hits.any(axis=1),
        "out_of_workspace": ~_inside(p2, config),
        "penalised": penalised,
        "events": events,
    }


def sample_start(config: EnvConfig, rng: np.random.Generator, n: int = 1) -> np.ndarray:
    """Uniform positions in the upper ``start_fraction`` of the cylinder."""
    h = config.workspace_height
    y = rng.uniform(h * (1.0 - config.start_fraction), h, size=n)
    r = config.workspace_radius * np.sqrt(rng.uniform(0.0, 1.0, size=n))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    base = np.asarray(config.workspace_base)
    return base + np.column_stack([r * np.cos(theta), y, r * np.sin(theta)])


def reset(config: EnvConfig, seed) -> tuple[EnvState, np.ndarray]:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    state = EnvState(g=0, p=sample_start(config, rng, 1)[0])
    return state, observe(state, config)


def step(config: EnvConfig, state: EnvState, action: int, penalized: Optional[frozenset] = None):
    """Advance one step. Returns (state', observation, reward, done, info)."""
    if state.done:
        raise EnvError("cannot step a finished episode; call reset()")
    out = transition(config, np.array([state.g]), state.p[None, :], np.array([int(action)]), penalized)
    g2 = int(out["g"][0])
    p2 = out["p"][0]
    steps = state.steps_taken + 1
    success = bool(out["success"][0])
    done = success or steps >= config.max_steps
    grasp_point = state.grasp_point
    if out["grasped"][0]:
        grasp_point = p2.copy()
    new_state = EnvState(g=g2, p=p2, steps_taken=steps, grasp_point=grasp_point, done=done)
    names = [
        FACE_PROPERTY[g2][j] or "approach_upper_y" for j in np.flatnonzero(out["events"][0])
    ]
    info = {
        "collision": bool(out["collision"][0]),
        "out_of_workspace": bool(out["out_of_workspace"][0]),
        "grasped": bool(out["grasped"][0]),
        "success": success,
        "penalised": bool(out["penalised"][0]),
        "faces": names,
        "truncated": done and not success,
    }
    return new_state, observe(new_state, config), float(out["reward"][0]), done, info


class TissueRetractionEnv:
    """Stateful single-episode wrapper around ``reset``/``step``."""

    def __init__(self, config: EnvConfig | None = None, penalized: Optional[Iterable[str]] = None):
        self.config = config or EnvConfig()
        self.penalized = None if penalized is None else frozenset(penalized)
        self.state: Optional[EnvState] = None

    def reset(self, seed=None) -> np.ndarray:
        self.state, obs = reset(self.config, seed)
        return obs

    def step(self, action: int):
        if self.state is None:
            raise EnvError("call reset() before step()")
        self.state, obs, r, done, info = step(self.config, self.state, action, self.penalized)
        return obs, r, done, info


class VectorEnv:
    """``n`` independent episodes advanced in lock-step with automatic resets.

    Produces the same transitions as ``step`` (it shares ``transition``); only
    start positions are drawn from a single seeded generator.
    """

    def __init__(self, config: EnvConfig, n: int, seed, penalized: Optional[Iterable[str]] = None):
        self.config = config
        self.n = n
        self.penalized = None if penalized is None else frozenset(penalized)
        self.rng = np.random.default_rng(seed)
        self.g = np.zeros(n, dtype=np.int64)
        self.p = sample_start(config, self.rng, n)
        self.t = np.zeros(n, dtype=np.int64)
        self.ep_return = np.zeros(n)
        self.ep_penalties = np.zeros(n, dtype=np.int64)
        self.last_penalised = np.zeros(n, dtype=bool)

    def observe(self) -> np.ndarray:
        return observation_array(self.g, self.p, self.config)

    def step(self, actions: np.ndarray):
        out = transition(self.config, self.g, self.p, actions, self.penalized)
        self.t += 1
        self.last_penalised = out["penalised"]
        self.ep_return += out["reward"]
        self.ep_penalties += out["penalised"] | out["collision"] | out["out_of_workspace"]
        success = out["success"]
        done = success | (self.t >= self.config.max_steps)
        truncated = done & ~success
        final_obs = observation_array(out["g"], out["p"], self.config)
        finished = [
            {"return": float(self.ep_return[i]), "success": bool(success[i]),
             "collisions": int(self.ep_penalties[i]), "length": int(self.t[i])}
            for i in np.flatnonzero(done)
        ]
        self.g = out["g"].copy()
        self.p = out["p"].copy()
        idx = np.flatnonzero(done)
        if idx.size:
            self.g[idx] = 0
            self.p[idx] = sample_start(self.config, self.rng, idx.size)
            self.t[idx] = 0
            self.ep_return[idx] = 0.0
            self.ep_penalties[idx] = 0
        return self.observe(), out["reward"], success, truncated, final_obs, finished


TRAJECTORY_FIELDS = ("step", "g", "px", "py", "pz", "action", "reward", "collision", "out_of_workspace")


def write_trajectory(path: str | os.PathLike, rows: Iterable[dict]) -> None:
    """Trajectory log: one row per step with position in mm."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRAJECTORY_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in TRAJECTORY_FIELDS})


def run_episode(config: EnvConfig, policy, seed, penalized=None) -> list[dict]:
    """Roll out ``policy(obs) -> action`` for one episode; returns trajectory rows."""
    state, obs = reset(config, seed)
    rows = []
    while not state.done:
        a = int(policy(obs))
        state, obs, r, done, info = step(config, state, a, penalized)
        rows.append({
            "step": state.steps_taken, "g": state.g,
            "px": state.p[0], "py": state.p[1], "pz": state.p[2],
            "action": a, "reward": r,
            "collision": int(info["collision"]), "out_of_workspace": int(info["out_of_workspace"]),
            "success": info["success"],
        })
    return rows
