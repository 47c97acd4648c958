"""Command-line entry point: train, verify and export analysis tables.

Every command writes CSV/JSON only, plus a ``manifest.json`` listing the
artifacts with their sha256 digests. Exit status is 0 on success, 2 for bad
input (missing files, malformed documents, bad flags) and 3 when a run fails
(for instance training divergence). Errors go to stderr as ``error: ...``.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from . import network as nw
from .environment import OBS_NAMES, EnvConfig, load_config
from .interval import Box
from .network import Network, NetworkFormatError
from .property import PropertyFormatError, PropertySuite, SafetyProperty, default_suite, load_suite
from .trainer import TrainConfig, TrainingDiverged, greedy_rollouts, load_train_config, train, write_curve
from .verifier import IntervalVerifier, VerificationReport, default_workers, grid_oracle, write_reports

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 2, 3

ABLATION_POLICIES = (
    ("Safe-PPO", "all"),
    ("Unsafe-PPO", "none"),
    ("Primitive Safe-PPO", "all"),  # mid-training checkpoint of the Safe run
    ("Policy4", ("theta_1L", "theta_1R", "theta_2L")),
    ("Policy5", ("theta_3L", "theta_3R", "theta_4R")),
    ("Policy6", ("theta_4L", "theta_5R", "theta_5L", "theta_6R", "theta_6L")),
)


class InputError(Exception):
    """Bad user input; reported with exit status 2."""


# -- manifest -------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config_digests: dict = field(default_factory=dict)
    seeds: list = field(default_factory=list)
    artifacts: dict = field(default_factory=dict)  # path relative to the manifest -> sha256
    tool_version: str = __version__
    started: float = field(default_factory=time.time)
    finished: Optional[float] = None

    def add(self, root, path) -> None:
        path = Path(path)
        self.artifacts[os.path.relpath(path, root)] = sha256_file(path)

    def write(self, root) -> Path:
        self.finished = time.time()
        path = Path(root) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))

    def problems(self, root) -> list[str]:
        """Artifacts that are missing or whose digest no longer matches."""
        out = []
        for rel, digest in sorted(self.artifacts.items()):
            p = Path(root) / rel
            if not p.exists():
                out.append(f"{rel}: missing")
            elif sha256_file(p) != digest:
                out.append(f"{rel}: digest mismatch")
        return out


# -- loading helpers ---------------------------------------------------------------

def _existing(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"no such file: {p}")
    return p


def _load_network(path) -> Network:
    return nw.load(_existing(path))


def _load_suite(path, network: Optional[Network] = None) -> PropertySuite:
    if path is None:
        return default_suite(EnvConfig())
    return load_suite(_existing(path), output_dim=network.output_dim if network is not None else None)


def _verifier(args) -> IntervalVerifier:
    return IntervalVerifier(min_width_fraction=args.min_width, max_subareas=args.max_subareas,
                            workers=args.workers)


def _parse_override(text: str):
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise InputError(f"--set expects key=value, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def _train_config(path, overrides: Sequence[str] = ()) -> TrainConfig:
    cfg = load_train_config(_existing(path)).to_dict()
    for text in overrides:
        key, value = _parse_override(text)
        if key.startswith("env."):
            cfg["env"][key[4:]] = value
        else:
            cfg[key] = value
    return TrainConfig.from_dict(cfg)


# -- tables --------------------------------------------------------------------

def rate_table(suite: PropertySuite, columns: dict[str, Sequence[VerificationReport]]) -> list[dict]:
    """Per-property violation rates in percent, then group and overall averages.

    ``columns`` maps a column title to reports in suite order.
    """
    rates = {}
    for title, reports in columns.items():
        by_name = {r.property_name: 100.0 * r.violation_rate for r in reports}
        missing = [n for n in suite.names if n not in by_name]
        if missing:
            raise ValueError(f"{title}: no report for {missing}")
        rates[title] = by_name
    rows = [{"property": p.name, "description": p.description, **{t: rates[t][p.name] for t in columns}}
            for p in suite]
    for label, members in suite.groups:
        rows.append({"property": label, "description": "",
                     **{t: float(np.mean([rates[t][m] for m in members])) for t in columns}})
    rows.append({"property": "Overall Average", "description": "",
                 **{t: float(np.mean([rates[t][n] for n in suite.names])) for t in columns}})
    return rows


def write_table(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in row.items()})


def read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- violation maps ----------------------------------------------------------------

VIOLATED_CELL, UNDECIDED_CELL = 2, 1


def dim_names(ndim: int) -> tuple[str, ...]:
    return OBS_NAMES if ndim == len(OBS_NAMES) else tuple(f"x{k}" for k in range(ndim))


@dataclass
class ViolationMap:
    """A g x g grid over input dims ``dims``; 0 none, 1 undecided, 2 violated."""

    dims: tuple[int, int]
    names: tuple[str, str]
    edges: tuple[np.ndarray, np.ndarray]
    codes: np.ndarray  # codes[a, b]: cell a along dims[0], b along dims[1]

    def cells(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Cell indices of points (clamped to the grid)."""
        idx = []
        for k, e in zip(self.dims, self.edges):
            g = len(e) - 1
            idx.append(np.clip(np.searchsorted(e, points[:, k], side="right") - 1, 0, g - 1))
        return idx[0], idx[1]

    def rows(self):
        (ei, ej), (ni, nj) = self.edges, self.names
        for a in range(len(ei) - 1):
            for b in range(len(ej) - 1):
                yield {"row": a, "col": b, f"{ni}_lo": ei[a], f"{ni}_hi": ei[a + 1],
                       f"{nj}_lo": ej[b], f"{nj}_hi": ej[b + 1], "code": int(self.codes[a, b])}

    def write(self, path) -> None:
        write_table(path, list(self.rows()))

    @classmethod
    def read(cls, path, ndim: int = len(OBS_NAMES)) -> "ViolationMap":
        rows = read_table(path)
        ni, nj = (k[:-3] for k in list(rows[0])[2:6:2])
        g_i = 1 + max(int(r["row"]) for r in rows)
        g_j = 1 + max(int(r["col"]) for r in rows)
        codes = np.zeros((g_i, g_j), dtype=np.int8)
        ei, ej = np.zeros(g_i + 1), np.zeros(g_j + 1)
        for r in rows:
            a, b = int(r["row"]), int(r["col"])
            codes[a, b] = int(r["code"])
            ei[a], ei[a + 1] = float(r[f"{ni}_lo"]), float(r[f"{ni}_hi"])
            ej[b], ej[b + 1] = float(r[f"{nj}_lo"]), float(r[f"{nj}_hi"])
        names = dim_names(ndim)
        return cls((names.index(ni), names.index(nj)), (ni, nj), (ei, ej), codes)


def _mark(counts: np.ndarray, lo, hi, edges) -> None:
    """Add leaf boxes to a 2-D difference array over the grid cells they overlap."""
    if not len(lo):
        return
    span = []
    for k in (0, 1):
        e = edges[k]
        g = len(e) - 1
        start = np.clip(np.searchsorted(e, lo[:, k], side="right") - 1, 0, g - 1)
        # Positive-width leaves do not reach a cell they only touch at its edge.
        end = np.where(hi[:, k] > lo[:, k], np.searchsorted(e, hi[:, k], side="left") - 1, start)
        span.append((start, np.clip(end, start, g - 1) + 1))
    (a0, a1), (b0, b1) = span
    np.add.at(counts, (a0, b0), 1)
    np.add.at(counts, (a1, b0), -1)
    np.add.at(counts, (a0, b1), -1)
    np.add.at(counts, (a1, b1), 1)


def slice_draws(box: Box, dims: tuple[int, int], n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points for the dims outside ``dims``: normal around the centre, sd = width / 6, clipped."""
    pts = rng.normal(box.center, box.widths / 6.0, size=(n, box.ndim))
    pts = np.clip(pts, box.lo, box.hi)
    pts[:, list(dims)] = np.nan
    return pts


def violation_map(network: Network, props: Sequence[SafetyProperty], dims: tuple[int, int],
                  fixed_samples: int = 10, grid: int = 50, seed: int = 0,
                  verifier: Optional[IntervalVerifier] = None) -> ViolationMap:
    """Verify 2-D slices of each property and aggregate leaf verdicts by max.

    Slices span the property box along ``dims``; every other input is fixed to
    one of ``fixed_samples`` seeded draws. The grid covers the union of the
    properties' ranges along ``dims``.
    """
    if not props:
        raise ValueError("violation_map needs at least one property")
    ndim = props[0].input_box.ndim
    i, j = dims
    if i == j or not (0 <= i < ndim and 0 <= j < ndim):
        raise ValueError(f"dims must be two distinct indices in [0, {ndim}), got {dims}")
    if grid < 1 or fixed_samples < 1:
        raise ValueError("grid and fixed_samples must be positive")
    lo = np.min([p.input_box.lo[[i, j]] for p in props], axis=0)
    hi = np.max([p.input_box.hi[[i, j]] for p in props], axis=0)
    names = dim_names(ndim)
    for k in (0, 1):
        if not hi[k] > lo[k]:
            raise ValueError(f"dimension {names[dims[k]]} has zero width in the selected properties")
    edges = (np.linspace(lo[0], hi[0], grid + 1), np.linspace(lo[1], hi[1], grid + 1))
    verifier = IntervalVerifier(**{**(verifier or IntervalVerifier()).get_params(), "keep_boxes": True})
    rng = np.random.default_rng(seed)
    codes = np.zeros((grid, grid), dtype=np.int8)
    for prop in props:
        box = prop.input_box
        for draw in slice_draws(box, dims, fixed_samples, rng):
            s_lo = np.where(np.isnan(draw), box.lo, draw)
            s_hi = np.where(np.isnan(draw), box.hi, draw)
            rep = verifier.verify(network, SafetyProperty(prop.name, Box(s_lo, s_hi), prop.condition))
            for code, (b_lo, b_hi) in ((UNDECIDED_CELL, rep.undecided_boxes), (VIOLATED_CELL, rep.violated_boxes)):
                counts = np.zeros((grid + 1, grid + 1), dtype=np.int64)
                _mark(counts, b_lo[:, [i, j]], b_hi[:, [i, j]], edges)
                hit = counts.cumsum(0).cumsum(1)[:grid, :grid] > 0
                codes[hit] = np.maximum(codes[hit], code)
    return ViolationMap((i, j), (names[i], names[j]), edges, codes)


def states_in_violated_cells(vmap: ViolationMap, prop: SafetyProperty, states: np.ndarray,
                             atol: float = 1e-9) -> np.ndarray:
    """Mask of states meeting ``prop``'s precondition off the map dims and landing in a violated cell."""
    box = prop.input_box
    others = [k for k in range(box.ndim) if k not in vmap.dims]
    inside = np.all((states[:, others] >= box.lo[others] - atol) & (states[:, others] <= box.hi[others] + atol), axis=1)
    for k, e in zip(vmap.dims, vmap.edges):
        inside &= (states[:, k] >= e[0]) & (states[:, k] <= e[-1])
    a, b = vmap.cells(states)
    return inside & (vmap.codes[a, b] == VIOLATED_CELL)


# -- rollout states -------------------------------------------------------------------

def rollout_states(network: Network, config: EnvConfig, episodes: int = 1000, seed: int = 0) -> dict:
    return greedy_rollouts(network, config, episodes, seed=seed, record=True)


def write_states(path, rec: dict) -> None:
    names = dim_names(rec["obs"].shape[1])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "step", *names, "action"])
        for ep, st, obs, act in zip(rec["episode"], rec["step"], rec["obs"], rec["action"]):
            w.writerow([int(ep), int(st), *map(repr, obs.tolist()), int(act)])


def read_states(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in r[2:-1]] for r in rows[1:]]).reshape(len(rows) - 1, -1)


# -- training --------------------------------------------------------------------

def _train_one(config: TrainConfig, name: str, out: str) -> dict:
    """Train one seed and write its artifacts; returns paths and status."""
    out = Path(out)
    tag = f"{name}_s{config.seed}"
    try:
        res = train(config, name=name)
    except TrainingDiverged as exc:
        paths = {}
        if exc.last_good is not None:
            paths["last_good"] = str(out / f"{tag}_last_good.net.json")
            nw.save(exc.last_good, paths["last_good"])
        return {"seed": config.seed, "error": str(exc), "paths": paths}
    paths = {"final": str(out / f"{tag}.net.json"), "primitive": str(out / f"{tag}_primitive.net.json"),
             "curve": str(out / f"curve_{tag}.csv")}
    nw.save(res.checkpoints["final"], paths["final"])
    nw.save(res.checkpoints["primitive"], paths["primitive"])
    write_curve(paths["curve"], res.curve)
    return {"seed": config.seed, "error": None, "paths": paths}


def train_seeds(config: TrainConfig, seeds: Sequence[int], out, name: str = "policy",
                workers: Optional[int] = None) -> list[dict]:
    """Independent runs per seed, in separate processes when ``workers`` > 1."""
    configs = [TrainConfig.from_dict({**config.to_dict(), "seed": s}) for s in seeds]
    workers = min(workers or default_workers(), len(configs))
    if workers <= 1:
        return [_train_one(c, name, str(out)) for c in configs]
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(_train_one, configs, [name] * len(configs), [str(out)] * len(configs)))


# -- commands ----------------------------------------------------------------------

def _outdir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def cmd_train(args) -> int:
    config = _train_config(args.config, args.set)
    out = _outdir(args.out)
    seeds = args.seed or [config.seed]
    manifest = RunManifest("train", seeds=list(seeds))
    results = train_seeds(config, seeds, out, args.name, args.workers)
    failed = []
    for cfg_seed, res in zip(seeds, results):
        manifest.config_digests[str(cfg_seed)] = TrainConfig.from_dict({**config.to_dict(), "seed": cfg_seed}).digest()
        for path in res["paths"].values():
            manifest.add(out, path)
        if res["error"]:
            failed.append(f"seed {res['seed']}: {res['error']}")
    manifest.write(out)
    if failed:
        raise TrainingDiverged("; ".join(failed))
    return EXIT_OK


def cmd_verify(args) -> int:
    net = _load_network(args.network)
    suite = _load_suite(args.suite, net)
    reports = _verifier(args).verify_suite(net, suite)
    out = _outdir(args.out)
    table = out / "violation_rates.csv"
    write_table(table, rate_table(suite, {"violation_rate": reports}))
    write_reports(reports, out / "reports.json", out / "reports.csv")
    manifest = RunManifest("verify", config_digests={"network": sha256_file(args.network)})
    for p in (table, out / "reports.json", out / "reports.csv"):
        manifest.add(out, p)
    manifest.write(out)
    return EXIT_OK


def _select(suite: PropertySuite, names: Optional[Sequence[str]]) -> list[SafetyProperty]:
    norm = suite.normalized()
    if not names:
        return list(norm)
    unknown = [n for n in names if n not in norm.names]
    if unknown:
        raise InputError(f"unknown properties: {unknown}")
    return [norm[n] for n in names]


def cmd_violation_map(args) -> int:
    net = _load_network(args.network)
    suite = _load_suite(args.suite, net)
    props = _select(suite, args.property)
    for p in props:
        p.check_network(net)
    vmap = violation_map(net, props, tuple(args.dims), args.fixed_samples, args.grid, args.seed, _verifier(args))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    vmap.write(out)
    return EXIT_OK


def cmd_rollout_states(args) -> int:
    net = _load_network(args.network)
    config = load_config(_existing(args.env_config)) if args.env_config else EnvConfig()
    rec = rollout_states(net, config, args.episodes, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_states(out, rec)
    return EXIT_OK


def cmd_ablation(args) -> int:
    base = _train_config(args.config, args.set)
    out = _outdir(args.out)
    suite = _load_suite(args.suite)
    manifest = RunManifest("ablation", seeds=[base.seed])
    verifier = _verifier(args)
    nets = {}
    for title, mode in ABLATION_POLICIES:
        if title == "Primitive Safe-PPO":
            continue
        cfg = TrainConfig.from_dict({**base.to_dict(), "safety_mode": mode if isinstance(mode, str) else list(mode)})
        manifest.config_digests[title] = cfg.digest()
        stem = title.lower().replace(" ", "-")
        res = _train_one(cfg, stem, str(out))
        if res["error"]:
            raise TrainingDiverged(f"{title}: {res['error']}")
        paths = res["paths"]
        nets[title] = nw.load(paths["final"])
        if title == "Safe-PPO":
            nets["Primitive Safe-PPO"] = nw.load(paths["primitive"])
            manifest.config_digests["Primitive Safe-PPO"] = cfg.digest()
        else:
            # Only the Safe run's mid-training checkpoint is part of the ablation.
            Path(paths.pop("primitive")).unlink()
        for p in paths.values():
            manifest.add(out, p)
    columns = {}
    for title, _ in ABLATION_POLICIES:
        reports = verifier.verify_suite(nets[title], suite)
        columns[title] = reports
        path = out / f"reports_{title.lower().replace(' ', '-')}.json"
        write_reports(reports, path)
        manifest.add(out, path)
    table = out / "ablation.csv"
    write_table(table, rate_table(suite, columns))
    manifest.add(out, table)
    manifest.write(out)
    return EXIT_OK


def cmd_oracle(args) -> int:
    net = _load_network(args.network)
    suite = _load_suite(args.suite, net)
    props = _select(suite, args.property)
    w = csv.writer(sys.stdout)
    w.writerow(["property", "oracle_rate"])
    for p in props:
        w.writerow([p.name, repr(grid_oracle(net, p, args.points))])
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------------

def _verifier_flags(p) -> None:
    p.add_argument("--min-width", type=float, default=2.0**-10, help="minimum subarea width fraction")
    p.add_argument("--max-subareas", type=int, default=2**22)
    p.add_argument("--workers", type=int, default=None, help="default: $SAFERETRACT_WORKERS or 1")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="saferetract", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train PPO policies, one run per --seed")
    p.add_argument("config", help="training config JSON")
    p.add_argument("--seed", type=int, action="append", help="repeat for several independent runs")
    p.add_argument("--out", required=True)
    p.add_argument("--name", default="policy")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override (env.KEY for the environment)")
    p.add_argument("--workers", type=int, default=None, help="parallel training processes")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("verify", help="violation rates of a network on a property suite")
    p.add_argument("network")
    p.add_argument("suite", nargs="?", help="suite JSON (default: built-in workspace suite)")
    p.add_argument("--out", required=True)
    _verifier_flags(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("violation-map", help="grid of violated/undecided cells on 2-D slices")
    p.add_argument("network")
    p.add_argument("suite", nargs="?")
    p.add_argument("--dims", type=int, nargs=2, required=True, metavar=("I", "J"))
    p.add_argument("--fixed-samples", type=int, default=10)
    p.add_argument("--grid", type=int, default=50)
    p.add_argument("--property", action="append", help="restrict to these properties")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _verifier_flags(p)
    p.set_defaults(func=cmd_violation_map)

    p = sub.add_parser("rollout-states", help="log observations visited by the greedy policy")
    p.add_argument("network")
    p.add_argument("env_config", nargs="?")
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rollout_states)

    p = sub.add_parser("ablation", help="train and verify the six ablation policies")
    p.add_argument("config")
    p.add_argument("--suite")
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    _verifier_flags(p)
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("oracle", help="grid-sampled violation fraction per property")
    p.add_argument("network")
    p.add_argument("suite", nargs="?")
    p.add_argument("--points", type=int, default=11, help="grid points per non-degenerate dimension")
    p.add_argument("--property", action="append")
    p.set_defaults(func=cmd_oracle)
    return parser


INPUT_ERRORS = (InputError, NetworkFormatError, PropertyFormatError, FileNotFoundError,
                json.JSONDecodeError, ValueError, KeyError, TypeError)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    try:
        return args.func(args)
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
