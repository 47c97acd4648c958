"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Trained policies are cached under ``.acceptance_cache`` (override with
SAFERETRACT_ACCEPTANCE_CACHE), keyed by the training config and the source of
the modules that shape training, so reruns skip the ~10 minutes of training.
Run ``python tests/test_acceptance.py`` to get the summary lines on stdout.
"""
import contextlib
import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from saferetract import cli
from saferetract import network as nw
from saferetract.autodiff import Adam
from saferetract.environment import EnvConfig, VectorEnv, transition
from saferetract.interval import Box, propagate_array
from saferetract.network import Network, forward, random_network
from saferetract.property import ActionNotSelected, SafetyProperty, default_suite
from saferetract.trainer import (
    ActorCritic,
    TrainConfig,
    _clip_grads,
    collect_rollout,
    compute_gae,
    grad_check,
    greedy_rollouts,
    ppo_loss,
)
from saferetract.verifier import IntervalVerifier, grid_oracle, verify

ROOT = Path(__file__).resolve().parents[1]
RESULTS: dict[int, str] = {}
REPORTS = []  # every verification report produced here, for the replay criterion

TRAIN_EPOCHS = 400
TRAIN_SEED = 0


@contextlib.contextmanager
def criterion(n: int, title: str):
    t0 = time.perf_counter()
    detail = {}
    try:
        yield detail
    except BaseException as exc:
        RESULTS[n] = f"FAIL  {n:>2}. {title} ({time.perf_counter() - t0:.1f}s) {type(exc).__name__}: {exc}".splitlines()[0]
        raise
    extra = "; ".join(f"{k}={v}" for k, v in detail.items())
    RESULTS[n] = f"PASS  {n:>2}. {title} ({time.perf_counter() - t0:.1f}s) {extra}"


def run_verify(net, prop, **kw):
    rep = verify(net, prop, **kw)
    REPORTS.append((net, prop, rep))
    return rep


# -- 1 -------------------------------------------------------------------------------

def test_interval_soundness():
    with criterion(1, "interval soundness: 100 nets x 100 boxes x 10k samples") as d:
        rng = np.random.default_rng(2024)
        t0 = time.perf_counter()
        escapes = 0
        for _ in range(100):
            n_layers = int(rng.integers(2, 5))
            sizes = [int(rng.integers(1, 9))] + [int(rng.integers(1, 33)) for _ in range(n_layers)]
            net = random_network(sizes, rng)
            centers = rng.uniform(-2.0, 2.0, (100, sizes[0]))
            radii = rng.uniform(0.0, 1.0, (100, sizes[0])) * rng.choice([1e-6, 1e-2, 1.0], (100, 1))
            lo, hi = centers - radii, centers + radii
            out_lo, out_hi = propagate_array(net, lo, hi)
            pts = rng.uniform(lo[:, None, :], hi[:, None, :], (100, 10_000, sizes[0]))
            # Include the corners-of-box extremes: the box endpoints themselves.
            pts[:, 0], pts[:, 1] = lo, hi
            ys = forward(net, pts.reshape(-1, sizes[0])).reshape(100, 10_000, -1)
            escapes += int(np.sum((ys < out_lo[:, None, :]) | (ys > out_hi[:, None, :])))
        elapsed = time.perf_counter() - t0
        d["escapes"] = escapes
        d["runtime_s"] = round(elapsed, 1)
        assert escapes == 0
        assert elapsed < 120.0


# -- 2 -------------------------------------------------------------------------------

def _crafted_cases():
    cases = [("half-domain", Network.from_arrays([[[1.0], [0.0]]], [[-0.5, 0.0]]), 1)]
    # |x - 0.3| > 0.2 is unsafe, through a hidden ReLU pair.
    cases.append(("abs", Network.from_arrays([[[1.0], [-1.0]], [[1.0, 1.0], [0.0, 0.0]]],
                                             [[-0.3, 0.3], [-0.2, 0.0]]), 1))
    cases.append(("diagonal", Network.from_arrays([[[1.0, 1.0], [0.0, 0.0]]], [[-1.0, 0.0]]), 2))
    cases.append(("corner", Network.from_arrays([[[1.0, 0.0], [0.0, 1.0]], [[1.0, 1.0], [0.0, 0.0]]],
                                                [[-0.6, -0.6], [-0.1, 0.0]]), 2))
    cases.append(("plane3", Network.from_arrays([[[1.0, -2.0, 0.5], [0.0, 0.0, 0.0]]], [[0.2, 0.0]]), 3))
    rng = np.random.default_rng(77)
    while len(cases) < 20:
        n_in = 1 + len(cases) % 3
        net = random_network([n_in, int(rng.integers(4, 13)), int(rng.integers(2, 5))], rng)
        cases.append((f"random{len(cases)}", net, n_in))
    return cases


ORACLE_POINTS = {1: 2001, 2: 401, 3: 101}


def test_oracle_upper_bound():
    with criterion(2, "oracle upper bound on 20 crafted networks") as d:
        t0 = time.perf_counter()
        worst_gap, strict_ok, half = 0.0, 0, None
        for name, net, n_in in _crafted_cases():
            prop = SafetyProperty(name, Box(np.zeros(n_in), np.ones(n_in)), ActionNotSelected({0}))
            rep = run_verify(net, prop, min_width_fraction=2.0**-10)
            pts = ORACLE_POINTS[n_in]
            oracle = grid_oracle(net, prop, pts)
            # The grid includes both box faces, so it can overstate the true volume by
            # up to one grid spacing per dimension.
            assert rep.violation_rate >= oracle - n_in / pts, (name, rep.violation_rate, oracle)
            strict_ok += rep.violation_rate >= oracle
            gap = rep.violation_rate - oracle
            worst_gap = max(worst_gap, gap)
            assert gap <= 0.05, (name, rep.violation_rate, oracle)
            if name == "half-domain":
                half = rep.violation_rate
        elapsed = time.perf_counter() - t0
        d.update(worst_gap=round(worst_gap, 4), strict=f"{strict_ok}/20", half_domain=half, runtime_s=round(elapsed, 1))
        assert abs(half - 0.5) <= 0.01
        assert elapsed < 300.0


# -- 4 / 5 -------------------------------------------------------------------------------

def _bnb_cases(n, seed, n_in=2):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        n_out = int(rng.integers(3, 6))
        net = random_network([n_in, 16, 16, n_out], rng)
        unsafe = frozenset(rng.choice(n_out, size=int(rng.integers(1, n_out)), replace=False).tolist())
        prop = SafetyProperty(f"case{i}", Box(-np.ones(n_in), np.ones(n_in)), ActionNotSelected(unsafe))
        out.append((net, prop))
    return out


def test_refinement_monotonicity():
    with criterion(4, "refinement monotonicity, k = 6, 8, 10, 12") as d:
        rows = []
        for net, prop in _bnb_cases(10, 11):
            rates = [run_verify(net, prop, min_width_fraction=2.0**-k).violation_rate for k in (6, 8, 10, 12)]
            rows.append(rates)
            assert all(a >= b for a, b in zip(rates, rates[1:])), (prop.name, rates)
        d["pairs"] = len(rows)
        d["mean_rate_k12"] = round(float(np.mean([r[-1] for r in rows])), 4)


def test_worker_determinism():
    with criterion(5, "determinism across worker counts") as d:
        for net, prop in _bnb_cases(10, 12, n_in=3):
            kw = dict(min_width_fraction=2.0**-8, batch_size=1024)
            a = IntervalVerifier(workers=1, **kw).verify(net, prop)
            b = IntervalVerifier(workers=4, **kw).verify(net, prop)
            REPORTS.extend([(net, prop, a), (net, prop, b)])
            assert (a.proved_rate, a.violated_rate, a.undecided_rate) == (b.proved_rate, b.violated_rate, b.undecided_rate)
            assert [c["input"].tolist() for c in a.counterexamples] == [c["input"].tolist() for c in b.counterexamples]
        d["cases"] = 10


# -- 6 -------------------------------------------------------------------------------

def test_gradient_correctness():
    with criterion(6, "gradient check at init and after 10 PPO updates") as d:
        cfg = TrainConfig()
        rng = np.random.default_rng(0)
        ac = ActorCritic.init(cfg.hidden, rng)
        buf = collect_rollout(VectorEnv(cfg.env, cfg.n_envs, 1), ac, cfg.steps_per_epoch, rng)
        compute_gae(buf, cfg.gamma, cfg.gae_lambda)
        data = buf.flat()
        data["adv"] = (data["adv"] - data["adv"].mean()) / (data["adv"].std() + 1e-8)
        init = grad_check(ac, {k: v[:16] for k, v in data.items()}, n_params=300, h=1e-5,
                          rng=np.random.default_rng(1))
        opt = Adam([ac.policy, ac.value], lr=cfg.learning_rate)
        for i in range(10):
            batch = {k: v[i * 128:(i + 1) * 128] for k, v in data.items()}
            _, grads, _, _ = ppo_loss(ac, batch, cfg.clip_eps, cfg.entropy_coef, cfg.value_coef)
            opt.step(_clip_grads(grads, cfg.max_grad_norm)[0])
        after = grad_check(ac, {k: v[1500:1516] for k, v in data.items()}, n_params=300, h=1e-5,
                           rng=np.random.default_rng(2))
        d.update(init=f"{init.max_rel_error:.2e}", after=f"{after.max_rel_error:.2e}")
        assert init.n_checked >= 300 and after.n_checked >= 300
        assert init.max_rel_error < 1e-4 and after.max_rel_error < 1e-4


# -- 7 -------------------------------------------------------------------------------

def test_reward_ranges():
    with criterion(7, "reward ranges on 1e5 collision-free transitions") as d:
        cfg = EnvConfig()
        rng = np.random.default_rng(7)
        g_all, r_all = [], []
        while sum(len(r) for r in r_all) < 100_000:
            n = 50_000
            g = rng.integers(0, 2, n)
            p = rng.uniform(cfg.bbox_lo, cfg.bbox_hi, size=(n, 3))
            out = transition(cfg, g, p, rng.integers(0, 27, n))
            free = ~out["collision"] & ~out["out_of_workspace"]
            g_all.append(out["g"][free])
            r_all.append(out["reward"][free])
        g = np.concatenate(g_all)[:100_000]
        r = np.concatenate(r_all)[:100_000]
        d.update(before=f"[{r[g == 0].min():.4f}, {r[g == 0].max():.4f}]", after=f"[{r[g == 1].min():.4f}, {r[g == 1].max():.4f}]")
        assert len(r) == 100_000
        assert np.all((r[g == 0] >= -1.0) & (r[g == 0] <= -0.5))
        assert np.all((r[g == 1] >= -0.5) & (r[g == 1] <= 0.0))


# -- trained policies (8, 9, 10) ------------------------------------------------------------

def _source_hash() -> str:
    h = hashlib.sha256()
    for name in ("autodiff", "environment", "network", "trainer"):
        h.update((ROOT / "src" / "saferetract" / f"{name}.py").read_bytes())
    return h.hexdigest()[:12]


def trained_policy(mode: str) -> tuple[Network, float]:
    """Train through the CLI (or reuse the cache); returns the network and training seconds."""
    config = TrainConfig(epochs=TRAIN_EPOCHS, safety_mode=mode, seed=TRAIN_SEED)
    cache = Path(os.environ.get("SAFERETRACT_ACCEPTANCE_CACHE", ROOT / ".acceptance_cache"))
    run = cache / f"{mode}-{config.digest()}-{_source_hash()}"
    net_path = run / f"{mode}_s{TRAIN_SEED}.net.json"
    timing = run / "timing.json"
    if not net_path.exists():
        run.mkdir(parents=True, exist_ok=True)
        (run / "config.json").write_text(json.dumps(config.to_dict()))
        t0 = time.perf_counter()
        code = cli.main(["train", str(run / "config.json"), "--out", str(run), "--name", mode, "--seed", str(TRAIN_SEED)])
        assert code == 0
        timing.write_text(json.dumps({"seconds": time.perf_counter() - t0}))
    return nw.load(net_path), json.loads(timing.read_text())["seconds"]


@pytest.fixture(scope="module")
def safe_policy():
    return trained_policy("all")


@pytest.fixture(scope="module")
def unsafe_policy():
    return trained_policy("none")


def test_training_success(safe_policy):
    with criterion(8, f"Safe-PPO greedy success after {TRAIN_EPOCHS} epochs x 2000 steps") as d:
        net, seconds = safe_policy
        ev = greedy_rollouts(net, EnvConfig(), 100, seed=2023)
        d.update(success=ev["success_rate"], train_minutes=round(seconds / 60, 1))
        assert TRAIN_EPOCHS <= 500
        assert seconds < 2 * 3600
        assert ev["success_rate"] >= 0.9


def test_safe_beats_unsafe(safe_policy, unsafe_policy, tmp_path):
    with criterion(9, "Safe-PPO overall violation rate < half of Unsafe-PPO") as d:
        overall = {}
        for title, (net, _) in (("safe", safe_policy), ("unsafe", unsafe_policy)):
            out = tmp_path / title
            nw.save(net, tmp_path / f"{title}.net.json")
            assert cli.main(["verify", str(tmp_path / f"{title}.net.json"), "--out", str(out)]) == 0
            rows = cli.read_table(out / "violation_rates.csv")
            assert len(rows) == 15
            rates = [float(r["violation_rate"]) for r in rows[:11]]
            overall[title] = float(rows[-1]["violation_rate"])
            assert overall[title] == pytest.approx(np.mean(rates), abs=1e-9)
            for rep in json.loads((out / "reports.json").read_text()):
                for ce in rep["counterexamples"]:
                    REPORTS.append((net, None, {"input": np.array(ce["input"]), "property": rep["property"]}))
        d.update(safe_pct=round(overall["safe"], 3), unsafe_pct=round(overall["unsafe"], 3))
        assert overall["safe"] < 0.5 * overall["unsafe"]


def test_visited_states_avoid_violations(safe_policy, tmp_path):
    with criterion(10, "Safe-PPO visited states inside violated map cells < 1%") as d:
        net, _ = safe_policy
        net_path = tmp_path / "safe.net.json"
        nw.save(net, net_path)
        states_csv = tmp_path / "states.csv"
        assert cli.main(["rollout-states", str(net_path), "--episodes", "1000", "--out", str(states_csv)]) == 0
        states = cli.read_states(states_csv)
        suite = default_suite(EnvConfig()).normalized()
        hit = np.zeros(len(states), dtype=bool)
        violated_cells = 0
        for prop in suite:
            out = tmp_path / f"map_{prop.name}.csv"
            # Slices over the y position and the goal distance, x and z drawn per slice.
            args = ["violation-map", str(net_path), "--dims", "2", "7", "--fixed-samples", "10", "--grid", "50",
                    "--property", prop.name, "--out", str(out)]
            assert cli.main(args) == 0
            vmap = cli.ViolationMap.read(out)
            violated_cells += int((vmap.codes == cli.VIOLATED_CELL).sum())
            hit |= cli.states_in_violated_cells(vmap, prop, states)
        frac = float(hit.mean())
        d.update(states=len(states), violated_cells=violated_cells, fraction=f"{100 * frac:.3f}%")
        assert frac < 0.01


# -- 3 (runs last: replays everything collected above) ----------------------------------

def test_zz_counterexample_replay():
    with criterion(3, "counterexample replay") as d:
        suite = default_suite(EnvConfig()).normalized()
        n = 0
        for net, prop, rep in REPORTS:
            if isinstance(rep, dict):
                prop = suite[rep["property"]]
                ces = [rep]
            else:
                ces = rep.counterexamples
            for ce in ces:
                assert prop.input_box.contains(ce["input"])
                assert int(np.argmax(forward(net, ce["input"]))) in prop.condition.unsafe
                n += 1
        d["replayed"] = n
        assert n > 0


if __name__ == "__main__":
    import sys

    # The summary lines are printed by the hook in conftest.py.
    sys.exit(pytest.main([__file__, "-q"]))
