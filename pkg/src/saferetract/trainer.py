"""Clipped PPO on the tissue-retraction task, written against numpy only.

Safety modes control which workspace exits are penalised during training:

* ``"all"``  - every exit or obstacle hit (Safe-PPO);
* ``"none"`` - no penalty at all (Unsafe-PPO);
* a list of property names - only exits through faces those properties guard.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence, Union

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .autodiff import MLP, Adam, global_norm
from .environment import N_ACTIONS, OBS_DIM, EnvConfig, VectorEnv, observation_array, sample_start, transition
from .network import Network

SafetyMode = Union[str, Sequence[str]]


class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    clip_eps: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    learning_rate: float = 3e-4
    epochs: int = 300
    steps_per_epoch: int = 2000
    n_envs: int = 8
    minibatch_size: int = 256
    update_epochs: int = 10
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    hidden: tuple = (64, 64)
    seed: int = 0
    safety_mode: SafetyMode = "all"
    primitive_fraction: float = 0.5
    env: EnvConfig = field(default_factory=EnvConfig)

    def __post_init__(self):
        if isinstance(self.env, dict):
            self.env = EnvConfig.from_dict(self.env)
        self.hidden = tuple(int(h) for h in self.hidden)
        if not isinstance(self.safety_mode, str):
            self.safety_mode = tuple(self.safety_mode)
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must be in (0, 1)")
        if not (0.0 < self.gamma <= 1.0 and 0.0 < self.gae_lambda <= 1.0):
            raise ValueError("gamma and gae_lambda must be in (0, 1]")
        if not self.hidden or min(self.hidden) <= 0:
            raise ValueError("hidden widths must be positive")
        if self.steps_per_epoch % self.n_envs:
            raise ValueError("steps_per_epoch must be divisible by n_envs")
        if isinstance(self.safety_mode, str) and self.safety_mode not in ("all", "none"):
            raise ValueError(f"unknown safety_mode {self.safety_mode!r}")

    @property
    def penalized(self) -> Optional[frozenset]:
        if self.safety_mode == "all":
            return None
        if self.safety_mode == "none":
            return frozenset()
        return frozenset(self.safety_mode)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["env"] = self.env.to_dict()
        d["hidden"] = list(self.hidden)
        if not isinstance(self.safety_mode, str):
            d["safety_mode"] = list(self.safety_mode)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown training config fields: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_train_config(path) -> TrainConfig:
    with open(path) as fh:
        return TrainConfig.from_dict(json.load(fh))


# -- policy / value ------------------------------------------------------------------

def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class ActorCritic:
    def __init__(self, policy: MLP, value: MLP):
        self.policy = policy
        self.value = value

    @classmethod
    def init(cls, hidden: Sequence[int], rng: np.random.Generator) -> "ActorCritic":
        policy = MLP.init((OBS_DIM, *hidden, N_ACTIONS), rng, out_scale=0.01)
        value = MLP.init((OBS_DIM, *hidden, 1), rng, out_scale=1.0)
        return cls(policy, value)

    def logits(self, obs):
        return self.policy.forward(obs)

    def values(self, obs):
        return self.value.forward(obs)[:, 0]

    def probs(self, obs):
        return np.exp(log_softmax(self.logits(obs)))

    def act(self, obs: np.ndarray, rng: np.random.Generator):
        """Sample from the softmax policy; returns (actions, log-probs, values)."""
        logp_all = log_softmax(self.logits(obs))
        cdf = np.cumsum(np.exp(logp_all), axis=1)
        u = rng.random(len(obs))[:, None] * cdf[:, -1:]
        actions = np.minimum((cdf < u).sum(axis=1), N_ACTIONS - 1)
        return actions, logp_all[np.arange(len(obs)), actions], self.values(obs)

    def greedy(self, obs):
        return np.argmax(self.logits(np.atleast_2d(obs)), axis=1)

    def copy(self) -> "ActorCritic":
        return ActorCritic(self.policy.copy(), self.value.copy())

    def all_finite(self) -> bool:
        return self.policy.all_finite() and self.value.all_finite()


# -- rollouts ------------------------------------------------------------------------

@dataclass
class RolloutBuffer:
    """Arrays shaped (T, n_envs[, ...]); ``next_values`` already holds the bootstrap targets."""

    obs: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    next_values: np.ndarray
    dones: np.ndarray  # episode ended after this step (success or time limit)
    terminals: np.ndarray  # ended by success; no bootstrap
    penalties: np.ndarray
    episodes: list = field(default_factory=list)
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.rewards.size

    def flat(self) -> dict:
        n = len(self)
        return {
            "obs": self.obs.reshape(n, -1),
            "act": self.actions.reshape(n),
            "logp": self.logp.reshape(n),
            "adv": self.advantages.reshape(n),
            "ret": self.returns.reshape(n),
        }


def collect_rollout(venv: VectorEnv, ac: ActorCritic, steps: int, rng: np.random.Generator) -> RolloutBuffer:
    n = venv.n
    if steps % n:
        raise ValueError("steps must be divisible by the number of environments")
    T = steps // n
    obs_buf = np.zeros((T, n, OBS_DIM))
    act_buf = np.zeros((T, n), dtype=np.int64)
    logp_buf = np.zeros((T, n))
    rew_buf = np.zeros((T, n))
    val_buf = np.zeros((T, n))
    next_val = np.zeros((T, n))
    done_buf = np.zeros((T, n), dtype=bool)
    term_buf = np.zeros((T, n), dtype=bool)
    pen_buf = np.zeros((T, n), dtype=bool)
    episodes = []
    obs = venv.observe()
    for t in range(T):
        a, logp, v = ac.act(obs, rng)
        obs_buf[t], act_buf[t], logp_buf[t], val_buf[t] = obs, a, logp, v
        next_obs, r, success, truncated, final_obs, finished = venv.step(a)
        rew_buf[t] = r
        done_buf[t] = success | truncated
        term_buf[t] = success
        pen_buf[t] = venv.last_penalised
        # Bootstrap truncated episodes from their final state; mid-episode steps are filled below.
        if truncated.any():
            next_val[t, truncated] = ac.values(final_obs[truncated])
        episodes.extend(finished)
        obs = next_obs
    last_v = ac.values(obs)
    for t in range(T):
        nxt = val_buf[t + 1] if t + 1 < T else last_v
        cont = ~done_buf[t]
        next_val[t, cont] = nxt[cont]
    next_val[term_buf] = 0.0
    return RolloutBuffer(obs_buf, act_buf, logp_buf, rew_buf, val_buf, next_val, done_buf, term_buf, pen_buf, episodes)


def compute_gae(buffer: RolloutBuffer, gamma: float, lam: float):
    """Generalised advantage estimation; returns (advantages, returns) shaped like rewards."""
    rewards = np.asarray(buffer.rewards, dtype=np.float64)
    adv = np.zeros_like(rewards)
    last = np.zeros(rewards.shape[1:])
    for t in range(len(rewards) - 1, -1, -1):
        delta = rewards[t] + gamma * buffer.next_values[t] - buffer.values[t]
        last = delta + gamma * lam * (1.0 - buffer.dones[t]) * last
        adv[t] = last
    returns = adv + buffer.values
    buffer.advantages, buffer.returns = adv, returns
    return adv, returns


# -- loss ------------------------------------------------------------------------------

def clipped_surrogate(ratio, adv, eps: float):
    """Per-sample min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A)."""
    # No dtype coercion: grad_check evaluates this in extended precision.
    ratio, adv = np.asarray(ratio), np.asarray(adv)
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)


def ppo_loss(ac: ActorCritic, batch: dict, clip_eps: float, entropy_coef: float, value_coef: float,
             need_grads: bool = True):
    """Loss = -surrogate + value_coef * 0.5 (V - R)^2 - entropy_coef * H, batch-averaged.

    Returns (loss, grads, stats) with grads as [policy_grads, value_grads],
    plus a ``kinks`` entry describing ReLU/clip state for gradient checks.
    """
    obs, act, adv = batch["obs"], batch["act"], batch["adv"]
    B = len(obs)
    logits, pcache = ac.policy.forward(obs, keep=True)
    vout, vcache = ac.value.forward(obs, keep=True)
    v = vout[:, 0]

    logp_all = log_softmax(logits)
    p = np.exp(logp_all)
    rows = np.arange(B)
    ratio = np.exp(logp_all[rows, act] - batch["logp"])
    surr = clipped_surrogate(ratio, adv, clip_eps)
    entropy = -(p * logp_all).sum(axis=1)
    v_err = v - batch["ret"]

    pol_loss = -surr.mean()
    val_loss = 0.5 * np.mean(v_err**2)
    ent = entropy.mean()
    loss = pol_loss + value_coef * val_loss - entropy_coef * ent
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"non-finite PPO loss (policy {pol_loss}, value {val_loss}, entropy {ent})")

    clipped_region = (ratio < 1.0 - clip_eps) | (ratio > 1.0 + clip_eps)
    stats = {
        "policy_loss": float(pol_loss),
        "value_loss": float(val_loss),
        "entropy": float(ent),
        "clip_fraction": float(clipped_region.mean()),
        "approx_kl": float(np.mean((ratio - 1.0) - np.log(ratio))),
        "surrogate": float(surr.mean()),
    }
    kinks = {
        "policy": MLP.relu_pattern(pcache),
        "value": MLP.relu_pattern(vcache),
        "clip": (ratio * adv <= np.clip(ratio, 1 - clip_eps, 1 + clip_eps) * adv, clipped_region),
        "terms": (pol_loss, val_loss, ent),  # unrounded, in the input precision
    }
    if not need_grads:
        return float(loss), None, stats, kinks

    # d surr / d ratio is A where the unclipped term is the active minimum, 0 otherwise.
    dsurr = np.where(ratio * adv <= np.clip(ratio, 1 - clip_eps, 1 + clip_eps) * adv, adv, 0.0)
    onehot = np.zeros_like(p)
    onehot[rows, act] = 1.0
    d_logits = -(dsurr * ratio)[:, None] * (onehot - p) / B
    # dH/dz_k = -p_k (log p_k + H)
    d_logits += entropy_coef * p * (logp_all + entropy[:, None]) / B
    d_v = (value_coef * v_err / B)[:, None]

    grads = [ac.policy.backward(pcache, d_logits), ac.value.backward(vcache, d_v)]
    return float(loss), grads, stats, kinks


def _clip_grads(grads, max_norm):
    norm = global_norm(grads)
    if max_norm and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        grads = [[[g * s for g in pair] for pair in gs] for gs in grads]
    return grads, norm


def ppo_update(ac: ActorCritic, buffer: RolloutBuffer, config: TrainConfig, optimizer: Adam,
               rng: np.random.Generator) -> dict:
    """Minibatch Adam steps on the clipped objective; updates ``ac`` in place."""
    data = buffer.flat()
    adv = data["adv"]
    data["adv"] = (adv - adv.mean()) / (adv.std() + 1e-8)
    n = len(adv)
    acc = {"policy_loss": [], "value_loss": [], "entropy": [], "clip_fraction": [], "approx_kl": [], "grad_norm": []}
    for _ in range(config.update_epochs):
        perm = rng.permutation(n)
        for s in range(0, n, config.minibatch_size):
            idx = perm[s:s + config.minibatch_size]
            batch = {k: v[idx] for k, v in data.items()}
            _, grads, stats, _ = ppo_loss(ac, batch, config.clip_eps, config.entropy_coef, config.value_coef)
            grads, norm = _clip_grads(grads, config.max_grad_norm)
            optimizer.step(grads)
            for k in acc:
                acc[k].append(norm if k == "grad_norm" else stats[k])
    return {k: float(np.mean(v)) for k, v in acc.items()}


# -- gradient check ------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    n_skipped: int

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_rel_error < tolerance


def _same_kinks(a, b) -> bool:
    for key in ("policy", "value"):
        if any(not np.array_equal(x, y) for x, y in zip(a[key], b[key])):
            return False
    return all(np.array_equal(x, y) for x, y in zip(a["clip"], b["clip"]))


def grad_check(ac: ActorCritic, batch: dict, clip_eps: float = 0.2, entropy_coef: float = 0.01,
               value_coef: float = 0.5, n_params: int = 200, h: float = 1e-5,
               rng: Optional[np.random.Generator] = None, head: str = "both") -> GradCheckResult:
    """Compare analytic gradients with central differences on random parameters.

    Perturbations that flip a ReLU or clip branch are skipped (the loss is not
    differentiable there) and replaced by another draw. ``head`` selects
    "policy", "value" or "both" parameter sets.
    """
    if len(batch["obs"]) > 16:
        raise ValueError("grad_check expects a small batch (<= 16 samples)")
    rng = rng or np.random.default_rng(0)
    _, grads, _, kinks0 = ppo_loss(ac, batch, clip_eps, entropy_coef, value_coef)
    # Differences are taken in extended precision so float64 rounding in the
    # forward pass (about 1e-16 / h) does not swamp small gradients.
    ext = ActorCritic(
        MLP([[W.astype(np.longdouble), b.astype(np.longdouble)] for W, b in ac.policy.params]),
        MLP([[W.astype(np.longdouble), b.astype(np.longdouble)] for W, b in ac.value.params]),
    )
    ext_batch = {k: (v if k == "act" else np.asarray(v, dtype=np.longdouble)) for k, v in batch.items()}
    slots = []
    nets = {"policy": [(0, ext.policy)], "value": [(1, ext.value)], "both": [(0, ext.policy), (1, ext.value)]}[head]
    for which, mlp in nets:
        for li, pair in enumerate(mlp.params):
            for j, arr in enumerate(pair):
                slots.append((which, mlp, li, j, arr.size))
    sizes = np.array([s[-1] for s in slots], dtype=np.float64)
    weights = sizes / sizes.sum()

    worst, checked, skipped = 0.0, 0, 0
    attempts = 0
    while checked < n_params and attempts < 20 * n_params:
        attempts += 1
        which, mlp, li, j, size = slots[rng.choice(len(slots), p=weights)]
        flat_i = int(rng.integers(size))
        arr = mlp.params[li][j]
        pos = np.unravel_index(flat_i, arr.shape)
        orig = arr[pos]
        arr[pos] = orig + h
        _, _, _, kp = ppo_loss(ext, ext_batch, clip_eps, entropy_coef, value_coef, need_grads=False)
        arr[pos] = orig - h
        _, _, _, km = ppo_loss(ext, ext_batch, clip_eps, entropy_coef, value_coef, need_grads=False)
        arr[pos] = orig
        if not (_same_kinks(kinks0, kp) and _same_kinks(kinks0, km)):
            skipped += 1
            continue
        (pp, vp, ep), (pm, vm, em) = kp["terms"], km["terms"]
        numeric = float(((pp - pm) + value_coef * (vp - vm) - entropy_coef * (ep - em)) / (2.0 * h))
        analytic = grads[which][li][j][pos]
        denom = max(abs(numeric), abs(analytic), 1e-8)
        worst = max(worst, abs(numeric - analytic) / denom)
        checked += 1
    return GradCheckResult(worst, checked, skipped)


# -- training loop ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    actor_critic: ActorCritic
    curve: list
    checkpoints: dict  # name -> Network
    config: TrainConfig


CURVE_FIELDS = ("epoch", "mean_reward", "success_rate", "collisions", "episodes",
                "policy_loss", "value_loss", "entropy", "approx_kl", "clip_fraction")


def _network_metadata(config: TrainConfig, name: str, epoch: int) -> dict:
    return {
        "name": name,
        "epoch": epoch,
        "config_digest": config.digest(),
        "safety_mode": config.safety_mode if isinstance(config.safety_mode, str) else list(config.safety_mode),
        "seed": config.seed,
        "hyperparameters": {k: v for k, v in config.to_dict().items() if k != "env"},
    }


def train(config: TrainConfig, name: str = "policy", log=None) -> TrainResult:
    """Run ``config.epochs`` collect/update cycles.

    Saves a "primitive" checkpoint after ``primitive_fraction`` of the epochs
    and a "final" one at the end. Raises TrainingDiverged (carrying the last
    finite policy) if parameters stop being finite.
    """
    ss = np.random.SeedSequence(config.seed)
    init_ss, env_ss, act_ss, upd_ss = ss.spawn(4)
    ac = ActorCritic.init(config.hidden, np.random.default_rng(init_ss))
    venv = VectorEnv(config.env, config.n_envs, np.random.default_rng(env_ss), config.penalized)
    act_rng = np.random.default_rng(act_ss)
    upd_rng = np.random.default_rng(upd_ss)
    opt = Adam([ac.policy, ac.value], lr=config.learning_rate)

    primitive_epoch = max(1, int(round(config.primitive_fraction * config.epochs)))
    checkpoints = {}
    curve = []
    last_good = ac.copy()
    for epoch in range(1, config.epochs + 1):
        buf = collect_rollout(venv, ac, config.steps_per_epoch, act_rng)
        compute_gae(buf, config.gamma, config.gae_lambda)
        try:
            stats = ppo_update(ac, buf, config, opt, upd_rng)
        except NonFiniteLoss as exc:
            raise TrainingDiverged(str(exc), last_good.policy.to_network(_network_metadata(config, name, epoch - 1)))
        if not ac.all_finite():
            raise TrainingDiverged(f"non-finite parameters at epoch {epoch}",
                                   last_good.policy.to_network(_network_metadata(config, name, epoch - 1)))
        last_good = ac.copy()
        eps = buf.episodes
        row = {
            "epoch": epoch,
            "mean_reward": float(np.mean([e["return"] for e in eps])) if eps else float("nan"),
            "success_rate": float(np.mean([e["success"] for e in eps])) if eps else 0.0,
            "collisions": int(sum(e["collisions"] for e in eps)),
            "episodes": len(eps),
            **{k: stats[k] for k in ("policy_loss", "value_loss", "entropy", "approx_kl", "clip_fraction")},
        }
        curve.append(row)
        if log is not None:
            log(row)
        if epoch == primitive_epoch:
            checkpoints["primitive"] = ac.policy.to_network(_network_metadata(config, f"{name}-primitive", epoch))
    checkpoints["final"] = ac.policy.to_network(_network_metadata(config, name, config.epochs))
    return TrainResult(ac, curve, checkpoints, config)


def write_curve(path, curve: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_FIELDS)
        w.writeheader()
        for row in curve:
            w.writerow({k: row[k] for k in CURVE_FIELDS})


# -- greedy evaluation --------------------------------------------------------------------------

def greedy_rollouts(policy, config: EnvConfig, episodes: int, seed=0, record: bool = False) -> dict:
    """Run ``episodes`` greedy episodes in lock-step.

    ``policy`` is a Network or anything with ``greedy(obs)``. With ``record``
    every pre-step observation is returned in episode order.
    """
    rng = np.random.default_rng(seed)
    greedy = policy.greedy if hasattr(policy, "greedy") else (lambda o: np.argmax(policy.forward(o), axis=1))
    g = np.zeros(episodes, dtype=np.int64)
    p = sample_start(config, rng, episodes)
    active = np.ones(episodes, dtype=bool)
    success = np.zeros(episodes, dtype=bool)
    length = np.zeros(episodes, dtype=np.int64)
    collisions = np.zeros(episodes, dtype=np.int64)
    outside = np.zeros(episodes, dtype=np.int64)
    returns = np.zeros(episodes)
    records = []
    for t in range(config.max_steps):
        idx = np.flatnonzero(active)
        if not idx.size:
            break
        obs = observation_array(g[idx], p[idx], config)
        a = greedy(obs)
        if record:
            records.append((idx, np.full(idx.size, t), obs, a))
        out = transition(config, g[idx], p[idx], a)
        g[idx], p[idx] = out["g"], out["p"]
        returns[idx] += out["reward"]
        collisions[idx] += out["collision"]
        outside[idx] += out["out_of_workspace"]
        length[idx] += 1
        success[idx] = out["success"]
        active[idx[out["success"]]] = False
    result = {
        "success": success,
        "length": length,
        "collisions": collisions,
        "out_of_workspace": outside,
        "returns": returns,
        "success_rate": float(success.mean()),
    }
    if record:
        ep = np.concatenate([r[0] for r in records])
        st = np.concatenate([r[1] for r in records])
        order = np.lexsort((st, ep))
        result["episode"] = ep[order]
        result["step"] = st[order]
        result["obs"] = np.concatenate([r[2] for r in records])[order]
        result["action"] = np.concatenate([r[3] for r in records])[order]
    return result


# -- estimator facade -------------------------------------------------------------------------------

class PPOAgent(BaseEstimator):
    """scikit-learn style wrapper: ``fit`` trains, ``predict`` returns greedy actions."""

    def __init__(self, epochs=300, steps_per_epoch=2000, n_envs=8, clip_eps=0.2, gamma=0.99,
                 gae_lambda=0.95, learning_rate=3e-4, minibatch_size=256, update_epochs=10,
                 entropy_coef=0.01, value_coef=0.5, max_grad_norm=0.5, hidden=(64, 64), seed=0,
                 safety_mode="all", primitive_fraction=0.5, env=None):
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.n_envs = n_envs
        self.clip_eps = clip_eps
        self.gamma = gamma
        self.gae_lambda = gae_lambda
        self.learning_rate = learning_rate
        self.minibatch_size = minibatch_size
        self.update_epochs = update_epochs
        self.entropy_coef = entropy_coef
        self.value_coef = value_coef
        self.max_grad_norm = max_grad_norm
        self.hidden = hidden
        self.seed = seed
        self.safety_mode = safety_mode
        self.primitive_fraction = primitive_fraction
        self.env = env

    def train_config(self) -> TrainConfig:
        params = self.get_params()
        env = params.pop("env") or EnvConfig()
        return TrainConfig(env=env, **params)

    def fit(self, X=None, y=None, log=None):
        """Train on the environment; ``X``/``y`` are accepted for API compatibility and ignored."""
        result = train(self.train_config(), log=log)
        self.actor_critic_ = result.actor_critic
        self.curve_ = result.curve
        self.checkpoints_ = result.checkpoints
        self.policy_network_ = result.checkpoints["final"]
        self.n_features_in_ = OBS_DIM
        return self

    def decision_function(self, X):
        check_is_fitted(self, "policy_network_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != OBS_DIM:
            raise ValueError(f"X has {X.shape[1]} features, expected {OBS_DIM}")
        return self.policy_network_.forward(X)

    def predict_proba(self, X):
        return np.exp(log_softmax(self.decision_function(X)))

    def predict(self, X):
        return np.argmax(self.decision_function(X), axis=1)

    def score(self, X=None, y=None, episodes: int = 100, seed: int = 12345) -> float:
        """Greedy success rate over ``episodes`` fresh episodes."""
        check_is_fitted(self, "policy_network_")
        return greedy_rollouts(self.policy_network_, self.env or EnvConfig(), episodes, seed)["success_rate"]
