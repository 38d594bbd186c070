"""Multi-agent actor-critic that adjusts each contract's bid offset per step.

All contracts share one actor and one critic; they are told apart only by
their observation vectors. The critic regresses the outcome of freezing
the current offsets for the rest of the day, which one vectorized auction
pass computes exactly, so no bootstrapped targets are needed.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import kernels
from .dual import solve_dual
from .market import Contracts, Dataset, EpisodeState, Policy, as_contracts, run_episode
from .nets import MLP, make_optimizer

OBS_DIM = 8
LOG_COLUMNS = ("episode", "R", "R_star", "ratio", "train_ratio", "critic_loss", "wall_ms")


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class MarliaConfig:
    episodes: int = 1200
    actor_lr: float = 3e-6
    critic_lr: float = 1e-3
    batch_size: int = 32
    memory: int = 100_000
    noise_sigma: float = 0.05
    action_bound: float = 0.1
    hidden: tuple[int, ...] = (32, 32)
    optimizer: str = "adam"
    sample_fraction: float = 0.1
    resample: bool = False
    updates_per_step: int = 1
    warmup_episodes: int = 30
    last_init: float | None = 3e-3
    baseline: bool = True
    credit: str = "global"
    select: str = "best"
    time_limit: float | None = None
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.episodes < 0 or self.batch_size <= 0 or self.memory <= 0:
            raise ValueError("episodes, batch_size and memory must be positive")
        if not 0 < self.sample_fraction <= 1:
            raise ValueError("sample_fraction must lie in (0, 1]")
        if self.noise_sigma < 0 or self.action_bound <= 0:
            raise ValueError("noise_sigma must be >= 0 and action_bound > 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.credit not in ("global", "counterfactual"):
            raise ValueError(f"credit must be 'global' or 'counterfactual', got {self.credit!r}")
        if self.select not in ("last", "best"):
            raise ValueError(f"select must be 'last' or 'best', got {self.select!r}")

    @classmethod
    def from_mapping(cls, data: dict) -> "MarliaConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"marlia config: unknown keys {sorted(unknown)}")
        return cls(**data)


# ------------------------------------------------------------ environment glue

def build_observation(state: EpisodeState, j: int | None = None) -> np.ndarray:
    """Observation rows for every contract (or just contract ``j``) at step ``state.t``."""
    cs = state.contracts
    m = len(cs)
    T = state.horizon
    d = cs.demand.astype(float)
    pos = d > 0
    x = np.ones(m)
    x[pos] = state.delivered[pos] / d[pos]
    speed = np.zeros(m)
    speed[pos] = state.last_wins[pos] / (d[pos] / T)
    tau = state.t / T
    total = d.sum()
    obs = np.empty((m, OBS_DIM))
    obs[:, 0] = tau
    obs[:, 1] = x
    obs[:, 2] = speed
    obs[:, 3] = tau - x
    obs[:, 4] = state.alphas / cs.penalty
    obs[:, 5] = x.mean() if m else 0.0
    obs[:, 6] = state.rtb_wins / state.seen if state.seen else 0.0
    obs[:, 7] = d / total if total > 0 else 0.0
    return obs if j is None else obs[j]


def apply_action(alpha, delta, penalty, bound: float = 0.1):
    delta = np.asarray(delta, dtype=float)
    if np.any(np.abs(delta) > bound + 1e-12):
        raise ValueError(f"action outside [-{bound}, {bound}]")
    out = np.minimum(np.asarray(alpha, dtype=float) + delta * penalty, penalty)
    return float(out) if out.ndim == 0 else out


def rollout_value(state: EpisodeState, alphas, remaining: Dataset | None = None) -> float:
    """Outcome of the rest of the day (from ``state.t`` on) with offsets frozen.

    Includes the terminal shortfall penalty and excludes prepaid revenue,
    so it equals the sum of the remaining step rewards.
    """
    cs = state.contracts
    if remaining is None:
        remaining = state.dataset.from_step(state.t)
    m = len(cs)
    if m == 0:
        return float(remaining.b2.sum())
    alphas = np.asarray(alphas, dtype=float)
    _, counts, qval, rtb, _ = kernels.auction_pass(remaining.q, cs.quality_weight, alphas, remaining.b2)
    short = np.maximum(cs.demand - state.delivered - counts, 0)
    return qval + rtb - float(np.dot(cs.penalty, short))


def counterfactual_values(state: EpisodeState, alphas, previous, remaining: Dataset | None = None):
    """Per-contract credit: rollout with ``alphas`` minus rollout with only ``alphas[j]`` reverted.

    Only contract j's bid changes in counterfactual j, so the winner of each
    impression is either j or the best of the other contracts, which the
    top two new bids give without re-running the auction.
    """
    cs = state.contracts
    m = len(cs)
    if remaining is None:
        remaining = state.dataset.from_step(state.t)
    alphas = np.asarray(alphas, dtype=float)
    previous = np.asarray(previous, dtype=float)
    n = len(remaining)
    if m == 0:
        return np.zeros(0)
    if n == 0:
        return np.zeros(m)
    quality = remaining.q * cs.quality_weight
    b2 = remaining.b2
    rows = np.arange(n)

    def value(winner):
        won = winner >= 0
        counts = np.bincount(winner[won], minlength=m)
        short = np.maximum(cs.demand - state.delivered - counts, 0)
        return (float(quality[rows[won], winner[won]].sum()) + float(b2[~won].sum())
                - float(np.dot(cs.penalty, short)))

    bids = quality + alphas
    if m == 1:
        k1 = np.zeros(n, dtype=np.int64)
        v1 = bids[:, 0]
        k2 = np.full(n, -1, dtype=np.int64)
        v2 = np.full(n, -np.inf)
    else:
        k1 = np.argmax(bids, axis=1)
        v1 = bids[rows, k1]
        masked = bids.copy()
        masked[rows, k1] = -np.inf
        k2 = np.argmax(masked, axis=1)
        v2 = masked[rows, k2]
    full = value(np.where(v1 > b2, k1, -1))
    out = np.empty(m)
    for j in range(m):
        own = quality[:, j] + previous[j]
        is_top = k1 == j
        alt_v = np.where(is_top, v2, v1)
        alt_k = np.where(is_top, k2, k1)
        # contract-vs-contract ties go to the lower index
        take_j = (own > alt_v) | ((own == alt_v) & (j < alt_k))
        best = np.where(take_j, own, alt_v)
        winner = np.where(best > b2, np.where(take_j, j, alt_k), -1)
        out[j] = full - value(winner)
    return out


# --------------------------------------------------------------- learning core

class ReplayMemory:
    """Fixed-capacity FIFO store of (observation, action, value) rows."""

    def __init__(self, capacity: int, obs_dim: int = OBS_DIM):
        self.capacity = int(capacity)
        self.obs = np.zeros((self.capacity, obs_dim))
        self.act = np.zeros(self.capacity)
        self.val = np.zeros(self.capacity)
        self.size = 0
        self.head = 0

    def __len__(self):
        return self.size

    def add(self, obs, act, val):
        obs = np.atleast_2d(obs)
        act = np.broadcast_to(np.asarray(act, dtype=float), (obs.shape[0],))
        val = np.broadcast_to(np.asarray(val, dtype=float), (obs.shape[0],))
        for k in range(obs.shape[0]):
            self.obs[self.head] = obs[k]
            self.act[self.head] = act[k]
            self.val[self.head] = val[k]
            self.head = (self.head + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def sample(self, batch: int, rng: np.random.Generator):
        idx = rng.integers(0, self.size, size=batch)
        return self.obs[idx], self.act[idx], self.val[idx]

    def oldest(self):
        """Rows in insertion order, oldest first."""
        if self.size < self.capacity:
            order = np.arange(self.size)
        else:
            order = (np.arange(self.capacity) + self.head) % self.capacity
        return self.obs[order], self.act[order], self.val[order]


def critic_input(obs, act, act_scale: float = 1.0) -> np.ndarray:
    a = np.asarray(act, dtype=float).reshape(-1, 1) / act_scale
    return np.hstack([np.atleast_2d(obs), a])


def critic_loss_grad(critic: MLP, obs, act, val, act_scale: float = 1.0):
    """Mean squared error and its parameter gradients."""
    pred, acts = critic.forward(critic_input(obs, act, act_scale), cache=True)
    err = pred[:, 0] - np.asarray(val, dtype=float)
    loss = float(np.mean(err * err))
    grads, _ = critic.backward(acts, (2.0 / err.size) * err[:, None])
    return loss, grads


def critic_update(critic: MLP, optimizer, obs, act, val, act_scale: float = 1.0) -> float:
    if len(np.atleast_1d(val)) == 0:
        return 0.0
    loss, grads = critic_loss_grad(critic, obs, act, val, act_scale)
    optimizer.step(critic.params, grads)
    return loss


def action_gradient(critic: MLP, obs, act, act_scale: float = 1.0) -> np.ndarray:
    """dQ/d(action) for each row."""
    _, acts = critic.forward(critic_input(obs, act, act_scale), cache=True)
    _, gin = critic.backward(acts, np.ones((acts[0].shape[0], 1)))
    return gin[:, -1] / act_scale


def actor_gradient(actor: MLP, critic: MLP, obs, act_scale: float = 1.0):
    """Ascent direction of mean Q(o, pi(o)) w.r.t. the actor parameters."""
    obs = np.atleast_2d(obs)
    act, acts = actor.forward(obs, cache=True)
    dq = action_gradient(critic, obs, act[:, 0], act_scale)
    grads, _ = actor.backward(acts, dq[:, None] / obs.shape[0])
    return grads


def actor_update(actor: MLP, critic: MLP, optimizer, obs, act_scale: float = 1.0) -> float:
    grads = actor_gradient(actor, critic, obs, act_scale)
    # optimizers minimize, so hand them the negated ascent direction
    optimizer.step(actor.params, [-g for g in grads])
    return float(math.sqrt(sum(float((g * g).sum()) for g in grads)))


# ---------------------------------------------------------------- the policy

class MarliaPolicy(Policy):
    name = "marlia"

    def __init__(self, actor: MLP, alpha_start, bound: float = 0.1):
        self.actor = actor
        self.alpha_start = np.asarray(alpha_start, dtype=float)
        self.bound = bound

    def start(self, state):
        return np.minimum(self.alpha_start, state.contracts.penalty)

    def next_alphas(self, state):
        if len(state.contracts) == 0:
            return state.alphas
        delta = np.clip(self.actor(build_observation(state))[:, 0], -self.bound, self.bound)
        return apply_action(state.alphas, delta, state.contracts.penalty, self.bound)


@dataclass
class TrainResult:
    actor: MLP
    critic: MLP
    value_scale: float
    best_ratio: float
    best_episode: int
    log: list = field(default_factory=list)

    def checkpoint(self) -> dict:
        return {
            "actor": self.actor.to_dict(),
            "critic": self.critic.to_dict(),
            "value_scale": self.value_scale,
            "best_ratio": self.best_ratio,
            "best_episode": self.best_episode,
        }

    def policy(self, alpha_start) -> MarliaPolicy:
        return MarliaPolicy(self.actor, alpha_start, bound=self.actor.out_scale or 0.1)


def save_checkpoint(result: TrainResult, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(result.checkpoint(), fh)


def load_checkpoint(path) -> TrainResult:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    return TrainResult(MLP.from_dict(d["actor"]), MLP.from_dict(d["critic"]),
                       float(d["value_scale"]), float(d["best_ratio"]), int(d["best_episode"]))


def write_log(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r["episode"], repr(r["R"]), repr(r["R_star"]), repr(r["ratio"]),
                        repr(r["train_ratio"]), repr(r["critic_loss"]), r["wall_ms"]])


def _training_day(dataset: Dataset, contracts: Contracts, fraction: float, rng):
    if fraction >= 1.0:
        return dataset, contracts
    sub = dataset.subsample(fraction, rng)
    scale = len(sub) / max(len(dataset), 1)
    demand = np.floor(contracts.demand * scale + 0.5).astype(np.int64)
    return sub, contracts.with_demand(demand)


def make_nets(config: MarliaConfig, rng) -> tuple[MLP, MLP]:
    actor = MLP((OBS_DIM, *config.hidden, 1), out_scale=config.action_bound, rng=rng,
                last_init=config.last_init)
    critic = MLP((OBS_DIM + 1, *config.hidden, 1), rng=rng, last_init=config.last_init)
    return actor, critic


def train(dataset: Dataset, contracts, config: MarliaConfig | None = None,
          eval_dataset: Dataset | None = None, eval_contracts=None,
          callback: Callable[[dict], object] | None = None) -> TrainResult:
    """Run the training loop and return the selected actor with the per-episode log.

    Episodes replay (a subsample of) ``dataset``. After each episode the
    noise-free policy is replayed on the full training day, starting from
    its optimal offsets; ``train_ratio`` from that replay drives
    ``select="best"``. When ``eval_dataset`` is given the same policy is
    also replayed there and ``R``/``ratio`` in the log refer to it, so a
    held-out day is reported but never used for selection.
    A truthy return from ``callback(row)`` stops training after that episode.
    """
    config = config or MarliaConfig()
    contracts = as_contracts(contracts)
    m = len(contracts)
    ss = np.random.SeedSequence(config.seed).spawn(4)
    rng_init, rng_noise, rng_replay, rng_sample = (np.random.default_rng(s) for s in ss)
    actor, critic = make_nets(config, rng_init)
    opt_actor = make_optimizer(config.optimizer, config.actor_lr)
    opt_critic = make_optimizer(config.optimizer, config.critic_lr)
    memory = ReplayMemory(config.memory)

    full = solve_dual(dataset, contracts)
    alpha_start = full.alphas
    eval_cs = contracts if eval_contracts is None else as_contracts(eval_contracts)
    eval_star = None if eval_dataset is None else solve_dual(eval_dataset, eval_cs)

    def evaluate(net, episode, loss=0.0, wall_ms=0):
        pol = MarliaPolicy(net, alpha_start, config.action_bound)
        R = run_episode(dataset, contracts, pol).total
        row = dict(episode=episode, R=R, R_star=full.r_star, ratio=R / full.r_star,
                   train_ratio=R / full.r_star, critic_loss=loss, wall_ms=wall_ms)
        if eval_dataset is not None:
            R = run_episode(eval_dataset, eval_cs, pol).total
            row.update(R=R, R_star=eval_star.r_star, ratio=R / eval_star.r_star)
        return row

    log = [evaluate(actor, 0)]
    best = (actor.copy(), log[0]["train_ratio"], 0)
    if m == 0 or config.episodes == 0:
        return TrainResult(best[0], critic, full.r_star, best[1], 0, log)

    day, day_cs = _training_day(dataset, contracts, config.sample_fraction, rng_sample)
    day_sol = solve_dual(day, day_cs)
    scale = abs(day_sol.r_star - day_cs.prepaid) or 1.0
    p = day_cs.penalty
    bound = config.action_bound
    started = time.perf_counter()
    for ep in range(1, config.episodes + 1):
        t0 = time.perf_counter()
        if config.resample and ep > 1:
            day, day_cs = _training_day(dataset, contracts, config.sample_fraction, rng_sample)
            day_sol = solve_dual(day, day_cs)
            scale = abs(day_sol.r_star - day_cs.prepaid) or 1.0
        state = EpisodeState(day, day_cs)
        alpha = np.minimum(day_sol.alphas + rng_noise.normal(0.0, config.noise_sigma, m) * p, p)
        state.play_step(alpha)
        losses = []
        while not state.done:
            obs = build_observation(state)
            delta = actor(obs)[:, 0] + rng_noise.normal(0.0, config.noise_sigma, m)
            delta = np.clip(delta, -bound, bound)
            alpha = apply_action(state.alphas, delta, p, bound)
            if config.credit == "counterfactual":
                v = counterfactual_values(state, alpha, state.alphas) * (m / scale)
            else:
                v = rollout_value(state, alpha)
                if config.baseline:
                    v -= rollout_value(state, state.alphas)
                v /= scale
            state.play_step(alpha)
            memory.add(obs, delta, v)
            if len(memory) >= config.batch_size:
                for _ in range(config.updates_per_step):
                    bo, ba, bv = memory.sample(config.batch_size, rng_replay)
                    loss = critic_update(critic, opt_critic, bo, ba, bv, bound)
                    if not math.isfinite(loss) or not critic.finite():
                        raise TrainingDivergence(f"critic loss became {loss} in episode {ep}")
                    if ep > config.warmup_episodes:
                        actor_update(actor, critic, opt_actor, bo, bound)
                    if not actor.finite():
                        raise TrainingDivergence(f"actor weights became non-finite in episode {ep}")
                    losses.append(loss)
        row = evaluate(actor, ep, float(np.mean(losses)) if losses else 0.0,
                       int(round((time.perf_counter() - t0) * 1000)))
        log.append(row)
        if config.select == "last" or row["train_ratio"] > best[1]:
            best = (actor.copy(), row["train_ratio"], ep)
        if callback is not None and callback(row):
            break
        if config.time_limit is not None and time.perf_counter() - started > config.time_limit:
            break
    return TrainResult(best[0], critic, scale, best[1], best[2], log)


def config_dict(config: MarliaConfig) -> dict:
    d = asdict(config)
    d["hidden"] = list(d["hidden"])
    return {k: v for k, v in d.items() if v is not None}


__all__ = [
    "MarliaConfig", "MarliaPolicy", "ReplayMemory", "TrainResult", "TrainingDivergence",
    "actor_update", "apply_action", "build_observation", "critic_update", "load_checkpoint",
    "rollout_value", "save_checkpoint", "train", "write_log", "OBS_DIM",
]
