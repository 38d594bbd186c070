"""Comparison controllers: fixed offsets, MSVV and PID pacing."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .market import Contracts, Dataset, EpisodeState, Policy

RTB_SCALE = 1.0 - math.exp(-1.0)


class FixedPolicy(Policy):
    """Bid with the training-day optimum at every step."""

    name = "fp"

    def __init__(self, alpha_star):
        self.alpha_star = np.asarray(alpha_star, dtype=float)

    def start(self, state):
        return self.alpha_star.copy()


def fp_policy(alpha_star) -> FixedPolicy:
    return FixedPolicy(alpha_star)


def spent_fraction(delivered, demand) -> np.ndarray:
    demand = np.asarray(demand, dtype=float)
    out = np.ones_like(demand)
    pos = demand > 0
    out[pos] = np.minimum(1.0, np.asarray(delivered, dtype=float)[pos] / demand[pos])
    return out


def msvv_bid(penalty: float, quality_value: float, x: float) -> float:
    """Discounted contract bid; reaches zero once the demand is met."""
    return (penalty + quality_value) * (1.0 - math.exp(x - 1.0))


def msvv_rtb_scale(b2: float) -> float:
    return b2 * RTB_SCALE


class MsvvPolicy(Policy):
    """Per-impression MSVV allocation; ties with the scaled RTB bid go to RTB."""

    name = "msvv"

    def __init__(self, contracts: Contracts):
        self.contracts = contracts

    def start(self, state):
        return np.zeros(len(self.contracts))

    def allocate(self, state: EpisodeState) -> float:
        sl = state.current_block()
        ds = state.dataset
        cs = self.contracts
        delivered = state.delivered.copy()
        winners, qval, rtb = kernels.msvv_pass(
            ds.q[sl], cs.quality_weight, cs.penalty, ds.b2[sl],
            cs.demand.astype(float), delivered,
        )
        return state.record_step(winners, qval, rtb)


def volume_target(dataset: Dataset) -> np.ndarray:
    """Cumulative share of the day's volume seen by the end of each step (index t-1)."""
    return dataset.volume_curve()


@dataclass
class PidGains:
    kp: float = 0.5
    ki: float = 0.05
    kd: float = 0.1

    def __post_init__(self):
        if min(self.kp, self.ki, self.kd) < 0:
            raise ValueError("PID gains must be >= 0")


class PidPolicy(Policy):
    """Additive PID on each offset, tracking a cumulative delivery target.

    ``target[t-1]`` is the fraction of demand that should be delivered by
    the end of step ``t``.
    """

    name = "pid"

    def __init__(self, contracts: Contracts, alpha_star, target, gains: PidGains | None = None):
        self.contracts = contracts
        self.alpha_star = np.asarray(alpha_star, dtype=float)
        self.target = np.asarray(target, dtype=float)
        self.gains = gains or PidGains()
        self.reset()

    def reset(self):
        m = len(self.contracts)
        self.integral = np.zeros(m)
        self.prev = np.zeros(m)

    def start(self, state):
        self.reset()
        return self.alpha_star.copy()

    def control(self, alphas, error) -> np.ndarray:
        g = self.gains
        self.integral += error
        signal = g.kp * error + g.ki * self.integral + g.kd * (error - self.prev)
        self.prev = error.copy()
        p = self.contracts.penalty
        return np.minimum(alphas + signal * p, p)

    def next_alphas(self, state: EpisodeState):
        done_steps = state.t - 1
        goal = self.target[done_steps - 1] if done_steps >= 1 else 0.0
        x = spent_fraction(state.delivered, self.contracts.demand)
        error = np.where(self.contracts.demand > 0, goal - x, 0.0)
        return self.control(state.alphas, error)


def pid_policy(contracts, alpha_star, target, gains=None) -> PidPolicy:
    return PidPolicy(contracts, alpha_star, target, gains)


def tune_pid(dataset: Dataset, contracts: Contracts, alpha_star, target, r_star: float,
             grid=None) -> tuple[PidGains, float]:
    """Grid-search PID gains on a replay day; returns the best gains and ratio."""
    from .market import run_episode

    if grid is None:
        grid = [PidGains(kp, ki, kd)
                for kp in (0.1, 0.25, 0.5, 1.0)
                for ki in (0.0, 0.01, 0.05)
                for kd in (0.0, 0.1)]
    best, best_ratio = None, -math.inf
    for g in grid:
        r = run_episode(dataset, contracts, PidPolicy(contracts, alpha_star, target, g))
        ratio = r.total / r_star
        if ratio > best_ratio:
            best, best_ratio = g, ratio
    return best, best_ratio
