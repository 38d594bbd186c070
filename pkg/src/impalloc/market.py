"""Domain types, the contract bidding function and the allocation mechanism.

Contracts bid ``quality_weight * quality + alpha`` on every impression and
compete with the RTB second price. An impression goes to the highest
contract bid only when that bid strictly beats the second price; ties
between contracts go to the lowest index. Contracts are prepaid, so the
RTB winner is the only party that pays anything at allocation time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels

RTB = -1
DEFAULT_HORIZON = 96


class MarketError(ValueError):
    """Invalid market input (bad shapes, unsorted streams, broken invariants)."""


@dataclass(frozen=True)
class Contract:
    id: int
    demand: int
    unit_price: float
    penalty: float
    quality_weight: float

    def __post_init__(self):
        if self.demand < 0:
            raise MarketError(f"contract {self.id}: demand must be >= 0")
        if not self.penalty > 0:
            raise MarketError(f"contract {self.id}: penalty must be > 0")
        if self.quality_weight < 0 or self.unit_price < 0:
            raise MarketError(f"contract {self.id}: negative price or weight")


@dataclass(frozen=True)
class Impression:
    id: int
    step: int
    first_bid: float
    second_bid: float
    quality: tuple[float, ...]

    def __post_init__(self):
        if not (self.first_bid >= self.second_bid >= 0):
            raise MarketError(f"impression {self.id}: need b1 >= b2 >= 0")
        if any(not (0.0 <= x <= 1.0) for x in self.quality):
            raise MarketError(f"impression {self.id}: quality outside [0, 1]")


@dataclass(frozen=True)
class AllocationDecision:
    target: int
    payment: float

    @property
    def to_rtb(self) -> bool:
        return self.target == RTB


@dataclass(frozen=True)
class OutcomeReport:
    r_gc: float
    r_rtb: float
    q_gc: float
    total: float
    shortfalls: np.ndarray
    delivered: np.ndarray
    step_rewards: tuple[float, ...] = ()
    rtb_wins: int = 0


class Contracts:
    """Column view of a contract list, the form every solver consumes."""

    def __init__(self, contracts: Sequence[Contract]):
        self.items = tuple(contracts)
        self.ids = np.array([c.id for c in self.items], dtype=np.int64)
        self.demand = np.array([c.demand for c in self.items], dtype=np.int64)
        self.unit_price = np.array([c.unit_price for c in self.items], dtype=float)
        self.penalty = np.array([c.penalty for c in self.items], dtype=float)
        self.quality_weight = np.array([c.quality_weight for c in self.items], dtype=float)

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, j):
        return self.items[j]

    @property
    def prepaid(self) -> float:
        return float(np.dot(self.unit_price, self.demand))

    def with_demand(self, demand) -> "Contracts":
        demand = np.asarray(demand)
        return Contracts(
            [
                Contract(c.id, int(d), c.unit_price, c.penalty, c.quality_weight)
                for c, d in zip(self.items, demand)
            ]
        )


def as_contracts(contracts) -> Contracts:
    if isinstance(contracts, Contracts):
        return contracts
    return Contracts(list(contracts))


class Dataset:
    """One day of impressions stored column-wise and sorted by step."""

    def __init__(self, step, b1, b2, q, ids=None, horizon: int = DEFAULT_HORIZON):
        self.step = np.ascontiguousarray(step, dtype=np.int64)
        self.b1 = np.ascontiguousarray(b1, dtype=float)
        self.b2 = np.ascontiguousarray(b2, dtype=float)
        q = np.asarray(q, dtype=float)
        n = self.step.shape[0]
        if q.ndim == 1 and n == 0:
            q = q.reshape(0, 0)
        self.q = np.ascontiguousarray(q)
        self.ids = (
            np.arange(n, dtype=np.int64)
            if ids is None
            else np.ascontiguousarray(ids, dtype=np.int64)
        )
        self.horizon = int(horizon)
        self._validate()
        self.bounds = np.searchsorted(self.step, np.arange(1, self.horizon + 2))

    def _validate(self):
        n = self.step.shape[0]
        if self.b1.shape != (n,) or self.b2.shape != (n,) or self.ids.shape != (n,):
            raise MarketError("column lengths differ")
        if self.q.ndim != 2 or self.q.shape[0] != n:
            raise MarketError("quality matrix must be n x m")
        if n == 0:
            return
        if np.any(np.diff(self.step) < 0):
            raise MarketError("impressions are not sorted by step")
        if self.step[0] < 1 or self.step[-1] > self.horizon:
            raise MarketError(f"step outside [1, {self.horizon}]")
        if np.any(self.b2 < 0) or np.any(self.b1 < self.b2):
            raise MarketError("need b1 >= b2 >= 0 for every impression")
        if self.q.size and (self.q.min() < 0 or self.q.max() > 1):
            raise MarketError("quality outside [0, 1]")

    @classmethod
    def from_impressions(cls, impressions: Sequence[Impression], m: int | None = None,
                         horizon: int = DEFAULT_HORIZON) -> "Dataset":
        imps = list(impressions)
        if m is None:
            m = len(imps[0].quality) if imps else 0
        if any(len(im.quality) != m for im in imps):
            raise MarketError("quality vectors have different lengths")
        q = np.array([im.quality for im in imps], dtype=float).reshape(len(imps), m)
        return cls(
            [im.step for im in imps],
            [im.first_bid for im in imps],
            [im.second_bid for im in imps],
            q,
            ids=[im.id for im in imps],
            horizon=horizon,
        )

    def __len__(self):
        return self.step.shape[0]

    @property
    def n_contracts(self) -> int:
        return self.q.shape[1]

    def impression(self, i: int) -> Impression:
        return Impression(
            int(self.ids[i]), int(self.step[i]), float(self.b1[i]), float(self.b2[i]),
            tuple(float(x) for x in self.q[i]),
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self.impression(i)

    def block(self, t: int) -> slice:
        """Index range of the impressions arriving in step ``t`` (1-based)."""
        return slice(int(self.bounds[t - 1]), int(self.bounds[t]))

    def take(self, idx) -> "Dataset":
        idx = np.sort(np.asarray(idx, dtype=np.int64))
        return Dataset(self.step[idx], self.b1[idx], self.b2[idx], self.q[idx],
                       ids=self.ids[idx], horizon=self.horizon)

    def from_step(self, t: int) -> "Dataset":
        """Impressions arriving at step ``t`` or later."""
        return self.take(np.arange(self.bounds[t - 1], len(self)))

    def subsample(self, fraction: float, rng: np.random.Generator) -> "Dataset":
        n = len(self)
        k = int(round(fraction * n))
        return self.take(rng.choice(n, size=k, replace=False))

    def volume_curve(self) -> np.ndarray:
        """Cumulative fraction of the day's volume that has arrived by the end of each step."""
        counts = np.diff(self.bounds)
        total = max(int(counts.sum()), 1)
        return np.cumsum(counts) / total

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.horizon == other.horizon
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.step, other.step)
            and np.array_equal(self.b1, other.b1)
            and np.array_equal(self.b2, other.b2)
            and np.array_equal(self.q, other.q)
        )


def contract_bid(contract: Contract, quality: float, alpha: float) -> float:
    return contract.quality_weight * quality + alpha


def allocate(impression: Impression, contracts, alphas) -> AllocationDecision:
    """Run the contract-vs-RTB auction for a single impression."""
    contracts = as_contracts(contracts)
    alphas = np.asarray(alphas, dtype=float)
    if alphas.shape != (len(contracts),) or len(impression.quality) != len(contracts):
        raise MarketError(
            f"dimension mismatch: {len(contracts)} contracts, {alphas.size} offsets, "
            f"{len(impression.quality)} quality scores"
        )
    best = -np.inf
    k = RTB
    for j, c in enumerate(contracts):
        bid = contract_bid(c, impression.quality[j], alphas[j])
        if bid > best:
            best = bid
            k = j
    if k != RTB and best > impression.second_bid:
        return AllocationDecision(k, 0.0)
    return AllocationDecision(RTB, impression.second_bid)


def ic_probe(impression: Impression, contracts, alphas, probe_bid: float) -> tuple[bool, float]:
    """Replace the top RTB bid with ``probe_bid`` and report (won, payment).

    The remaining RTB competition is the original second bid. Contract bids
    only decide whether RTB gets the impression at all; they never set the
    RTB price.
    """
    other = impression.second_bid
    if probe_bid > other:
        b1, b2 = probe_bid, other
    else:
        b1, b2 = other, probe_bid
    probed = Impression(impression.id, impression.step, b1, b2, impression.quality)
    decision = allocate(probed, contracts, alphas)
    won = decision.to_rtb and probe_bid > other
    return won, (decision.payment if won else 0.0)


def step_reward(decisions: Sequence[AllocationDecision], impressions: Sequence[Impression],
                contracts, is_terminal: bool = False, shortfalls=None) -> float:
    """Outcome earned by one step's allocations (prepaid revenue excluded)."""
    contracts = as_contracts(contracts)
    r = 0.0
    for dec, imp in zip(decisions, impressions):
        if dec.to_rtb:
            r += imp.second_bid
        else:
            r += contracts.quality_weight[dec.target] * imp.quality[dec.target]
    if is_terminal:
        if shortfalls is None:
            raise MarketError("terminal reward needs shortfalls")
        r -= float(np.dot(contracts.penalty, np.asarray(shortfalls, dtype=float)))
    return r


class EpisodeState:
    """Mutable replay state for one day. ``clone`` gives an independent copy."""

    def __init__(self, dataset: Dataset, contracts: Contracts, alphas=None):
        m = len(contracts)
        if dataset.n_contracts != m and len(dataset) > 0:
            raise MarketError(
                f"dataset has {dataset.n_contracts} quality columns for {m} contracts"
            )
        self.dataset = dataset
        self.contracts = contracts
        self.t = 1
        self.delivered = np.zeros(m, dtype=np.int64)
        self.last_wins = np.zeros(m, dtype=np.int64)
        self.alphas = np.zeros(m) if alphas is None else np.array(alphas, dtype=float)
        self.rtb_revenue = 0.0
        self.quality_value = 0.0
        self.rtb_wins = 0
        self.seen = 0
        self.rewards: list[float] = []

    @property
    def horizon(self) -> int:
        return self.dataset.horizon

    @property
    def done(self) -> bool:
        return self.t > self.horizon

    def clone(self) -> "EpisodeState":
        other = EpisodeState.__new__(EpisodeState)
        other.__dict__.update(self.__dict__)
        other.delivered = self.delivered.copy()
        other.last_wins = self.last_wins.copy()
        other.alphas = self.alphas.copy()
        other.rewards = list(self.rewards)
        return other

    def shortfalls(self, delivered=None) -> np.ndarray:
        e = self.delivered if delivered is None else delivered
        return np.maximum(self.contracts.demand - e, 0)

    def current_block(self) -> slice:
        return self.dataset.block(self.t)

    def record_step(self, winners: np.ndarray, quality_value: float, rtb_revenue: float) -> float:
        """Apply one step's allocation outcome and return its reward."""
        m = len(self.contracts)
        wins = np.bincount(winners[winners >= 0], minlength=m) if m else self.last_wins
        self.delivered += wins
        self.last_wins = wins
        n_rtb = int(np.count_nonzero(winners < 0))
        self.rtb_wins += n_rtb
        self.seen += winners.shape[0]
        self.rtb_revenue += rtb_revenue
        self.quality_value += quality_value
        r = rtb_revenue + quality_value
        if self.t == self.horizon:
            r -= float(np.dot(self.contracts.penalty, self.shortfalls()))
        self.rewards.append(r)
        self.t += 1
        return r

    def play_step(self, alphas=None) -> float:
        """Allocate the current step with constant offsets."""
        if alphas is not None:
            self.alphas = np.asarray(alphas, dtype=float)
        sl = self.current_block()
        ds = self.dataset
        winners, _, qval, rtb, _ = kernels.auction_pass(
            ds.q[sl], self.contracts.quality_weight, self.alphas, ds.b2[sl]
        )
        return self.record_step(winners, qval, rtb)

    def report(self) -> OutcomeReport:
        y = self.shortfalls()
        r_gc = self.contracts.prepaid - float(np.dot(self.contracts.penalty, y))
        total = r_gc + self.rtb_revenue + self.quality_value
        return OutcomeReport(
            r_gc=r_gc, r_rtb=self.rtb_revenue, q_gc=self.quality_value, total=total,
            shortfalls=y, delivered=self.delivered.copy(),
            step_rewards=tuple(self.rewards), rtb_wins=self.rtb_wins,
        )


class Policy:
    """Per-step controller interface consumed by :func:`run_episode`.

    ``start`` returns the offsets for step 1; ``next_alphas`` is called at
    every later step boundary. Policies that override the auction itself
    (MSVV) reimplement ``allocate``.
    """

    name = "policy"

    def start(self, state: EpisodeState) -> np.ndarray:
        raise NotImplementedError

    def next_alphas(self, state: EpisodeState) -> np.ndarray:
        return state.alphas

    def allocate(self, state: EpisodeState) -> float:
        return state.play_step()


class ConstantPolicy(Policy):
    name = "constant"

    def __init__(self, alphas):
        self._alphas = np.asarray(alphas, dtype=float)

    def start(self, state):
        return self._alphas.copy()


def run_episode(dataset: Dataset, contracts, policy: Policy) -> OutcomeReport:
    """Replay one day under ``policy``; the policy hook fires at every step."""
    contracts = as_contracts(contracts)
    state = EpisodeState(dataset, contracts)
    state.alphas = np.asarray(policy.start(state), dtype=float)
    if state.alphas.shape != (len(contracts),):
        raise MarketError("policy returned offsets of the wrong length")
    while not state.done:
        if state.t > 1:
            state.alphas = np.asarray(policy.next_alphas(state), dtype=float)
        policy.allocate(state)
    return state.report()


def replay_constant(dataset: Dataset, contracts, alphas) -> OutcomeReport:
    return run_episode(dataset, contracts, ConstantPolicy(alphas))
