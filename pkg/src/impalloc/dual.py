"""Outcome-maximization LP, its reduced dual, and exact/approximate solvers.

The dual is reduced analytically: for offsets ``alpha`` each impression's
shadow price is ``max(0, max_j(lam_j q_ij + alpha_j - b_i2))``, leaving a
piecewise-linear convex function of ``m`` variables on the box
``alpha_min <= alpha <= penalty``.

``solve_dual`` has two routes. ``"exact"`` solves the primal as a
capacitated assignment problem (successive shortest paths) and then picks
the offsets at the max-margin point of the optimal dual region, so a
constant-offset replay reproduces the optimal allocation without touching
a tie. ``"subgradient"`` runs projected subgradient descent with a
duality-gap stopping rule.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .market import RTB, Contracts, Dataset, MarketError, as_contracts


class SolverError(RuntimeError):
    pass


class InstanceTooLarge(ValueError):
    pass


@dataclass
class DualSolution:
    alphas: np.ndarray
    r_star: float
    dual_objective: float
    iters: int = 0
    betas: np.ndarray | None = None
    method: str = "exact"
    converged: bool = True
    general_position: bool = True
    margin: float = 0.0
    primal_value: float | None = None

    def to_json(self) -> str:
        doc = {
            "alphas": [float(a) for a in self.alphas],
            "r_star": self.r_star,
            "dual_objective": self.dual_objective,
            "iters": self.iters,
            "method": self.method,
            "converged": self.converged,
            "general_position": self.general_position,
            "margin": self.margin,
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "DualSolution":
        doc = json.loads(text)
        return cls(
            alphas=np.asarray(doc["alphas"], dtype=float),
            r_star=float(doc["r_star"]),
            dual_objective=float(doc["dual_objective"]),
            iters=int(doc.get("iters", 0)),
            method=doc.get("method", "exact"),
            converged=bool(doc.get("converged", True)),
            general_position=bool(doc.get("general_position", True)),
            margin=float(doc.get("margin", 0.0)),
        )


@dataclass
class PrimalSolution:
    assignment: np.ndarray
    shortfalls: np.ndarray
    objective: float

    @property
    def delivered(self) -> np.ndarray:
        m = self.shortfalls.shape[0]
        a = self.assignment
        return np.bincount(a[a >= 0], minlength=m)


@dataclass
class DualConfig:
    method: str = "exact"
    tol: float = 1e-6
    max_iters: int = 5000
    step_scale: float | None = None
    extra: dict = field(default_factory=dict)


def alpha_lower_bound(dataset: Dataset, contracts: Contracts) -> np.ndarray:
    """Offsets below this never win an impression, so clipping to it is lossless."""
    m = len(contracts)
    if len(dataset) == 0:
        return np.zeros(m)
    top = -float(dataset.b2.max())
    gap = (dataset.b2[:, None] - dataset.q * contracts.quality_weight).min(axis=0)
    return np.minimum(top, gap)


def _check_box(alphas, contracts):
    alphas = np.asarray(alphas, dtype=float)
    if alphas.shape != (len(contracts),):
        raise MarketError("offset vector has the wrong length")
    bad = np.flatnonzero(alphas > contracts.penalty)
    if bad.size:
        j = int(bad[0])
        raise MarketError(f"alpha[{j}] = {alphas[j]} exceeds penalty {contracts.penalty[j]}")
    return alphas


def dual_objective(alphas, dataset: Dataset, contracts) -> float:
    """sum_i beta_i - sum_j alpha_j d_j with beta eliminated."""
    contracts = as_contracts(contracts)
    alphas = _check_box(alphas, contracts)
    if len(contracts) == 0:
        return 0.0
    _, _, _, _, hinge = kernels.auction_pass(dataset.q, contracts.quality_weight, alphas, dataset.b2)
    return hinge - float(np.dot(alphas, contracts.demand))


def shadow_prices(alphas, dataset: Dataset, contracts) -> np.ndarray:
    contracts = as_contracts(contracts)
    if len(contracts) == 0:
        return np.zeros(len(dataset))
    bids = dataset.q * contracts.quality_weight + alphas
    return np.maximum(0.0, bids.max(axis=1) - dataset.b2)


def constants(dataset: Dataset, contracts: Contracts) -> float:
    """RTB-everything revenue plus prepaid contract revenue."""
    return float(dataset.b2.sum()) + contracts.prepaid


def primal_value(assignment, dataset: Dataset, contracts) -> tuple[float, np.ndarray]:
    """LP1 objective of an integral allocation; returns (value, shortfalls)."""
    contracts = as_contracts(contracts)
    m = len(contracts)
    a = np.asarray(assignment, dtype=np.int64)
    won = a >= 0
    delivered = np.bincount(a[won], minlength=m) if m else np.zeros(0, dtype=np.int64)
    y = np.maximum(contracts.demand - delivered, 0)
    rtb = float(dataset.b2[~won].sum())
    qual = float((dataset.q[won, a[won]] * contracts.quality_weight[a[won]]).sum()) if m else 0.0
    value = contracts.prepaid - float(np.dot(contracts.penalty, y)) + rtb + qual
    return value, y


def brute_force_primal(dataset: Dataset, contracts) -> PrimalSolution:
    """Enumerate every integral allocation of a tiny instance."""
    contracts = as_contracts(contracts)
    n, m = len(dataset), len(contracts)
    if n > 10 or m > 3:
        raise InstanceTooLarge(f"brute force needs n <= 10 and m <= 3, got n={n}, m={m}")
    best_val = -math.inf
    best = None
    for combo in itertools.product(range(-1, m), repeat=n):
        a = np.array(combo, dtype=np.int64)
        if m:
            counts = np.bincount(a[a >= 0], minlength=m)
            if np.any(counts > contracts.demand):
                continue
        val, y = primal_value(a, dataset, contracts)
        if val > best_val:
            best_val, best = val, (a, y)
    return PrimalSolution(best[0], best[1], best_val)


def solve_primal(dataset: Dataset, contracts) -> PrimalSolution:
    """Exact LP1 optimum via the capacitated assignment kernel."""
    contracts = as_contracts(contracts)
    m = len(contracts)
    if m == 0 or len(dataset) == 0:
        a = np.full(len(dataset), RTB, dtype=np.int64)
    else:
        gain = dataset.q * contracts.quality_weight - dataset.b2[:, None] + contracts.penalty
        a = kernels.transport_ssp(gain, contracts.demand)
    value, y = primal_value(a, dataset, contracts)
    return PrimalSolution(a, y, value)


DIRECT_LIMIT = 6000
SAMPLE_STRIDE = 10
FIT_PASSES = 50
FIT_SLACK = 0.005


def _fit_capacity(dataset: Dataset, contracts: Contracts, alphas) -> np.ndarray | None:
    """Lower offsets of over-full contracts until the rule allocation fits every demand."""
    alphas = np.minimum(np.asarray(alphas, dtype=float), contracts.penalty)
    w = dataset.q * contracts.quality_weight - dataset.b2[:, None]
    m = len(contracts)
    for sweep in range(FIT_PASSES):
        s = w + alphas
        k = np.argmax(s, axis=1)
        best = s[np.arange(len(dataset)), k]
        win = best > 0
        counts = np.bincount(k[win], minlength=m)
        over = np.flatnonzero(counts > contracts.demand)
        if over.size == 0:
            return alphas
        for j in over:
            rows = np.flatnonzero(win & (k == j))
            rest = np.delete(s[rows], j, axis=1)
            rival = np.maximum(rest.max(axis=1), 0.0) if rest.shape[1] else np.zeros(rows.size)
            excess = np.sort(s[rows, j] - rival)[::-1]
            # aim a little under the demand so displaced wins do not refill it
            d = int(contracts.demand[j] * (1.0 - FIT_SLACK * min(sweep, 10)))
            keep = excess[d - 1] if d > 0 else excess[0] + 1.0
            cut = 0.5 * (keep + excess[d])
            alphas[j] -= cut
    return None


def _solve_exact(dataset: Dataset, contracts: Contracts):
    """Optimal allocation plus certified max-margin offsets.

    Small days go straight to the assignment kernel. Larger days first
    estimate the offsets on a strided subsample, nudge them until the
    allocation they induce fits within every demand, and use them as
    starting prices for the kernel so only the leftover units are routed.
    """
    n = len(dataset)
    primal = None
    if n > DIRECT_LIMIT:
        idx = np.arange(0, n, SAMPLE_STRIDE)
        sample = dataset.take(idx)
        scaled = np.floor(contracts.demand * idx.size / n + 0.5).astype(np.int64)
        est = solve_dual(sample, contracts.with_demand(scaled)).alphas
        est = _fit_capacity(dataset, contracts, est)
        if est is not None:
            gain = dataset.q * contracts.quality_weight - dataset.b2[:, None] + contracts.penalty
            a = kernels.transport_ssp(gain, contracts.demand, np.maximum(contracts.penalty - est, 0.0))
            value, y = primal_value(a, dataset, contracts)
            primal = PrimalSolution(a, y, value)
    if primal is None:
        primal = solve_primal(dataset, contracts)
    alphas, margin = center_alphas(primal.assignment, dataset, contracts)
    return primal, alphas, margin


def _min_mean_cycle(weights: np.ndarray) -> float:
    """Karp's minimum cycle mean on a dense graph (inf = no edge)."""
    v = weights.shape[0]
    d = np.full((v + 1, v), math.inf)
    d[0, :] = 0.0
    for k in range(1, v + 1):
        d[k] = (d[k - 1][:, None] + weights).min(axis=0)
    best = math.inf
    finite = np.isfinite(d[v])
    if not finite.any():
        return math.inf
    with np.errstate(invalid="ignore"):
        ks = np.arange(v)[:, None]
        ratios = (d[v][None, :] - d[:v]) / (v - ks)
        ratios = np.where(np.isfinite(d[:v]), ratios, -math.inf)
    per_node = ratios.max(axis=0)
    per_node = per_node[finite]
    if per_node.size:
        best = float(per_node.min())
    return best


def _bellman_ford(weights: np.ndarray, source: int) -> np.ndarray:
    v = weights.shape[0]
    dist = np.full(v, math.inf)
    dist[source] = 0.0
    for _ in range(v):
        new = np.minimum(dist, (dist[:, None] + weights).min(axis=0))
        if np.array_equal(new, dist):
            break
        dist = new
    return dist


def center_alphas(assignment, dataset: Dataset, contracts) -> tuple[np.ndarray, float]:
    """Max-margin offsets in the dual region certified by an optimal allocation.

    Every complementary-slackness condition of the allocation is a
    difference constraint on the offsets; the largest uniform slack those
    constraints admit is a minimum cycle mean, and shortest-path distances
    at that slack give a point meeting every constraint strictly. Returns
    ``(alphas, margin)``; a margin of zero means the instance is degenerate.
    """
    contracts = as_contracts(contracts)
    m = len(contracts)
    a = np.asarray(assignment, dtype=np.int64)
    if m == 0:
        return np.zeros(0), math.inf
    w = dataset.q * contracts.quality_weight - dataset.b2[:, None]
    p = contracts.penalty
    delivered = np.bincount(a[a >= 0], minlength=m)
    pinned = delivered < contracts.demand
    free = ~pinned
    lo = alpha_lower_bound(dataset, contracts)

    # node m is the zero reference; edge u->v with weight c encodes x_v <= x_u + c
    inf = math.inf
    upper = np.where(free, p, inf)
    lower = np.where(free, -lo, inf)  # x_z - x_j <= -lo_j
    pair = np.full((m, m), inf)
    for j in range(m):
        rows = a == j
        if not rows.any():
            continue
        wj = w[rows]
        own = wj[:, j]
        # j must beat RTB: alpha_j >= -w_ij
        lower[j] = min(lower[j], float(own.min()))
        for k in range(m):
            if k != j:
                # alpha_k <= alpha_j + (w_ij - w_ik)
                pair[j, k] = float((own - wj[:, k]).min())
    unassigned = a < 0
    if unassigned.any():
        upper = np.minimum(upper, (-w[unassigned]).min(axis=0))
    # substitute pinned offsets (alpha = p) as constants
    for j in np.flatnonzero(pinned):
        for k in np.flatnonzero(free):
            if np.isfinite(pair[j, k]):
                upper[k] = min(upper[k], p[j] + pair[j, k])
            if np.isfinite(pair[k, j]):
                lower[k] = min(lower[k], pair[k, j] - p[j])
    fi = np.flatnonzero(free)
    nf = fi.size
    alphas = p.astype(float).copy()
    if nf == 0:
        return alphas, _pinned_margin(w, a, p, pinned)
    g = np.full((nf + 1, nf + 1), inf)
    g[:nf, :nf] = pair[np.ix_(fi, fi)]
    np.fill_diagonal(g, inf)
    g[nf, :nf] = upper[fi]
    g[:nf, nf] = lower[fi]
    margin = _min_mean_cycle(g)
    if not math.isfinite(margin):
        raise SolverError("offset constraints are unbounded")
    use = margin * (1 - 1e-9) if margin > 0 else margin
    dist = _bellman_ford(np.where(np.isfinite(g), g - use, inf), nf)
    alphas[fi] = dist[:nf]
    margin = min(margin, _pinned_margin(w, a, p, pinned))
    return alphas, margin


def _pinned_margin(w, a, p, pinned) -> float:
    """Slack left between pinned contracts, whose offsets are fixed at the penalty."""
    idx = np.flatnonzero(pinned)
    best = math.inf
    for j in idx:
        rows = a == j
        if not rows.any():
            continue
        own = w[rows, j] + p[j]
        best = min(best, float(own.min()))
        for k in idx:
            if k != j:
                best = min(best, float((own - w[rows, k] - p[k]).min()))
    unassigned = a < 0
    if unassigned.any() and idx.size:
        best = min(best, float((-(w[np.ix_(unassigned, idx)] + p[idx])).min()))
    return best


def _repair(winners: np.ndarray, dataset: Dataset, contracts: Contracts, alphas) -> np.ndarray:
    """Drop each over-delivered contract's lowest-margin wins to get a feasible allocation."""
    a = winners.copy()
    m = len(contracts)
    counts = np.bincount(a[a >= 0], minlength=m)
    for j in np.flatnonzero(counts > contracts.demand):
        rows = np.flatnonzero(a == j)
        margin = dataset.q[rows, j] * contracts.quality_weight[j] - dataset.b2[rows]
        drop = rows[np.argsort(margin, kind="stable")[: counts[j] - contracts.demand[j]]]
        a[drop] = RTB
    return a


def _subgradient(dataset: Dataset, contracts: Contracts, config: DualConfig):
    lo = alpha_lower_bound(dataset, contracts)
    hi = contracts.penalty
    d = contracts.demand
    alpha = np.clip(np.zeros(len(contracts)), lo, hi)
    scale = config.step_scale
    if scale is None:
        scale = 0.25 * float(np.max(hi - lo))
    best_val = math.inf
    best_alpha = alpha.copy()
    best_primal = -math.inf
    best_assign = None
    history = []
    k = 0
    converged = False
    for k in range(1, config.max_iters + 1):
        winners, counts, _, _, hinge = kernels.auction_pass(
            dataset.q, contracts.quality_weight, alpha, dataset.b2
        )
        val = hinge - float(np.dot(alpha, d))
        if val < best_val:
            best_val, best_alpha = val, alpha.copy()
        assign = _repair(winners, dataset, contracts, alpha)
        pv, _ = primal_value(assign, dataset, contracts)
        if pv > best_primal:
            best_primal, best_assign = pv, assign
        history.append(best_val)
        upper = best_val + constants(dataset, contracts)
        if upper - best_primal <= config.tol * max(abs(upper), 1.0):
            converged = True
            break
        grad = (counts - d).astype(float)
        grad[(alpha >= hi) & (grad < 0)] = 0.0
        norm = float(np.linalg.norm(grad))
        if norm == 0.0:
            converged = True
            break
        alpha = np.clip(alpha - scale / math.sqrt(k) * grad / norm, lo, hi)
    return best_alpha, best_val, best_assign, best_primal, k, converged, history


def solve_dual(dataset: Dataset, contracts, config: DualConfig | None = None) -> DualSolution:
    """Optimal offsets, shadow prices and optimal outcome of a day."""
    contracts = as_contracts(contracts)
    config = config or DualConfig()
    m = len(contracts)
    const = constants(dataset, contracts)
    if m == 0:
        return DualSolution(np.zeros(0), const, 0.0, betas=np.zeros(len(dataset)),
                            method=config.method, primal_value=const, margin=math.inf)
    if len(dataset) > 0 and dataset.n_contracts != m:
        raise MarketError(f"dataset has {dataset.n_contracts} quality columns for {m} contracts")
    if config.method == "exact":
        primal, alphas, margin = _solve_exact(dataset, contracts)
        alphas = np.minimum(alphas, contracts.penalty)
        g = dual_objective(alphas, dataset, contracts)
        return DualSolution(
            alphas=alphas, r_star=const + g, dual_objective=g, iters=0,
            betas=shadow_prices(alphas, dataset, contracts), method="exact",
            converged=True, general_position=margin > 0, margin=float(margin),
            primal_value=primal.objective,
        )
    if config.method == "subgradient":
        alpha, g, assign, pv, iters, converged, _ = _subgradient(dataset, contracts, config)
        margin = 0.0
        if converged and assign is not None:
            centered, margin = center_alphas(assign, dataset, contracts)
            if margin > 0:
                alpha = np.minimum(centered, contracts.penalty)
                g = dual_objective(alpha, dataset, contracts)
        return DualSolution(
            alphas=alpha, r_star=const + g, dual_objective=g, iters=iters,
            betas=shadow_prices(alpha, dataset, contracts), method="subgradient",
            converged=converged, general_position=margin > 0, margin=float(margin),
            primal_value=pv,
        )
    raise ValueError(f"unknown dual method {config.method!r}")


def subgradient_trace(dataset: Dataset, contracts, config: DualConfig | None = None):
    """Best-so-far dual objective per iteration, plus every iterate (for tests)."""
    contracts = as_contracts(contracts)
    config = config or DualConfig(method="subgradient")
    return _subgradient(dataset, contracts, config)


def solve_subproblem(remaining: Dataset, contracts, delivered, config: DualConfig | None = None) -> DualSolution:
    """Re-solve the day from a mid-episode state with residual demands."""
    contracts = as_contracts(contracts)
    residual = np.maximum(contracts.demand - np.asarray(delivered, dtype=np.int64), 0)
    return solve_dual(remaining, contracts.with_demand(residual), config)
