"""Impression allocation between guaranteed contracts and real-time bidding."""

from .market import (
    RTB,
    AllocationDecision,
    Contract,
    Contracts,
    Dataset,
    EpisodeState,
    Impression,
    MarketError,
    OutcomeReport,
    Policy,
    allocate,
    contract_bid,
    ic_probe,
    run_episode,
    step_reward,
)
from .dual import (
    DualConfig,
    DualSolution,
    PrimalSolution,
    brute_force_primal,
    dual_objective,
    solve_dual,
    solve_subproblem,
)

__version__ = "0.1.0"
