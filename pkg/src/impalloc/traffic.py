"""Synthetic day generation and the JSONL dataset format.

A day is drawn in three passes: arrival steps from a diurnal curve, then
the top two of ``n_bidders`` log-normal RTB bids per impression, then one
beta-distributed quality score per (impression, contract). Train/test
pairs share their contracts and differ only through the volume and price
drift multipliers applied to the test day.
"""

from __future__ import annotations

import json
import math
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from typing import Iterator

import numpy as np

from .market import DEFAULT_HORIZON, Contract, Contracts, Dataset, Impression, MarketError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class DataError(MarketError):
    """Malformed dataset file or configuration."""


def diurnal_curve(horizon: int = DEFAULT_HORIZON, amplitude: float = 0.45,
                  peak: float = 0.85) -> np.ndarray:
    """Smooth one-day traffic profile: low at night, peaking in the evening."""
    phase = (np.arange(horizon) + 0.5) / horizon
    w = 1.0 + amplitude * np.cos(2 * math.pi * (phase - peak))
    return w / w.sum()


@dataclass
class TrafficConfig:
    n_impressions: int = 10_000
    m_contracts: int = 10
    demand_ratio: float = 0.39
    horizon: int = DEFAULT_HORIZON
    n_bidders: int = 4
    price_loc: float = 0.0
    price_scale: float = 0.5
    quality_a: float = 2.0
    quality_b: float = 6.0
    penalty_range: tuple[float, float] = (1.0, 3.0)
    quality_weight_range: tuple[float, float] = (0.5, 2.5)
    unit_price_range: tuple[float, float] = (0.2, 0.6)
    targeting: float = 0.0
    diurnal: tuple[float, ...] | None = None
    volume_multiplier: float = 1.0
    price_multiplier: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.penalty_range = tuple(self.penalty_range)
        self.quality_weight_range = tuple(self.quality_weight_range)
        self.unit_price_range = tuple(self.unit_price_range)
        if self.diurnal is not None:
            self.diurnal = tuple(float(x) for x in self.diurnal)
        self.validate()

    def validate(self):
        def bad(msg):
            raise DataError(f"traffic config: {msg}")

        if self.n_impressions <= 0:
            bad("n_impressions must be > 0")
        if self.m_contracts < 0:
            bad("m_contracts must be >= 0")
        if not 0 < self.demand_ratio < 1:
            bad("demand_ratio must lie in (0, 1)")
        if self.horizon <= 0:
            bad("horizon must be > 0")
        if self.n_bidders < 2:
            bad("need at least two RTB bidders for a second price")
        if self.price_scale <= 0:
            bad("price_scale must be > 0")
        if self.quality_a <= 0 or self.quality_b <= 0:
            bad("quality shape parameters must be > 0")
        if not 0 <= self.targeting <= 1:
            bad("targeting must lie in [0, 1]")
        if self.volume_multiplier <= 0 or self.price_multiplier <= 0:
            bad("drift multipliers must be > 0")
        for name in ("penalty_range", "quality_weight_range", "unit_price_range"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                bad(f"{name} must satisfy 0 <= low <= high")
        if self.penalty_range[0] <= 0:
            bad("penalties must be > 0")
        if self.diurnal is not None:
            w = np.asarray(self.diurnal)
            if w.shape != (self.horizon,) or np.any(w < 0) or w.sum() <= 0:
                bad(f"diurnal needs {self.horizon} non-negative weights")

    def curve(self) -> np.ndarray:
        if self.diurnal is None:
            return diurnal_curve(self.horizon)
        w = np.asarray(self.diurnal, dtype=float)
        return w / w.sum()

    @classmethod
    def from_mapping(cls, data: dict) -> "TrafficConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise DataError(f"traffic config: unknown keys {sorted(unknown)}")
        return cls(**data)


def load_config(path) -> dict:
    """Parse a TOML config file into a plain dict of sections."""
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise DataError(f"{path}: {exc}") from None


def _split(total: int, weights: np.ndarray) -> np.ndarray:
    """Integer parts of ``total * weights`` that add up to ``total`` (largest remainder)."""
    raw = total * weights / weights.sum()
    base = np.floor(raw).astype(np.int64)
    rest = total - int(base.sum())
    if rest > 0:
        order = np.argsort(-(raw - base), kind="stable")
        base[order[:rest]] += 1
    return base


def _streams(seed: int, names=("contracts", "train", "test")) -> dict:
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, children)}


def generate_contracts(config: TrafficConfig, rng: np.random.Generator) -> Contracts:
    m = config.m_contracts
    if m == 0:
        return Contracts([])
    total = int(round(config.demand_ratio * config.n_impressions))
    share = _split(total, rng.dirichlet(np.full(m, 2.0)))
    penalty = rng.uniform(*config.penalty_range, size=m)
    weight = rng.uniform(*config.quality_weight_range, size=m)
    price = rng.uniform(*config.unit_price_range, size=m)
    return Contracts(
        [Contract(j, int(share[j]), float(price[j]), float(penalty[j]), float(weight[j]))
         for j in range(m)]
    )


def generate_impressions(config: TrafficConfig, m: int, rng: np.random.Generator) -> Dataset:
    """One day of traffic with the config's drift multipliers applied."""
    n = int(round(config.n_impressions * config.volume_multiplier))
    per_step = rng.multinomial(n, config.curve())
    step = np.repeat(np.arange(1, config.horizon + 1), per_step)
    draws = rng.lognormal(config.price_loc, config.price_scale, size=(n, config.n_bidders))
    top = -np.partition(-draws, 1, axis=1)[:, :2]
    b1 = top[:, 0] * config.price_multiplier
    b2 = top[:, 1] * config.price_multiplier
    q = rng.beta(config.quality_a, config.quality_b, size=(n, m))
    if config.targeting > 0 and m > 0:
        # each impression belongs to one audience segment whose contract
        # sees boosted quality
        seg = rng.integers(0, m, size=n)
        hit = rng.random(n) < config.targeting
        boost = rng.beta(config.quality_b, config.quality_a, size=n)
        rows = np.flatnonzero(hit)
        q[rows, seg[rows]] = boost[rows]
    return Dataset(step, b1, b2, q, horizon=config.horizon)


def generate_day(config: TrafficConfig) -> tuple[Dataset, Contracts]:
    rng = _streams(config.seed)
    contracts = generate_contracts(config, rng["contracts"])
    return generate_impressions(config, len(contracts), rng["train"]), contracts


def generate_pair(config: TrafficConfig, volume_multiplier: float,
                  price_multiplier: float) -> tuple[Dataset, Dataset, Contracts]:
    """Train day at the base config, test day drifted; contracts are shared."""
    rng = _streams(config.seed)
    contracts = generate_contracts(config, rng["contracts"])
    base = replace(config, volume_multiplier=1.0, price_multiplier=1.0)
    drifted = replace(config, volume_multiplier=volume_multiplier, price_multiplier=price_multiplier)
    train = generate_impressions(base, len(contracts), rng["train"])
    test = generate_impressions(drifted, len(contracts), rng["test"])
    return train, test, contracts


# ---------------------------------------------------------------- file format

def _dump(obj) -> str:
    return json.dumps(obj, separators=(",", ":"))


def write_day(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i in range(len(dataset)):
            fh.write(_dump({
                "id": int(dataset.ids[i]),
                "step": int(dataset.step[i]),
                "b1": float(dataset.b1[i]),
                "b2": float(dataset.b2[i]),
                "q": [float(x) for x in dataset.q[i]],
            }))
            fh.write("\n")


def _field(obj, key, kind, where):
    if key not in obj:
        raise DataError(f"{where}: missing field {key!r}")
    val = obj[key]
    if kind is int:
        if isinstance(val, bool) or not isinstance(val, int):
            raise DataError(f"{where}: field {key!r} must be an integer")
    elif kind is float:
        if isinstance(val, bool) or not isinstance(val, (int, float)) or not math.isfinite(val):
            raise DataError(f"{where}: field {key!r} must be a finite number")
        val = float(val)
    return val


def _lines(path) -> Iterator[tuple[int, str, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{os.fspath(path)}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{where}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DataError(f"{where}: expected a JSON object")
            yield lineno, where, obj


def iter_impressions(path, horizon: int = DEFAULT_HORIZON) -> Iterator[Impression]:
    """Stream impressions in file order, rejecting steps that go backwards."""
    last = 0
    width = None
    for _, where, obj in _lines(path):
        step = _field(obj, "step", int, where)
        if step < last:
            raise DataError(f"{where}: step {step} after step {last} (stream must be sorted)")
        if not 1 <= step <= horizon:
            raise DataError(f"{where}: step {step} outside [1, {horizon}]")
        q = obj.get("q")
        if not isinstance(q, list):
            raise DataError(f"{where}: field 'q' must be a list")
        if width is None:
            width = len(q)
        elif len(q) != width:
            raise DataError(f"{where}: expected {width} quality scores, got {len(q)}")
        quality = tuple(_field({"q": x}, "q", float, where) for x in q)
        try:
            yield Impression(
                _field(obj, "id", int, where), step,
                _field(obj, "b1", float, where), _field(obj, "b2", float, where), quality,
            )
        except MarketError as exc:
            raise DataError(f"{where}: {exc}") from None
        last = step


def read_day(path, horizon: int = DEFAULT_HORIZON, m: int | None = None) -> Dataset:
    imps = list(iter_impressions(path, horizon))
    if not imps:
        return Dataset(np.zeros(0, np.int64), [], [], np.zeros((0, m or 0)), horizon=horizon)
    if m is not None and len(imps[0].quality) != m:
        raise DataError(f"{os.fspath(path)}: impressions carry {len(imps[0].quality)} "
                        f"quality scores for {m} contracts")
    return Dataset.from_impressions(imps, horizon=horizon)


def write_contracts(contracts: Contracts, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for c in contracts:
            fh.write(_dump({
                "id": int(c.id), "demand": int(c.demand), "unit_price": float(c.unit_price),
                "penalty": float(c.penalty), "quality_weight": float(c.quality_weight),
            }))
            fh.write("\n")


def read_contracts(path) -> Contracts:
    out = []
    for _, where, obj in _lines(path):
        try:
            out.append(Contract(
                _field(obj, "id", int, where), _field(obj, "demand", int, where),
                _field(obj, "unit_price", float, where), _field(obj, "penalty", float, where),
                _field(obj, "quality_weight", float, where),
            ))
        except MarketError as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"{where}: {exc}") from None
    return Contracts(out)


def config_dict(config: TrafficConfig) -> dict:
    d = asdict(config)
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items() if v is not None}
