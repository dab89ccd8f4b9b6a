"""Server-side knowledge selection: consistency-ratio weighted aggregation.

Per round (from the second round on) the server

1. gates clients whose local update norm is below ``epsilon``,
2. computes each surviving client's consistency ratio
   ``R = ||global_t - global_{t-1}|| / ||local update||``,
3. smooths it, ``R~ = gamma * R + (1 - gamma) * R~_prev``,
4. weights survivors by ``exp(-beta * |1 - R~|)`` normalised to sum 1,
5. sets the new global branch to the weighted sum of client parameters.

Round 1 has no previous global model and uses uniform weights; if every
client is gated the round also falls back to uniform weights.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .client import ClientUpdate
from .params import ParamVector, l2_norm, subtract, weighted_sum
from .synthdata import ConfigError

WEIGHT_SUM_TOL = 1e-12


class ProtocolError(RuntimeError):
    """Server-side protocol precondition violated."""


@dataclass(frozen=True)
class KSConfig:
    beta: float = 5.0
    gamma: float = 0.7
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.beta >= 0:
            raise ConfigError("beta must be >= 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be > 0")


@dataclass(frozen=True)
class ClientWeight:
    client_id: int
    update_norm: float
    ratio: float | None
    smoothed: float
    alpha: float
    gated: bool


@dataclass(frozen=True)
class WeightRecord:
    round: int
    entries: tuple[ClientWeight, ...]
    fallback: str | None = None  # "first-round", "all-gated", "fedavg" or None

    def alphas(self) -> dict[int, float]:
        return {e.client_id: e.alpha for e in self.entries}


@dataclass
class AggregationState:
    current_global: ParamVector
    previous_global: ParamVector | None = None
    smoothed_ratios: dict[int, float] = field(default_factory=dict)
    round: int = 1
    weight_history: list[WeightRecord] = field(default_factory=list)

    @classmethod
    def start(cls, initial: ParamVector, client_ids: Sequence[int]) -> "AggregationState":
        return cls(initial, None, {k: 1.0 for k in client_ids}, 1, [])


def consistency_ratio(state: AggregationState, update_norm: float) -> float:
    if state.previous_global is None:
        raise ProtocolError("no previous global model: round 1 must use uniform weights")
    if update_norm == 0:
        raise ProtocolError("zero update norm: gate the client before computing its ratio")
    return l2_norm(subtract(state.current_global, state.previous_global)) / update_norm


def smooth_ratio(prev_smoothed: float, current: float, gamma: float) -> float:
    if not (math.isfinite(prev_smoothed) and math.isfinite(current) and math.isfinite(gamma)):
        raise ValueError("smooth_ratio needs finite inputs")
    return gamma * current + (1.0 - gamma) * prev_smoothed


def compute_weights(ratios: Mapping[int, float], update_norms: Mapping[int, float],
                    cfg: KSConfig) -> dict[int, float]:
    """Gated, normalised ``exp(-beta * |1 - R~|)`` weights keyed by client id."""
    if not ratios:
        raise ProtocolError("compute_weights needs at least one client")
    if set(ratios) != set(update_norms):
        raise ProtocolError("ratio and update-norm maps cover different clients")
    ids = sorted(ratios)
    survivors = [k for k in ids if not update_norms[k] < cfg.epsilon]
    if not survivors:
        return {k: 1.0 / len(ids) for k in ids}
    dev = {k: abs(1.0 - ratios[k]) for k in survivors}
    # shifting by the smallest deviation leaves the normalised weights unchanged
    # and keeps exp() away from underflow for large beta
    lo = min(dev.values())
    raw = {k: math.exp(-cfg.beta * (dev[k] - lo)) for k in survivors}
    total = 0.0
    for k in survivors:
        total += raw[k]
    return {k: (raw[k] / total if k in raw else 0.0) for k in ids}


def aggregate(updates: Sequence[ClientUpdate], weights: Mapping[int, float]) -> ParamVector:
    """Weighted sum of client parameters in ascending client-id order."""
    ordered = sorted(updates, key=lambda u: u.client_id)
    w = [weights[u.client_id] for u in ordered]
    total = 0.0
    for x in w:
        total += x
    if abs(total - 1.0) > WEIGHT_SUM_TOL or any(x < 0 for x in w):
        raise ProtocolError(f"aggregation weights must be non-negative and sum to 1 (sum={total!r})")
    return weighted_sum([u.post_params for u in ordered], w)


def fedavg_aggregate(updates: Sequence[ClientUpdate]) -> ParamVector:
    if not updates:
        raise ProtocolError("fedavg_aggregate of no updates")
    ordered = sorted(updates, key=lambda u: u.client_id)
    k = len(ordered)
    return weighted_sum([u.post_params for u in ordered], [1.0 / k] * k)


def _advance(state: AggregationState, new_global: ParamVector, record: WeightRecord) -> AggregationState:
    state.weight_history.append(record)
    state.previous_global = state.current_global
    state.current_global = new_global
    state.round += 1
    return state


def server_round(state: AggregationState, updates: Sequence[ClientUpdate],
                 cfg: KSConfig) -> tuple[AggregationState, WeightRecord]:
    """Run one aggregation step, mutating and returning ``state``."""
    if not updates:
        raise ProtocolError("server_round received no client updates")
    missing = set(state.smoothed_ratios) - {u.client_id for u in updates}
    if missing:
        raise ProtocolError(f"missing updates from clients {sorted(missing)}")
    ordered = sorted(updates, key=lambda u: u.client_id)
    k = len(ordered)
    norms = {u.client_id: u.update_norm for u in ordered}

    if state.previous_global is None:
        alpha = {u.client_id: 1.0 / k for u in ordered}
        entries = tuple(
            ClientWeight(c, norms[c], None, state.smoothed_ratios[c], alpha[c], False) for c in alpha
        )
        record = WeightRecord(state.round, entries, "first-round")
    else:
        gated = {c: norms[c] < cfg.epsilon for c in norms}
        raw_ratio: dict[int, float | None] = {}
        for c in norms:
            if gated[c]:
                raw_ratio[c] = None
                continue
            raw_ratio[c] = consistency_ratio(state, norms[c])
            state.smoothed_ratios[c] = smooth_ratio(state.smoothed_ratios[c], raw_ratio[c], cfg.gamma)
        smoothed = {c: state.smoothed_ratios[c] for c in norms}
        alpha = compute_weights(smoothed, norms, cfg)
        fallback = "all-gated" if all(gated.values()) else None
        entries = tuple(
            ClientWeight(c, norms[c], raw_ratio[c], smoothed[c], alpha[c], gated[c]) for c in norms
        )
        record = WeightRecord(state.round, entries, fallback)

    new_global = aggregate(ordered, alpha)
    return _advance(state, new_global, record), record


def fedavg_round(state: AggregationState, updates: Sequence[ClientUpdate]) -> tuple[AggregationState, WeightRecord]:
    """Baseline server step: unweighted mean, recorded in the same history format."""
    ordered = sorted(updates, key=lambda u: u.client_id)
    k = len(ordered)
    entries = tuple(
        ClientWeight(u.client_id, u.update_norm, None, state.smoothed_ratios.get(u.client_id, 1.0), 1.0 / k,
                     False)
        for u in ordered
    )
    record = WeightRecord(state.round, entries, "fedavg")
    return _advance(state, fedavg_aggregate(ordered), record), record


WEIGHT_COLUMNS = ["round", "client_id", "update_norm", "R", "R_smoothed", "alpha", "gated"]


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_weight_history(history: Sequence[WeightRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(WEIGHT_COLUMNS)
        for rec in history:
            for e in rec.entries:
                writer.writerow([_fmt(v) for v in
                                 (rec.round, e.client_id, e.update_norm, e.ratio, e.smoothed, e.alpha, e.gated)])
