"""Self-financing hedge rollouts for arbitrary position rules.

A hedge portfolio holding ``delta_{t+1}`` shares over ``(t, t+1]`` with cash
earning the risk-free rate and the stock paying a continuous dividend evolves
as

    V_{t+1} = a * V_t + delta_{t+1} * (dq * S_{t+1} - a * S_t)

with ``a = exp(r * lambda_)`` and ``dq = exp(q * lambda_)``; equivalently
``V_t = beta^{-t} (V_0 + G_t)`` for the discounted trading gain ``G_t``.
Positions are predictable: the rule sees only time-``t`` information
``(V_t, S_t, sigma_{t+1}, tau)`` when choosing ``delta_{t+1}``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .market import FormatError, GarchParams, Measure, PathSet

LEDGER_MAGIC = b"HLLG"
LEDGER_VERSION = 1


class RolloutError(RuntimeError):
    """A strategy produced non-finite positions; carries path/time coordinates."""


@dataclass(frozen=True)
class Contract:
    """Short European call being hedged, plus the initial hedge capital."""

    strike: float
    n_steps: int
    v0: float

    def __post_init__(self) -> None:
        if self.strike <= 0.0:
            raise ValueError("strike must be positive")
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")
        if self.v0 < 0.0:
            raise ValueError("v0 must be non-negative")

    def payoff(self, s_terminal: np.ndarray) -> np.ndarray:
        return np.maximum(s_terminal - self.strike, 0.0)


@dataclass
class EpisodeLedger:
    """Per-path rollout record of one strategy."""

    positions: np.ndarray  # [n_paths, T], positions[:, t] held over (t, t+1]
    values: np.ndarray  # [n_paths, T+1]
    terminal_error: np.ndarray  # payoff - V_T
    terminal_value: np.ndarray  # V_T
    strategy_tag: str

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    def to_csv(self, path: str | Path, paths: PathSet) -> None:
        import csv

        n, t_cols = self.positions.shape
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["path_id", "t", "S_t", "sigma", "delta", "V_t"])
            for i in range(n):
                for t in range(t_cols):
                    writer.writerow(
                        [
                            i,
                            t,
                            repr(float(paths.prices[i, t])),
                            repr(float(paths.vols[i, t])),
                            repr(float(self.positions[i, t])),
                            repr(float(self.values[i, t])),
                        ]
                    )

    def save(self, path: str | Path) -> None:
        n, t_cols = self.positions.shape
        tag = self.strategy_tag.encode()
        with open(path, "wb") as fh:
            fh.write(struct.pack("<4sIQQH", LEDGER_MAGIC, LEDGER_VERSION, n, t_cols, len(tag)))
            fh.write(tag)
            fh.write(np.ascontiguousarray(self.positions, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.terminal_error, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "EpisodeLedger":
        def read_exact(fh, size: int, what: str) -> bytes:
            raw = fh.read(size)
            if len(raw) != size:
                raise FormatError(f"{path}: truncated {what}")
            return raw

        with open(path, "rb") as fh:
            head_fmt = "<4sIQQH"
            head = read_exact(fh, struct.calcsize(head_fmt), "header")
            magic, version, n, t_cols, tag_len = struct.unpack(head_fmt, head)
            if magic != LEDGER_MAGIC:
                raise FormatError(f"{path}: bad magic {magic!r}, expected {LEDGER_MAGIC!r}")
            if version != LEDGER_VERSION:
                raise FormatError(f"{path}: unsupported version {version}")
            tag = read_exact(fh, tag_len, "tag").decode()
            positions = np.frombuffer(
                read_exact(fh, n * t_cols * 8, "positions"), dtype="<f8"
            ).reshape(n, t_cols).copy()
            values = np.frombuffer(
                read_exact(fh, n * (t_cols + 1) * 8, "values"), dtype="<f8"
            ).reshape(n, t_cols + 1).copy()
            terminal_error = np.frombuffer(read_exact(fh, n * 8, "errors"), dtype="<f8").copy()
        return cls(
            positions=positions,
            values=values,
            terminal_error=terminal_error,
            terminal_value=values[:, -1].copy(),
            strategy_tag=tag,
        )


class PositionRule:
    """Interface of a hedging strategy.

    ``rollout`` calls :meth:`reset` once, then :meth:`positions` exactly once
    per step in increasing ``t``; stateful rules may rely on that ordering.
    """

    tag = "rule"

    def reset(self, paths: PathSet, contract: Contract, params: GarchParams) -> None:
        pass

    def positions(
        self,
        t: int,
        s_t: np.ndarray,
        sigma_next: np.ndarray,
        tau: int,
        v_t: np.ndarray,
    ) -> np.ndarray:
        raise NotImplementedError


class ZeroRule(PositionRule):
    tag = "zero"

    def positions(self, t, s_t, sigma_next, tau, v_t):
        return np.zeros_like(s_t)


class ConstantRule(PositionRule):
    def __init__(self, position: float, tag: str = "constant"):
        self.position = position
        self.tag = tag

    def positions(self, t, s_t, sigma_next, tau, v_t):
        return np.full_like(s_t, self.position)


class ExogenousRule(PositionRule):
    """Replay a precomputed [n_paths, T] position matrix."""

    def __init__(self, matrix: np.ndarray, tag: str = "exogenous"):
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self.tag = tag

    def positions(self, t, s_t, sigma_next, tau, v_t):
        return self.matrix[:, t]


class ShiftedRule(PositionRule):
    """Another rule's positions plus a constant offset (test utility)."""

    def __init__(self, base: PositionRule, offset: float):
        self.base = base
        self.offset = offset
        self.tag = f"{base.tag}+{offset:g}"

    def reset(self, paths, contract, params):
        self.base.reset(paths, contract, params)

    def positions(self, t, s_t, sigma_next, tau, v_t):
        return self.base.positions(t, s_t, sigma_next, tau, v_t) + self.offset


def step_value(
    v: np.ndarray,
    delta: np.ndarray,
    s: np.ndarray,
    s_next: np.ndarray,
    growth: float,
    carry: float,
) -> np.ndarray:
    """One self-financing update; shared verbatim by training rollouts."""
    return growth * v + delta * (carry * s_next - growth * s)


def rollout(
    strategy: PositionRule,
    paths: PathSet,
    contract: Contract,
    params: GarchParams,
) -> EpisodeLedger:
    """Roll a strategy through every path and record the ledger."""
    if paths.n_steps != contract.n_steps:
        raise ValueError(
            f"paths horizon {paths.n_steps} != contract horizon {contract.n_steps}"
        )
    if paths.measure is not Measure.P:
        import warnings

        warnings.warn("rollout on non-physical paths: performance metrics are not P&L")
    n, t_steps = paths.n_paths, paths.n_steps
    growth = math.exp(params.r * params.lambda_)
    carry = math.exp(params.q * params.lambda_)
    positions = np.empty((n, t_steps))
    values = np.empty((n, t_steps + 1))
    v = np.full(n, contract.v0)
    values[:, 0] = v
    strategy.reset(paths, contract, params)
    for t in range(t_steps):
        s_t = paths.prices[:, t]
        delta = np.asarray(
            strategy.positions(t, s_t, paths.vols[:, t], t_steps - t, v),
            dtype=np.float64,
        )
        if not np.all(np.isfinite(delta)):
            bad = np.flatnonzero(~np.isfinite(delta))
            raise RolloutError(
                f"strategy '{strategy.tag}' returned non-finite positions at "
                f"t={t}, paths {bad[:10].tolist()}"
            )
        positions[:, t] = delta
        v = step_value(v, delta, s_t, paths.prices[:, t + 1], growth, carry)
        values[:, t + 1] = v
    ledger = EpisodeLedger(
        positions=positions,
        values=values,
        terminal_error=contract.payoff(paths.prices[:, -1]) - v,
        terminal_value=v.copy(),
        strategy_tag=strategy.tag,
    )
    return ledger


def hedging_error(
    ledger: EpisodeLedger, contract: Contract, paths: PathSet
) -> np.ndarray:
    """Option payoff minus terminal portfolio value, per path."""
    if ledger.n_paths != paths.n_paths:
        raise ValueError("ledger and paths are not aligned")
    return contract.payoff(paths.prices[:, -1]) - ledger.values[:, -1]


def recompute_values(
    ledger: EpisodeLedger, paths: PathSet, contract: Contract, params: GarchParams
) -> np.ndarray:
    """Independent reconstruction of V_t from discounted gains.

    Accumulates ``G_t = sum_k delta_k (beta^k S_k e^{q lambda} - beta^{k-1} S_{k-1})``
    and returns ``beta^{-t} (V_0 + G_t)``; used to verify the ledger recursion.
    """
    n, t_steps = ledger.positions.shape
    beta = math.exp(-params.r * params.lambda_)
    carry = math.exp(params.q * params.lambda_)
    values = np.empty((n, t_steps + 1))
    values[:, 0] = contract.v0
    gains = np.zeros(n)
    for k in range(1, t_steps + 1):
        gains = gains + ledger.positions[:, k - 1] * (
            beta**k * paths.prices[:, k] * carry - beta ** (k - 1) * paths.prices[:, k - 1]
        )
        values[:, k] = beta ** (-k) * (contract.v0 + gains)
    return values


@dataclass
class DifferenceRule(PositionRule):
    """Long one strategy, short another: emits ``long(x) - short(x)``.

    Each leg is fed the portfolio value it would carry under its *own* hedge
    account (both started at ``account_v0``), tracked in parallel inside this
    rule; the ledger rolled for the difference itself starts at V_0 = 0.
    """

    long_rule: PositionRule
    short_rule: PositionRule
    account_v0: float
    tag: str = "difference"
    _growth: float = field(default=0.0, init=False, repr=False)
    _carry: float = field(default=0.0, init=False, repr=False)
    _v_long: np.ndarray | None = field(default=None, init=False, repr=False)
    _v_short: np.ndarray | None = field(default=None, init=False, repr=False)
    _prev: tuple[np.ndarray, np.ndarray, np.ndarray] | None = field(
        default=None, init=False, repr=False
    )

    def reset(self, paths, contract, params):
        self.long_rule.reset(paths, contract, params)
        self.short_rule.reset(paths, contract, params)
        self._growth = math.exp(params.r * params.lambda_)
        self._carry = math.exp(params.q * params.lambda_)
        n = paths.n_paths
        self._v_long = np.full(n, self.account_v0)
        self._v_short = np.full(n, self.account_v0)
        self._prev = None

    def positions(self, t, s_t, sigma_next, tau, v_t):
        if self._prev is not None:
            s_prev, d_long, d_short = self._prev
            self._v_long = step_value(
                self._v_long, d_long, s_prev, s_t, self._growth, self._carry
            )
            self._v_short = step_value(
                self._v_short, d_short, s_prev, s_t, self._growth, self._carry
            )
        d_long = self.long_rule.positions(t, s_t, sigma_next, tau, self._v_long)
        d_short = self.short_rule.positions(t, s_t, sigma_next, tau, self._v_short)
        self._prev = (s_t, d_long, d_short)
        return d_long - d_short


def difference_strategy(
    deep: PositionRule, delta: PositionRule, account_v0: float
) -> DifferenceRule:
    """Deep-minus-delta overlay; roll it with a zero-capital contract."""
    return DifferenceRule(
        long_rule=deep,
        short_rule=delta,
        account_v0=account_v0,
        tag=f"{deep.tag}-minus-{delta.tag}",
    )
