"""Empirical VaR/CVaR estimators and the statistical-arbitrage verdict.

Conventions, applied identically in training and reporting: for a loss sample
of size N, VaR-hat at level alpha is the ceil(alpha*N)-th ascending order
statistic, and

    CVaR-hat = VaR-hat + (1 / ((1 - alpha) * N)) * sum_i max(x_i - VaR-hat, 0).

No small-sample bias corrections are applied anywhere.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np


def _order_index(alpha: float, n: int) -> int:
    """1-indexed order statistic rank ceil(alpha*n), guarded against float round-up."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    if n < 1:
        raise ValueError("sample must be non-empty")
    return math.ceil(round(alpha * n, 9))


def var_hat(sample: np.ndarray, alpha: float) -> float:
    """Empirical VaR: the ceil(alpha*N)-th smallest sample value."""
    sample = np.asarray(sample, dtype=np.float64).ravel()
    k = _order_index(alpha, sample.size)
    return float(np.sort(sample)[k - 1])


def cvar_hat(sample: np.ndarray, alpha: float) -> float:
    """Empirical CVaR: VaR plus the normalized mean excess above it."""
    sample = np.asarray(sample, dtype=np.float64).ravel()
    v = var_hat(sample, alpha)
    excess = np.maximum(sample - v, 0.0).sum()
    return float(v + excess / ((1.0 - alpha) * sample.size))


def cvar_hat_with_gradient(
    sample: np.ndarray, alpha: float
) -> tuple[float, np.ndarray, int]:
    """CVaR estimate, its subgradient w.r.t. the sample, and the VaR index.

    The estimator is piecewise linear; at the VaR order statistic we take the
    subgradient that gives each strictly exceeding sample weight
    ``1/((1-alpha)N)`` and routes the remainder (the order-statistic term's
    own derivative) to the VaR sample, so the weights always sum to 1.
    """
    sample = np.asarray(sample, dtype=np.float64).ravel()
    n = sample.size
    k = _order_index(alpha, n)
    order = np.argsort(sample, kind="stable")
    var_ix = int(order[k - 1])
    v = float(sample[var_ix])
    coef = 1.0 / ((1.0 - alpha) * n)
    excess = np.maximum(sample - v, 0.0)
    value = float(v + excess.sum() * coef)
    grad = np.where(sample > v, coef, 0.0)
    grad[var_ix] += 1.0 - coef * np.count_nonzero(sample > v)
    return value, grad, var_ix


@dataclass
class RiskReport:
    """Risk snapshot of one strategy's loss or P&L sample."""

    alpha: float
    var_hat: float
    cvar_hat: float
    mean: float
    n: int
    strategy_tag: str
    is_stat_arb: bool | None = None  # only meaningful for zero-capital P&L

    def __post_init__(self) -> None:
        if self.cvar_hat < self.var_hat - 1e-12:
            raise ValueError("cvar_hat must be >= var_hat")

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(asdict(self), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, source: str | Path) -> "RiskReport":
        text = Path(source).read_text() if isinstance(source, Path) else source
        return cls(**json.loads(text))

    @staticmethod
    def csv_header() -> str:
        return "strategy,alpha,var_hat,cvar_hat,mean,n,is_stat_arb"

    def csv_row(self) -> str:
        arb = "" if self.is_stat_arb is None else str(self.is_stat_arb).lower()
        return (
            f"{self.strategy_tag},{self.alpha:.6g},{self.var_hat!r},"
            f"{self.cvar_hat!r},{self.mean!r},{self.n},{arb}"
        )


def report_from_errors(errors: np.ndarray, alpha: float, tag: str) -> RiskReport:
    """Risk report of a hedging-error sample (losses as-is)."""
    errors = np.asarray(errors, dtype=np.float64).ravel()
    return RiskReport(
        alpha=alpha,
        var_hat=var_hat(errors, alpha),
        cvar_hat=cvar_hat(errors, alpha),
        mean=float(errors.mean()),
        n=errors.size,
        strategy_tag=tag,
    )


def stat_arb_verdict(pnl: np.ndarray, alpha: float) -> tuple[float, float, bool]:
    """Evaluate a zero-initial-capital terminal-value sample.

    Returns ``(rho, mean, is_stat_arb)`` where ``rho`` is the CVaR of the
    negated P&L; a negative ``rho`` marks a statistical arbitrage.
    """
    pnl = np.asarray(pnl, dtype=np.float64).ravel()
    rho = cvar_hat(-pnl, alpha)
    return rho, float(pnl.mean()), bool(rho < 0.0)


def report_from_pnl(pnl: np.ndarray, alpha: float, tag: str) -> RiskReport:
    """Risk report of a zero-capital P&L sample, with the arbitrage verdict."""
    pnl = np.asarray(pnl, dtype=np.float64).ravel()
    rho, mean, is_arb = stat_arb_verdict(pnl, alpha)
    return RiskReport(
        alpha=alpha,
        var_hat=var_hat(-pnl, alpha),
        cvar_hat=rho,
        mean=mean,
        n=pnl.size,
        strategy_tag=tag,
        is_stat_arb=is_arb,
    )
