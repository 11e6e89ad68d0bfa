"""Strategy comparison tables, association statistics and P&L histograms.

Positions of the deep and delta strategies are pooled across every
rebalancing day of every test path; association is measured by the Spearman
rank correlation (midranks) and by OLS of deep positions on delta positions.
The summary table reports, per confidence level, the hedging-error risk of
the deep strategy, its edge over delta hedging, and the risk/mean of the
zero-capital difference strategy.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import risk
from .hedging import Contract, EpisodeLedger, PositionRule, difference_strategy, rollout
from .market import GarchParams, PathSet

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AssociationStats:
    """Pooled association between two position processes."""

    spearman: float
    r2: float
    kappa0: float  # regression intercept
    kappa1: float  # regression slope
    n_obs: int

    def __post_init__(self) -> None:
        if not -1.0 - 1e-12 <= self.spearman <= 1.0 + 1e-12:
            raise ValueError("spearman out of [-1, 1]")
        if not -1e-12 <= self.r2 <= 1.0 + 1e-12:
            raise ValueError("r2 out of [0, 1]")


def spearman_pooled(a: np.ndarray, b: np.ndarray) -> float:
    """Spearman rank correlation of two equally shaped position arrays."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("inputs must have identical shapes")
    if a.size < 2:
        raise ValueError("need at least 2 observations")
    ra = rankdata(a, method="average")
    rb = rankdata(b, method="average")
    if np.all(ra == ra[0]) or np.all(rb == rb[0]):
        raise ValueError("zero-variance input: rank correlation undefined")
    ra -= ra.mean()
    rb -= rb.mean()
    return float((ra @ rb) / np.sqrt((ra @ ra) * (rb @ rb)))


def regress(a: np.ndarray, b: np.ndarray) -> AssociationStats:
    """OLS of dependent positions ``a`` on regressor positions ``b``."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("inputs must have identical shapes")
    if a.size < 2:
        raise ValueError("need at least 2 observations")
    bc = b - b.mean()
    var_b = bc @ bc
    if var_b == 0.0:
        raise ValueError("degenerate regressor: zero variance")
    ac = a - a.mean()
    kappa1 = float((bc @ ac) / var_b)
    kappa0 = float(a.mean() - kappa1 * b.mean())
    resid = ac - kappa1 * bc
    sst = float(ac @ ac)
    r2 = 1.0 - float(resid @ resid) / sst if sst > 0.0 else 0.0
    return AssociationStats(
        spearman=spearman_pooled(a, b),
        r2=r2,
        kappa0=kappa0,
        kappa1=kappa1,
        n_obs=a.size,
    )


def association_by_day(a: np.ndarray, b: np.ndarray) -> list[AssociationStats | None]:
    """Per-rebalancing-day association; supplementary to the pooled numbers.

    Days with a degenerate cross-section are reported as ``None`` (day 0
    always is: every path shares the same initial state).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError("expect matching [n_paths, T] position matrices")
    out: list[AssociationStats | None] = []
    for t in range(a.shape[1]):
        try:
            out.append(regress(a[:, t], b[:, t]))
        except ValueError:
            out.append(None)
    return out


@dataclass(frozen=True)
class Table1Row:
    alpha: float
    risk_deep: float  # CVaR_alpha of deep hedging error
    risk_gap: float  # risk_deep minus CVaR_alpha of delta hedging error
    risk_diff_neg_pnl: float  # CVaR_alpha of -V_T for the difference strategy
    mean_diff_pnl: float  # E[V_T] of the difference strategy
    is_stat_arb: bool


@dataclass
class StrategyComparison:
    """Everything the report path needs for one confidence level."""

    alpha: float
    deep_ledger: EpisodeLedger
    diff_ledger: EpisodeLedger

    def table1_row(self, delta_errors: np.ndarray) -> Table1Row:
        rho_deep = risk.cvar_hat(self.deep_ledger.terminal_error, self.alpha)
        rho_delta = risk.cvar_hat(delta_errors, self.alpha)
        rho_diff, mean_diff, is_arb = risk.stat_arb_verdict(
            self.diff_ledger.terminal_value, self.alpha
        )
        return Table1Row(
            alpha=self.alpha,
            risk_deep=rho_deep,
            risk_gap=rho_deep - rho_delta,
            risk_diff_neg_pnl=rho_diff,
            mean_diff_pnl=mean_diff,
            is_stat_arb=is_arb,
        )


def compare_strategies(
    agents: dict[float, PositionRule],
    delta_rule: PositionRule,
    test_paths: PathSet,
    contract: Contract,
    params: GarchParams,
    alphas: list[float] | None = None,
) -> tuple[EpisodeLedger, dict[float, StrategyComparison]]:
    """Roll delta, each deep agent, and each difference strategy on test paths."""
    delta_ledger = rollout(delta_rule, test_paths, contract, params)
    zero_capital = Contract(strike=contract.strike, n_steps=contract.n_steps, v0=0.0)
    out: dict[float, StrategyComparison] = {}
    for alpha in sorted(alphas if alphas is not None else agents):
        if alpha not in agents:
            logger.warning("no trained agent for alpha=%g: row skipped", alpha)
            continue
        deep_rule = agents[alpha]
        deep_ledger = rollout(deep_rule, test_paths, contract, params)
        diff_ledger = rollout(
            difference_strategy(deep_rule, delta_rule, contract.v0),
            test_paths,
            zero_capital,
            params,
        )
        out[alpha] = StrategyComparison(
            alpha=alpha, deep_ledger=deep_ledger, diff_ledger=diff_ledger
        )
    return delta_ledger, out


def build_table1(
    agents: dict[float, PositionRule],
    delta_rule: PositionRule,
    test_paths: PathSet,
    contract: Contract,
    params: GarchParams,
    alphas: list[float] | None = None,
) -> list[Table1Row]:
    """Per-level performance rows, each risk evaluated at the agent's own level."""
    delta_ledger, comparisons = compare_strategies(
        agents, delta_rule, test_paths, contract, params, alphas
    )
    return [
        comp.table1_row(delta_ledger.terminal_error)
        for comp in comparisons.values()
    ]


def build_table2(
    comparisons: dict[float, StrategyComparison], delta_ledger: EpisodeLedger
) -> list[tuple[float, AssociationStats]]:
    """Pooled deep-vs-delta association per confidence level."""
    rows = []
    for alpha, comp in sorted(comparisons.items()):
        rows.append(
            (alpha, regress(comp.deep_ledger.positions, delta_ledger.positions))
        )
    return rows


def pnl_histogram(pnl: np.ndarray, bins: int) -> tuple[np.ndarray, np.ndarray]:
    """Histogram of a P&L vector: (counts, bin edges)."""
    if bins < 1:
        raise ValueError("bins must be at least 1")
    pnl = np.asarray(pnl, dtype=np.float64).ravel()
    return np.histogram(pnl, bins=bins)


def write_histogram_csv(
    counts: np.ndarray, edges: np.ndarray, path: str | Path
) -> None:
    with open(path, "w") as fh:
        fh.write("edge_lo,edge_hi,count\n")
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            fh.write(f"{float(lo)!r},{float(hi)!r},{int(c)}\n")


_T1_COLUMNS = (
    "alpha",
    "risk_deep",
    "risk_deep_minus_delta",
    "risk_neg_pnl_diff",
    "mean_pnl_diff",
    "stat_arb",
)


def render_table1_csv(rows: list[Table1Row], path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(_T1_COLUMNS) + "\n")
        for r in rows:
            fh.write(
                f"{r.alpha:.4g},{r.risk_deep:.6f},{r.risk_gap:.6f},"
                f"{r.risk_diff_neg_pnl:.6f},{r.mean_diff_pnl:.6f},"
                f"{str(r.is_stat_arb).lower()}\n"
            )


def render_table1_text(rows: list[Table1Row]) -> str:
    lines = [
        "Strategy performance (hedging-error risk and difference-strategy P&L)",
        f"{'level':>8} | {'rho(xi_DH)':>11} {'vs delta':>9} | "
        f"{'rho(-V_diff)':>12} {'E[V_diff]':>10} {'stat-arb':>8}",
        "-" * 68,
    ]
    for r in rows:
        lines.append(
            f"{r.alpha*100:>7.4g}% | {r.risk_deep:>11.3f} {r.risk_gap:>9.3f} | "
            f"{r.risk_diff_neg_pnl:>12.3f} {r.mean_diff_pnl:>10.3f} "
            f"{'yes' if r.is_stat_arb else 'no':>8}"
        )
    return "\n".join(lines) + "\n"


def render_table2_csv(
    rows: list[tuple[float, AssociationStats]], path: str | Path
) -> None:
    with open(path, "w") as fh:
        fh.write("alpha,spearman,r2,kappa0,kappa1,n_obs\n")
        for alpha, st in rows:
            fh.write(
                f"{alpha:.4g},{st.spearman:.6f},{st.r2:.6f},"
                f"{st.kappa0:.6f},{st.kappa1:.6f},{st.n_obs}\n"
            )


def render_table2_text(rows: list[tuple[float, AssociationStats]]) -> str:
    lines = [
        "Deep vs delta positions, pooled over all rebalancing days",
        f"{'level':>8} | {'spearman':>9} {'R^2':>7}",
        "-" * 30,
    ]
    for alpha, st in rows:
        lines.append(f"{alpha*100:>7.4g}% | {st.spearman:>9.3f} {st.r2:>7.3f}")
    return "\n".join(lines) + "\n"
