"""End-to-end acceptance criteria at desk scale.

Each test prints one ``ACCEPTANCE n: PASS/FAIL`` line (run with ``-s`` to see
them live) and then asserts.  The desk experiment fixture mirrors the CLI
pipeline: 50k training / 10k validation / 20k test paths, the default pricing
and surface settings, and 10-epoch agents for levels {1%, 20%, 90%, 95%}.

Criterion 2 (the delta-hedge CVaR95 level) fails by design of the market
itself and is expected to stay red: dedicated diagnostics in this suite and
the module-level notes explain why the printed parameter set cannot reproduce
that one number while everything else matches.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest

from hedgelab import analysis, market, policy, pricing, risk, rng
from hedgelab.config import profile_config
from hedgelab.hedging import Contract, rollout
from hedgelab.market import simulate_p, simulate_q

RESULTS: list[tuple[str, bool, str]] = []


def record(label: str, ok: bool, detail: str) -> None:
    RESULTS.append((label, ok, detail))
    print(f"\nACCEPTANCE {label}: {'PASS' if ok else 'FAIL'} - {detail}", flush=True)
    assert ok, f"{label}: {detail}"


class Desk:
    """Desk-scale experiment artifacts shared across acceptance tests."""

    def __init__(self):
        self.cfg = profile_config("desk")
        self.params = self.cfg.market.params()
        self.sigma1 = self.cfg.market.sigma1
        ct, mc, ps = self.cfg.contract, self.cfg.mc, self.cfg.paths
        self.train_paths = simulate_p(
            self.params, ct.s0, self.sigma1, ct.maturity_days, ps.n_train, ps.seed_train
        )
        self.valid_paths = simulate_p(
            self.params, ct.s0, self.sigma1, ct.maturity_days, ps.n_valid, ps.seed_valid
        )
        self.test_paths = simulate_p(
            self.params, ct.s0, self.sigma1, ct.maturity_days, ps.n_test, ps.seed_test
        )

        t0 = time.monotonic()
        self.price, self.price_se = pricing.price_call_mc(
            self.params, ct.s0, self.sigma1, ct.strike, ct.maturity_days,
            mc.price_paths, mc.price_seed,
        )
        self.price_seconds = time.monotonic() - t0

        self.contract = Contract(strike=ct.strike, n_steps=ct.maturity_days, v0=self.price)
        self.surface = pricing.build_delta_surface(
            self.params, ct.maturity_days, n_inner=mc.inner_paths, seed=mc.surface_seed
        )
        self.delta_rule = pricing.DeltaHedgeRule(self.surface, ct.strike)

        self.agents = {}
        self.train_seconds = {}
        for alpha in self.cfg.train.alphas:
            seed = rng.derive_seed(self.cfg.train.seed, round(alpha * 10_000))
            net = policy.glorot_init(seed, leverage_cap=ct.leverage_cap)
            t0 = time.monotonic()
            best, _ = policy.train(
                net,
                self.train_paths,
                policy.TrainConfig(
                    epochs=self.cfg.train.epochs,
                    alpha=alpha,
                    seed=seed,
                    batch_size=self.cfg.train.batch_size,
                    learning_rate=self.cfg.train.learning_rate,
                ),
                self.valid_paths,
                self.contract,
                self.params,
            )
            self.train_seconds[alpha] = time.monotonic() - t0
            self.agents[alpha] = policy.DeepPolicyRule(best, tag=f"deep{alpha:g}")

        self.delta_ledger, self.comparisons = analysis.compare_strategies(
            self.agents, self.delta_rule, self.test_paths, self.contract, self.params
        )
        self.table1 = {
            alpha: comp.table1_row(self.delta_ledger.terminal_error)
            for alpha, comp in self.comparisons.items()
        }
        self.table2 = dict(analysis.build_table2(self.comparisons, self.delta_ledger))


@pytest.fixture(scope="module")
def desk():
    return Desk()


@pytest.mark.acceptance
def test_criterion_01_pricing(desk):
    lo, hi = 3.16 - 0.10, 3.16 + 0.10
    ok = lo <= desk.price <= hi and desk.price_seconds < 60.0
    record(
        "1 (initial price)",
        ok,
        f"price {desk.price:.4f} +- {desk.price_se:.4f} in [{lo:.2f}, {hi:.2f}], "
        f"{desk.price_seconds:.1f}s < 60s at {desk.cfg.mc.price_paths} antithetic paths",
    )


@pytest.mark.acceptance
def test_criterion_02_delta_benchmark(desk):
    """Delta-hedge CVaR95 level: 3.223 +-25% at 20k test paths.

    Expected to FAIL: the printed market parameters imply an infinite-kurtosis
    return distribution (E[(beta + (alpha+gamma*1)eps^2)^2] = 1.098 > 1) whose
    realized-variance tail puts this statistic near 5, not 3.2, even though the
    pricing level, the low-level risk rows, the difference-strategy economics
    and the association structure all reproduce.  The delta estimator itself
    is validated against bump-and-revalue pricing elsewhere in the suite.
    """
    target = 3.102 + 0.121
    measured = risk.cvar_hat(desk.delta_ledger.terminal_error, 0.95)
    lo, hi = target * 0.75, target * 1.25
    ok = lo <= measured <= hi
    record(
        "2 (delta benchmark level)",
        ok,
        f"delta-hedge cvar95 {measured:.3f} vs {target:.3f} +-25% desk band "
        f"[{lo:.3f}, {hi:.3f}] on {desk.test_paths.n_paths} paths",
    )


@pytest.mark.acceptance
def test_criterion_03_deep_improvement(desk):
    row = desk.table1[0.95]
    seconds = desk.train_seconds[0.95]
    ok = row.risk_gap < 0.0 and seconds < 1800.0
    record(
        "3 (deep improvement at 95%)",
        ok,
        f"cvar95 gap deep-minus-delta {row.risk_gap:.3f} (<0) after "
        f"{desk.cfg.train.epochs} epochs on {desk.train_paths.n_paths} paths "
        f"in {seconds:.0f}s (<1800s)",
    )


@pytest.mark.acceptance
def test_criterion_04_stat_arb_regimes(desk):
    msgs, ok = [], True
    for alpha in (0.01, 0.20):
        row = desk.table1[alpha]
        good = row.risk_diff_neg_pnl < 0.0 and row.mean_diff_pnl > 0.0
        ok &= good
        msgs.append(
            f"{alpha:g}: rho={row.risk_diff_neg_pnl:.3f}<0 mean={row.mean_diff_pnl:.3f}>0"
        )
    for alpha in (0.90, 0.95):
        row = desk.table1[alpha]
        good = row.risk_diff_neg_pnl > 0.0 and row.mean_diff_pnl < 0.0
        ok &= good
        msgs.append(
            f"{alpha:g}: rho={row.risk_diff_neg_pnl:.3f}>0 mean={row.mean_diff_pnl:.3f}<0"
        )
    record("4 (stat-arb regime signs)", ok, "; ".join(msgs))


@pytest.mark.acceptance
def test_criterion_05_association_regimes(desk):
    hi = desk.table2[0.95]
    lo = desk.table2[0.01]
    ok = hi.spearman > 0.9 and hi.r2 > 0.6 and lo.spearman < 0.1 and lo.r2 < 0.1
    record(
        "5 (association regimes)",
        ok,
        f"95%: spearman {hi.spearman:.3f}>0.9 R2 {hi.r2:.3f}>0.6; "
        f"1%: spearman {lo.spearman:.3f}<0.1 R2 {lo.r2:.3f}<0.1",
    )


@pytest.mark.acceptance
def test_criterion_06_estimator_oracles():
    def brute_force(sample, alpha):
        xs = sorted(float(x) for x in sample)
        n = len(xs)
        k = math.ceil(round(alpha * n, 9))
        v = xs[k - 1]
        excess = sum(max(x - v, 0.0) for x in xs)
        return v, v + excess / ((1.0 - alpha) * n)

    gen = np.random.Generator(np.random.Philox(key=606))
    mismatches = 0
    for case in range(10_000):
        n = int(gen.integers(1, 9))
        style = case % 3
        if style == 0:
            sample = gen.standard_normal(n) * 10.0
        elif style == 1:
            sample = gen.integers(-3, 4, n).astype(float)  # heavy ties
        else:
            sample = np.round(gen.standard_normal(n), 1)
        alpha = float(gen.uniform(0.01, 0.99)) if case % 2 else [0.01, 0.2, 0.5, 0.9, 0.95, 0.99][case % 6]
        v_ref, c_ref = brute_force(sample, alpha)
        if risk.var_hat(sample, alpha) != v_ref or risk.cvar_hat(sample, alpha) != c_ref:
            mismatches += 1
    record(
        "6 (estimator oracles)",
        mismatches == 0,
        f"{mismatches} mismatches over 10000 enumerated samples of size <= 8 (exact equality)",
    )


@pytest.mark.acceptance
def test_criterion_07_gradient_check(desk):
    params = desk.params
    gen = np.random.Generator(np.random.Philox(key=707))
    t0 = time.monotonic()
    checked = 0
    worst = 0.0
    attempts = 0
    h = 1e-5
    while checked < 50 and attempts < 90:
        attempts += 1
        t_steps = int(gen.integers(3, 11))
        batch = simulate_p(
            params, 100.0, desk.sigma1, t_steps, 16, seed=int(gen.integers(2**62))
        )
        contract = Contract(strike=100.0, n_steps=t_steps, v0=3.2)
        net = policy.glorot_init(int(gen.integers(2**62)))
        net = policy.fit_feature_stats(net, batch, contract, params, n_pilot=16)
        alpha = float(gen.uniform(0.05, 0.95))
        _, (dw, db) = policy.episode_gradient(net, batch, contract, params, alpha)
        flat = np.concatenate([g.ravel() for g in dw + db])
        u = gen.standard_normal(flat.size)
        u /= np.linalg.norm(u)

        def loss_at(step):
            bumped = net.copy()
            k = 0
            for arr in bumped.weights + bumped.biases:
                arr += step * u[k : k + arr.size].reshape(arr.shape)
                k += arr.size
            return policy.episode_gradient(bumped, batch, contract, params, alpha)[0]

        d_full = (loss_at(h) - loss_at(-h)) / (2 * h)
        d_half = (loss_at(h / 2) - loss_at(-h / 2)) / h
        scale = max(abs(d_full), abs(d_half), 1e-8)
        if abs(d_full - d_half) > 1e-4 * scale:
            continue  # a kink or order-statistic tie sits inside the stencil
        analytic = float(flat @ u)
        rel = abs(analytic - d_full) / max(abs(d_full), abs(analytic), 1e-12)
        worst = max(worst, rel)
        checked += 1
    seconds = time.monotonic() - t0
    ok = checked == 50 and worst <= 1e-4 and seconds < 60.0
    record(
        "7 (gradient vs central differences)",
        ok,
        f"{checked}/50 smooth instances, worst relative error {worst:.2e} <= 1e-4, "
        f"{seconds:.1f}s < 60s",
    )


@pytest.mark.acceptance
def test_criterion_08_q_martingale(desk):
    params = desk.params
    qs = simulate_q(params, 100.0, desk.sigma1, 63, 100_000, seed=808)
    msgs, ok = [], True
    for t in (1, 21, 63):
        x = qs.prices[:, t] * math.exp((params.q - params.r) * t * params.lambda_)
        se = x.std() / math.sqrt(x.size)
        z = abs(x.mean() - 100.0) / se
        ok &= z < 4.0
        msgs.append(f"t={t}: {z:.2f} se")
    record("8 (risk-neutral martingale)", ok, "deviation " + ", ".join(msgs) + " (all < 4 se)")


@pytest.mark.acceptance
def test_criterion_09_surface_fidelity(desk):
    surface = desk.surface
    gen = np.random.Generator(np.random.Philox(key=909))
    errors = []
    for _ in range(100):
        m = float(gen.uniform(surface.moneyness_grid[0], surface.moneyness_grid[-1]))
        sig = float(gen.uniform(surface.vol_grid[0], surface.vol_grid[-1]))
        tau = int(gen.integers(1, surface.tau_grid[-1] + 1))
        approx = pricing.delta_lookup(surface, 1.0, sig, tau, m)
        oracle = pricing.delta_nested_mc(
            desk.params, 1.0, sig, m, tau, n_inner=100_000, seed=int(gen.integers(2**62))
        )
        errors.append(abs(approx - oracle))
    mae = float(np.mean(errors))
    record(
        "9 (surface fidelity)",
        mae <= 0.01,
        f"mean abs error {mae:.4f} <= 0.01 over 100 in-hull states "
        f"(max {max(errors):.4f}), oracle n_inner=100000",
    )


@pytest.mark.acceptance
def test_criterion_10_calibration_recovery(desk):
    params = desk.params
    hits = 0
    for trial in range(20):
        ps = simulate_p(params, 100.0, params.stationary_vol, 5000, 1, seed=10_000 + trial)
        returns = np.diff(np.log(ps.prices[0]))
        try:
            fitted = market.calibrate(returns)
        except market.CalibrationError as exc:
            fitted = exc.best
        good = (
            abs(fitted.alpha - params.alpha) <= 0.05
            and abs(fitted.gamma - params.gamma) <= 0.05
            and abs(fitted.beta - params.beta) <= 0.05
        )
        hits += good
    record(
        "10 (calibration recovery)",
        hits >= 18,
        f"{hits}/20 trials recovered (alpha, gamma, beta) within +-0.05 (need >= 18)",
    )


@pytest.mark.acceptance
def test_criteria_summary():
    lines = ["", "=" * 72, "acceptance summary"]
    for label, ok, detail in RESULTS:
        lines.append(f"  [{'PASS' if ok else 'FAIL'}] {label}")
    lines.append("=" * 72)
    print("\n".join(lines), flush=True)
