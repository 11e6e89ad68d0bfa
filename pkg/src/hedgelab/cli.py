"""Command-line pipeline for the hedging experiment.

Stages write into one run directory and later stages load what earlier ones
produced::

    hedgelab simulate --profile desk --out runs/desk
    hedgelab price    --profile desk --out runs/desk
    hedgelab surface  --profile desk --out runs/desk
    hedgelab train    --profile desk --out runs/desk            # all config levels
    hedgelab evaluate --profile desk --out runs/desk
    hedgelab arbtest  --profile desk --out runs/desk
    hedgelab report   --profile desk --out runs/desk

Exit codes: 0 success, 1 failed sign checks or refused overwrite, 2 config
error, 3 missing/corrupt artifact, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__, analysis, figures, policy, pricing, risk
from . import market as mkt
from .config import ConfigError, FIELD_NOTES, RunConfig, load_config
from .hedging import Contract, difference_strategy, rollout
from .market import FormatError, GarchParams, PathSet
from .policy import TrainingDiverged

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_DIVERGED = 4

OUT_ENV_VAR = "HEDGELAB_OUT"


class ArtifactMissing(RuntimeError):
    """A pipeline stage needs artifacts that have not been built yet."""

    def __init__(self, missing: list[str]):
        super().__init__(
            "missing artifacts:\n  " + "\n  ".join(missing)
        )
        self.missing = missing


def alpha_tag(alpha: float) -> str:
    pct = alpha * 100.0
    text = f"{pct:g}".replace(".", "p")
    return f"alpha_{text}"


class RunDir:
    """Layout of one run directory."""

    def __init__(self, root: Path):
        self.root = root
        self.paths = root / "paths"
        self.pricing = root / "pricing"
        self.surface = root / "surface"
        self.checkpoints = root / "checkpoints"
        self.logs = root / "logs"
        self.reports = root / "reports"
        self.figures = root / "figures"

    def ensure(self) -> None:
        for d in (
            self.root, self.paths, self.pricing, self.surface,
            self.checkpoints, self.logs, self.reports, self.figures,
        ):
            d.mkdir(parents=True, exist_ok=True)

    def path_file(self, name: str) -> Path:
        return self.paths / f"{name}.hlps"

    @property
    def price_file(self) -> Path:
        return self.pricing / "price.json"

    @property
    def surface_file(self) -> Path:
        return self.surface / "delta.hlds"

    def checkpoint_file(self, alpha: float) -> Path:
        return self.checkpoints / f"{alpha_tag(alpha)}.hlnn"

    def training_log(self, alpha: float) -> Path:
        return self.logs / f"train_{alpha_tag(alpha)}.csv"

    def update_manifest(self, cfg: RunConfig, command: str) -> None:
        manifest_path = self.root / "manifest.json"
        manifest = {"version": __version__, "config": cfg.to_dict(), "history": []}
        if manifest_path.exists():
            try:
                old = json.loads(manifest_path.read_text())
                manifest["history"] = old.get("history", [])
                if old.get("config") != manifest["config"]:
                    logger.warning(
                        "manifest config differs from current config; updating snapshot"
                    )
            except json.JSONDecodeError:
                logger.warning("manifest was unreadable; rewriting")
        manifest["history"].append(
            {"command": command, "argv": sys.argv[1:], "time": time.strftime("%Y-%m-%dT%H:%M:%S")}
        )
        manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")


def resolve_out_dir(args, cfg: RunConfig) -> Path:
    if args.out:
        return Path(args.out)
    if cfg.out_dir:
        return Path(cfg.out_dir)
    root = os.environ.get(OUT_ENV_VAR, "runs")
    return Path(root) / cfg.profile


def build_config(args) -> RunConfig:
    cfg = load_config(args.config, args.profile)
    if getattr(args, "workers", None):
        cfg = replace(cfg, workers=args.workers)
    if getattr(args, "seed", None) is not None:
        # One base seed re-derives every stage seed, keeping them distinct.
        from .rng import derive_seed

        base = args.seed
        cfg = replace(
            cfg,
            paths=replace(
                cfg.paths,
                seed_train=derive_seed(base, 1),
                seed_valid=derive_seed(base, 2),
                seed_test=derive_seed(base, 3),
            ),
            mc=replace(
                cfg.mc,
                price_seed=derive_seed(base, 4),
                surface_seed=derive_seed(base, 5),
            ),
            train=replace(cfg.train, seed=derive_seed(base, 6)),
        )
    cfg.validate()
    return cfg


def requested_alphas(args, cfg: RunConfig) -> list[float]:
    if getattr(args, "alpha", None):
        for a in args.alpha:
            if not 0.0 < a < 1.0:
                raise ConfigError(f"--alpha {a} outside (0, 1)")
        return list(args.alpha)
    return list(cfg.train.alphas)


def load_paths(run: RunDir, names: list[str]) -> dict[str, PathSet]:
    missing = [
        f"{run.path_file(n)} (run `hedgelab simulate`)"
        for n in names
        if not run.path_file(n).exists()
    ]
    if missing:
        raise ArtifactMissing(missing)
    return {n: PathSet.load(run.path_file(n)) for n in names}


def load_price(run: RunDir) -> dict:
    if not run.price_file.exists():
        raise ArtifactMissing([f"{run.price_file} (run `hedgelab price`)"])
    return json.loads(run.price_file.read_text())


def load_surface(run: RunDir) -> pricing.DeltaSurface:
    if not run.surface_file.exists():
        raise ArtifactMissing([f"{run.surface_file} (run `hedgelab surface`)"])
    return pricing.DeltaSurface.load(run.surface_file)


def load_agents(
    run: RunDir, alphas: list[float], leverage_cap: float
) -> dict[float, policy.PolicyNetwork]:
    agents = {}
    missing = []
    for a in alphas:
        f = run.checkpoint_file(a)
        if not f.exists():
            missing.append(f"{f} (run `hedgelab train --alpha {a}`)")
            continue
        net, _ = policy.load_checkpoint(f)
        if net.leverage_cap != leverage_cap:
            logger.warning(
                "checkpoint %s has leverage cap %g (config says %g)",
                f, net.leverage_cap, leverage_cap,
            )
        agents[a] = net
    if missing:
        raise ArtifactMissing(missing)
    return agents


def make_contract(cfg: RunConfig, v0: float) -> Contract:
    return Contract(
        strike=cfg.contract.strike, n_steps=cfg.contract.maturity_days, v0=v0
    )


# ---------------------------------------------------------------- commands


def cmd_simulate(args) -> int:
    cfg = build_config(args)
    run = RunDir(resolve_out_dir(args, cfg))
    run.ensure()
    existing = [
        str(run.path_file(n))
        for n in ("train", "valid", "test")
        if run.path_file(n).exists()
    ]
    if existing and not args.force:
        print(
            "refusing to overwrite existing path files (use --force):\n  "
            + "\n  ".join(existing),
            file=sys.stderr,
        )
        return EXIT_FAIL
    params = cfg.market.params()
    jobs = (
        ("train", cfg.paths.n_train, cfg.paths.seed_train),
        ("valid", cfg.paths.n_valid, cfg.paths.seed_valid),
        ("test", cfg.paths.n_test, cfg.paths.seed_test),
    )
    for name, n_paths, seed in jobs:
        t0 = time.time()
        ps = mkt.simulate_p(
            params,
            cfg.contract.s0,
            cfg.market.sigma1,
            cfg.contract.maturity_days,
            n_paths,
            seed,
            workers=cfg.workers,
        )
        ps.save(run.path_file(name))
        logger.info(
            "%s: %d paths x %d steps -> %s (%.1fs)",
            name, n_paths, cfg.contract.maturity_days, run.path_file(name),
            time.time() - t0,
        )
    run.update_manifest(cfg, "simulate")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = build_config(args)
    run = RunDir(resolve_out_dir(args, cfg))
    run.ensure()
    returns = mkt.read_returns_csv(args.returns)
    init = cfg.market.params()
    fitted = mkt.calibrate(returns, init=init)
    sigma1 = fitted.stationary_vol
    out = {
        "params": fitted.to_dict(),
        "stationary_vol": sigma1,
        "log_likelihood": mkt.log_likelihood(fitted, returns, sigma1),
        "n_observations": int(returns.size),
        "source": str(args.returns),
    }
    out_file = run.root / "calibration.json"
    out_file.write_text(json.dumps(out, indent=2) + "\n")
    print(json.dumps(out, indent=2))
    run.update_manifest(cfg, "calibrate")
    return EXIT_OK


def cmd_price(args) -> int:
    cfg = build_config(args)
    run = RunDir(resolve_out_dir(args, cfg))
    run.ensure()
    params = cfg.market.params()
    t0 = time.time()
    price, stderr = pricing.price_call_mc(
        params,
        cfg.contract.s0,
        cfg.market.sigma1,
        cfg.contract.strike,
        cfg.contract.maturity_days,
        cfg.mc.price_paths,
        cfg.mc.price_seed,
    )
    out = {
        "price": price,
        "std_error": stderr,
        "n_paths": cfg.mc.price_paths,
        "seed": cfg.mc.price_seed,
        "strike": cfg.contract.strike,
        "maturity_days": cfg.contract.maturity_days,
        "sigma1": cfg.market.sigma1,
        "runtime_seconds": time.time() - t0,
    }
    run.price_file.write_text(json.dumps(out, indent=2) + "\n")
    print(f"initial call price: {price:.4f} +- {stderr:.4f}")
    run.update_manifest(cfg, "price")
    return EXIT_OK


def cmd_surface(args) -> int:
    cfg = build_config(args)
    run = RunDir(resolve_out_dir(args, cfg))
    run.ensure()
    params = cfg.market.params()
    stat = params.stationary_vol
    t0 = time.time()
    surface = pricing.build_delta_surface(
        params,
        cfg.contract.maturity_days,
        moneyness_grid=pricing.moneyness_grid(
            cfg.mc.moneyness_lo, cfg.mc.moneyness_hi, cfg.mc.moneyness_points
        ),
        vol_grid=np.linspace(
            cfg.mc.vol_lo_mult * stat, cfg.mc.vol_hi_mult * stat, cfg.mc.vol_points
        ),
        n_inner=cfg.mc.inner_paths,
        seed=cfg.mc.surface_seed,
        workers=cfg.workers,
    )
    surface.save(run.surface_file)
    logger.info("surface -> %s (%.1fs)", run.surface_file, time.time() - t0)
    run.update_manifest(cfg, "surface")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = build_config(args)
    run = RunDir(resolve_out_dir(args, cfg))
    run.ensure()
    alphas = requested_alphas(args, cfg)
    paths = load_paths(run, ["train", "valid"])
    v0 = load_price(run)["price"]
    params = cfg.market.params()
    contract = make_contract(cfg, v0)
    from .rng import derive_seed

    for alpha in alphas:
        ckpt = run.checkpoint_file(alpha)
        if ckpt.exists() and not args.force:
            logger.info("%s exists; skipping (use --force to retrain)", ckpt)
            continue
        seed = derive_seed(cfg.train.seed, round(alpha * 10_000))
        net = policy.glorot_init(seed, leverage_cap=cfg.contract.leverage_cap)
        train_cfg = policy.TrainConfig(
            epochs=cfg.train.epochs,
            alpha=alpha,
            seed=seed,
            batch_size=cfg.train.batch_size,
            learning_rate=cfg.train.learning_rate,
        )
        t0 = time.time()
        logger.info("training %s agent (%d epochs)...", alpha_tag(alpha), cfg.train.epochs)
        best, records = policy.train(
            net, paths["train"], train_cfg, paths["valid"], contract, params
        )
        meta = {
            "alpha": alpha,
            "seed": seed,
            "train_config": asdict(train_cfg),
            "v0": v0,
            "market": params.to_dict(),
            "sigma1": cfg.market.sigma1,
            "best_valid_cvar": min(r.valid_cvar for r in records),
            "runtime_seconds": time.time() - t0,
        }
        policy.save_checkpoint(best, ckpt, meta)
        policy.write_training_log(records, run.training_log(alpha))
        logger.info("%s -> %s (%.0fs)", alpha_tag(alpha), ckpt, time.time() - t0)
    run.update_manifest(cfg, "train")
    return EXIT_OK


def _comparisons(cfg: RunConfig, run: RunDir, alphas: list[float]):
    params = cfg.market.params()
    test = load_paths(run, ["test"])["test"]
    v0 = load_price(run)["price"]
    surface = load_surface(run)
    contract = make_contract(cfg, v0)
    nets = load_agents(run, alphas, cfg.contract.leverage_cap)
    agents = {
        a: policy.DeepPolicyRule(net, tag=f"deep_{alpha_tag(a)}")
        for a, net in nets.items()
    }
    delta_rule = pricing.DeltaHedgeRule(surface, cfg.contract.strike)
    delta_ledger, comps = analysis.compare_strategies(
        agents, delta_rule, test, contract, params
    )
    return params, test, contract, delta_ledger, comps


def cmd_evaluate(args) -> int:
    cfg = build_config(args)
    run = RunDir(resolve_out_dir(args, cfg))
    run.ensure()
    alphas = requested_alphas(args, cfg)
    params, test, contract, delta_ledger, comps = _comparisons(cfg, run, alphas)
    rows = [risk.RiskReport.csv_header()]
    for alpha, comp in comps.items():
        deep_report = risk.report_from_errors(
            comp.deep_ledger.terminal_error, alpha, comp.deep_ledger.strategy_tag
        )
        delta_report = risk.report_from_errors(
            delta_ledger.terminal_error, alpha, "delta"
        )
        for rep in (deep_report, delta_report):
            rep.to_json(run.reports / f"risk_{rep.strategy_tag}_{alpha_tag(alpha)}.json")
            rows.append(rep.csv_row())
        print(
            f"{alpha_tag(alpha)}: deep cvar {deep_report.cvar_hat:.4f} "
            f"delta cvar {delta_report.cvar_hat:.4f}"
        )
        if args.export_ledgers:
            comp.deep_ledger.save(run.reports / f"ledger_deep_{alpha_tag(alpha)}.hllg")
            comp.deep_ledger.to_csv(
                run.reports / f"ledger_deep_{alpha_tag(alpha)}.csv", test
            )
    if args.export_ledgers:
        delta_ledger.save(run.reports / "ledger_delta.hllg")
        delta_ledger.to_csv(run.reports / "ledger_delta.csv", test)
    (run.reports / "risk_summary.csv").write_text("\n".join(rows) + "\n")
    run.update_manifest(cfg, "evaluate")
    return EXIT_OK


def cmd_arbtest(args) -> int:
    cfg = build_config(args)
    run = RunDir(resolve_out_dir(args, cfg))
    run.ensure()
    alphas = requested_alphas(args, cfg)
    params, test, contract, delta_ledger, comps = _comparisons(cfg, run, alphas)
    verdicts = {}
    for alpha, comp in comps.items():
        rep = risk.report_from_pnl(
            comp.diff_ledger.terminal_value, alpha, comp.diff_ledger.strategy_tag
        )
        rep.to_json(run.reports / f"arbtest_{alpha_tag(alpha)}.json")
        verdicts[alpha] = rep
        print(
            f"{alpha_tag(alpha)}: rho(-pnl) {rep.cvar_hat: .4f} "
            f"mean {rep.mean: .4f} stat-arb: {rep.is_stat_arb}"
        )
    run.update_manifest(cfg, "arbtest")
    return EXIT_OK


def sign_checks(
    rows: list[analysis.Table1Row],
    table2: list[tuple[float, analysis.AssociationStats]],
) -> list[tuple[str, bool, str]]:
    """Qualitative reproduction checks on whichever levels are present."""
    checks: list[tuple[str, bool, str]] = []
    assoc = dict(table2)
    for row in rows:
        a = row.alpha
        if a <= 0.5:
            ok = row.risk_diff_neg_pnl < 0.0 and row.mean_diff_pnl > 0.0
            checks.append(
                (
                    f"{alpha_tag(a)}: difference strategy is a statistical arbitrage",
                    ok,
                    f"rho={row.risk_diff_neg_pnl:.3f} (<0), mean={row.mean_diff_pnl:.3f} (>0)",
                )
            )
        if a >= 0.85:
            ok = row.risk_diff_neg_pnl > 0.0 and row.mean_diff_pnl < 0.0
            checks.append(
                (
                    f"{alpha_tag(a)}: difference strategy is not a statistical arbitrage",
                    ok,
                    f"rho={row.risk_diff_neg_pnl:.3f} (>0), mean={row.mean_diff_pnl:.3f} (<0)",
                )
            )
            checks.append(
                (
                    f"{alpha_tag(a)}: deep hedging improves on delta hedging",
                    row.risk_gap < 0.0,
                    f"risk gap={row.risk_gap:.3f} (<0)",
                )
            )
        if a in assoc:
            st = assoc[a]
            if a >= 0.95:
                checks.append(
                    (
                        f"{alpha_tag(a)}: positions strongly associated with delta",
                        st.spearman > 0.9 and st.r2 > 0.6,
                        f"spearman={st.spearman:.3f} (>0.9), R2={st.r2:.3f} (>0.6)",
                    )
                )
            if a <= 0.01:
                checks.append(
                    (
                        f"{alpha_tag(a)}: positions unrelated to delta",
                        st.spearman < 0.1 and st.r2 < 0.1,
                        f"spearman={st.spearman:.3f} (<0.1), R2={st.r2:.3f} (<0.1)",
                    )
                )
    return checks


def cmd_report(args) -> int:
    cfg = build_config(args)
    run = RunDir(resolve_out_dir(args, cfg))
    run.ensure()
    alphas = requested_alphas(args, cfg)
    params, test, contract, delta_ledger, comps = _comparisons(cfg, run, alphas)
    rows = [c.table1_row(delta_ledger.terminal_error) for c in comps.values()]
    table2 = analysis.build_table2(comps, delta_ledger)

    analysis.render_table1_csv(rows, run.reports / "table1.csv")
    (run.reports / "table1.txt").write_text(analysis.render_table1_text(rows))
    analysis.render_table2_csv(table2, run.reports / "table2.csv")
    (run.reports / "table2.txt").write_text(analysis.render_table2_text(table2))

    by_day_lines = ["alpha,day,spearman,r2,kappa0,kappa1"]
    for alpha, comp in comps.items():
        per_day = analysis.association_by_day(
            comp.deep_ledger.positions, delta_ledger.positions
        )
        for day, st in enumerate(per_day):
            if st is None:
                by_day_lines.append(f"{alpha:.4g},{day},,,,")
            else:
                by_day_lines.append(
                    f"{alpha:.4g},{day},{st.spearman:.6f},{st.r2:.6f},"
                    f"{st.kappa0:.6f},{st.kappa1:.6f}"
                )
    (run.reports / "association_by_day.csv").write_text("\n".join(by_day_lines) + "\n")

    pnl_by_alpha = {}
    for alpha, comp in comps.items():
        pnl = comp.diff_ledger.terminal_value
        counts, edges = analysis.pnl_histogram(pnl, bins=args.bins)
        analysis.write_histogram_csv(
            counts, edges, run.reports / f"pnl_hist_{alpha_tag(alpha)}.csv"
        )
        np.savetxt(run.reports / f"pnl_{alpha_tag(alpha)}.csv", pnl, fmt="%r")
        pnl_by_alpha[alpha] = pnl

    figures.pnl_distribution_figure(
        pnl_by_alpha, run.figures / "pnl_distributions.png", bins=args.bins
    )
    figures.delta_surface_figure(
        load_surface(run), run.figures / "delta_surface.png"
    )
    logs = {}
    for alpha in comps:
        log_file = run.training_log(alpha)
        if log_file.exists():
            recs = []
            for line in log_file.read_text().splitlines()[1:]:
                e, tl, vc, wt = line.split(",")
                recs.append(
                    policy.EpochRecord(int(e), float(tl), float(vc), float(wt))
                )
            logs[alpha] = recs
    if logs:
        figures.training_curves_figure(logs, run.figures / "training_curves.png")

    print(analysis.render_table1_text(rows))
    print(analysis.render_table2_text(table2))
    checks = sign_checks(rows, table2)
    all_ok = True
    for name, ok, detail in checks:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        all_ok &= ok
    run.update_manifest(cfg, "report")
    if not checks:
        logger.warning("no sign checks were applicable to the reported levels")
    return EXIT_OK if all_ok else EXIT_FAIL


def cmd_print_config(args) -> int:
    cfg = build_config(args)
    d = cfg.to_dict()
    print(json.dumps(d, indent=2))
    print()
    print("# defaults")
    for dotted, note in FIELD_NOTES.items():
        block, key = dotted.split(".")
        print(f"#   {dotted} = {d[block][key]!r}: {note}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hedgelab",
        description="GJR-GARCH deep hedging vs delta hedging experiment pipeline",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser, alphas: bool = False) -> None:
        p.add_argument("--config", help="JSON config overriding profile defaults")
        p.add_argument(
            "--profile", choices=("desk", "full"), default="full",
            help="experiment scale (default: full)",
        )
        p.add_argument("--out", help=f"run directory (default: ${OUT_ENV_VAR}/<profile>)")
        p.add_argument("--seed", type=int, help="re-derive all stage seeds from this base")
        p.add_argument("--workers", type=int, help="worker threads for simulation stages")
        p.add_argument("--force", action="store_true", help="overwrite existing artifacts")
        if alphas:
            p.add_argument(
                "--alpha", type=float, action="append",
                help="confidence level (repeatable; default: config list)",
            )

    add_common(sub.add_parser("simulate", help="write train/valid/test path files"))
    p = sub.add_parser("calibrate", help="fit market parameters from a returns CSV")
    add_common(p)
    p.add_argument("--returns", required=True, help="single-column CSV of daily log-returns")
    add_common(sub.add_parser("price", help="Monte Carlo initial call price"))
    add_common(sub.add_parser("surface", help="precompute the hedge-ratio surface"))
    add_common(sub.add_parser("train", help="train one agent per confidence level"), alphas=True)
    p = sub.add_parser("evaluate", help="risk reports for deep and delta hedging")
    add_common(p, alphas=True)
    p.add_argument("--export-ledgers", action="store_true", help="dump rollout ledgers")
    add_common(sub.add_parser("arbtest", help="statistical-arbitrage verdict of the overlay"), alphas=True)
    p = sub.add_parser("report", help="tables, histograms, figures, sign checks")
    add_common(p, alphas=True)
    p.add_argument("--bins", type=int, default=120, help="histogram bins")
    add_common(sub.add_parser("print-config", help="show the resolved configuration"))
    return parser


_COMMANDS = {
    "simulate": cmd_simulate,
    "calibrate": cmd_calibrate,
    "price": cmd_price,
    "surface": cmd_surface,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "arbtest": cmd_arbtest,
    "report": cmd_report,
    "print-config": cmd_print_config,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = make_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArtifactMissing as exc:
        print(exc, file=sys.stderr)
        return EXIT_MISSING
    except FormatError as exc:
        print(f"corrupt artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
