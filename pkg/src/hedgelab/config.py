"""Run configuration: JSON-serializable blocks with full experiment defaults.

Two built-in profiles: ``full`` is the headline experiment scale (400k
training paths, 50 epochs); ``desk`` runs the same pipeline in minutes
(50k paths, 10 epochs) and is what the acceptance suite uses.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .market import DEFAULT_SIGMA1, GarchParams, TRADING_DAYS


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass(frozen=True)
class MarketConfig:
    mu: float = 0.0006
    omega: float = 1e-6
    alpha: float = 0.11
    gamma: float = 0.20
    beta: float = 0.78
    r: float = 0.0266
    q: float = 0.0177
    lambda_: float = 1.0 / TRADING_DAYS
    sigma1: float = DEFAULT_SIGMA1

    def params(self) -> GarchParams:
        return GarchParams(
            mu=self.mu,
            omega=self.omega,
            alpha=self.alpha,
            gamma=self.gamma,
            beta=self.beta,
            r=self.r,
            q=self.q,
            lambda_=self.lambda_,
        )


@dataclass(frozen=True)
class ContractConfig:
    s0: float = 100.0
    strike: float = 100.0
    maturity_days: int = 63
    leverage_cap: float = 100.0


@dataclass(frozen=True)
class McConfig:
    price_paths: int = 200_000
    price_seed: int = 410_100
    inner_paths: int = 50_000
    surface_seed: int = 410_200
    moneyness_lo: float = 0.6
    moneyness_hi: float = 1.6
    moneyness_points: int = 41
    vol_lo_mult: float = 0.2
    vol_hi_mult: float = 5.0
    vol_points: int = 21


@dataclass(frozen=True)
class TrainBlock:
    batch_size: int = 1000
    learning_rate: float = 5e-4
    epochs: int = 50
    alphas: tuple[float, ...] = (0.01, 0.05, 0.10, 0.20, 0.50, 0.85, 0.90, 0.95)
    seed: int = 410_300


@dataclass(frozen=True)
class PathsConfig:
    n_train: int = 400_000
    n_valid: int = 20_000
    n_test: int = 100_000
    seed_train: int = 410_001
    seed_valid: int = 410_002
    seed_test: int = 410_003


@dataclass(frozen=True)
class RunConfig:
    market: MarketConfig = field(default_factory=MarketConfig)
    contract: ContractConfig = field(default_factory=ContractConfig)
    mc: McConfig = field(default_factory=McConfig)
    train: TrainBlock = field(default_factory=TrainBlock)
    paths: PathsConfig = field(default_factory=PathsConfig)
    out_dir: str | None = None
    workers: int = 1
    profile: str = "full"

    def validate(self) -> None:
        if not self.train.alphas:
            raise ConfigError("train.alphas must be non-empty")
        for a in self.train.alphas:
            if not 0.0 < a < 1.0:
                raise ConfigError(f"alpha {a} outside (0, 1)")
        for name, value in (
            ("paths.n_train", self.paths.n_train),
            ("paths.n_valid", self.paths.n_valid),
            ("paths.n_test", self.paths.n_test),
            ("mc.price_paths", self.mc.price_paths),
            ("mc.inner_paths", self.mc.inner_paths),
            ("train.batch_size", self.train.batch_size),
            ("contract.maturity_days", self.contract.maturity_days),
        ):
            if value < 1:
                raise ConfigError(f"{name} must be positive")
        if self.mc.price_paths % 2:
            raise ConfigError("mc.price_paths must be even (antithetic pairing)")
        if self.market.sigma1 <= 0.0:
            raise ConfigError("market.sigma1 must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.mc.moneyness_points < 4 or self.mc.vol_points < 4:
            raise ConfigError("surface grids need at least 4 points")
        try:
            self.market.params()
        except ValueError as exc:
            raise ConfigError(f"market block invalid: {exc}") from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"]["alphas"] = list(self.train.alphas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        kwargs = {}
        for key, sub_cls in (
            ("market", MarketConfig),
            ("contract", ContractConfig),
            ("mc", McConfig),
            ("train", TrainBlock),
            ("paths", PathsConfig),
        ):
            if key in d:
                block = dict(d.pop(key))
                if key == "train" and "alphas" in block:
                    block["alphas"] = tuple(block["alphas"])
                kwargs[key] = sub_cls(**block)
        kwargs.update(d)
        return cls(**kwargs)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


DESK_OVERRIDES = dict(
    paths=PathsConfig(
        n_train=50_000, n_valid=10_000, n_test=20_000,
        seed_train=410_001, seed_valid=410_002, seed_test=410_003,
    ),
    train=TrainBlock(epochs=10, alphas=(0.01, 0.20, 0.90, 0.95)),
    profile="desk",
)


def profile_config(profile: str) -> RunConfig:
    if profile == "full":
        return RunConfig()
    if profile == "desk":
        return replace(RunConfig(), **DESK_OVERRIDES)
    raise ConfigError(f"unknown profile '{profile}' (expected 'desk' or 'full')")


def load_config(
    path: str | Path | None = None, profile: str = "full"
) -> RunConfig:
    """Profile defaults, overridden block-by-block from a JSON file if given."""
    cfg = profile_config(profile)
    if path is not None:
        try:
            overrides = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        base = cfg.to_dict()
        for key, value in overrides.items():
            if key not in base:
                raise ConfigError(f"unknown config key '{key}'")
            if isinstance(base[key], dict):
                if not isinstance(value, dict):
                    raise ConfigError(f"config key '{key}' must be an object")
                unknown = set(value) - set(base[key])
                if unknown:
                    raise ConfigError(f"unknown keys in '{key}': {sorted(unknown)}")
                base[key].update(value)
            else:
                base[key] = value
        try:
            cfg = RunConfig.from_dict(base)
        except TypeError as exc:
            raise ConfigError(f"bad config structure: {exc}") from exc
    cfg.validate()
    return cfg


#: One-line description per default, printed by the CLI's print-config.
FIELD_NOTES = {
    "market.mu": "daily drift of log-returns (decimal/day)",
    "market.omega": "variance intercept (daily variance units)",
    "market.alpha": "symmetric shock loading",
    "market.gamma": "extra loading on negative shocks (leverage effect)",
    "market.beta": "variance persistence",
    "market.r": "annualized continuously compounded risk-free rate",
    "market.q": "annualized dividend yield",
    "market.lambda_": "year fraction per step (1/252)",
    "market.sigma1": "initial daily volatility (pins the ATM price near 3.16)",
    "contract.s0": "initial asset price",
    "contract.strike": "call strike (ATM by default)",
    "contract.maturity_days": "steps to maturity",
    "contract.leverage_cap": "max cash borrowing in the hedge account",
    "mc.price_paths": "antithetic paths for the initial price",
    "mc.inner_paths": "nested paths per hedge-ratio surface node",
    "train.batch_size": "mini-batch size",
    "train.learning_rate": "Adam learning rate",
    "train.epochs": "training epochs (best validation epoch is kept)",
    "train.alphas": "CVaR confidence levels to train agents for",
    "paths.n_train": "training paths",
    "paths.n_valid": "validation paths (best-epoch selection)",
    "paths.n_test": "held-out evaluation paths",
}
