"""GJR-GARCH(1,1) market: simulation under both measures and ML calibration.

Daily log-returns under the physical measure follow

    R_t = mu + sigma_t * eps_t
    sigma_{t+1}^2 = omega + sigma_t^2 * (alpha + gamma * 1{eps_t < 0}) * eps_t^2
                    + beta * sigma_t^2

with iid standard normal innovations.  The risk-neutral counterpart replaces
the return drift with ``(r - q) * lambda_ - sigma_t^2 / 2`` and shifts the
innovation entering the variance recursion by

    eta_t = (mu - (r - q) * lambda_ + sigma_t^2 / 2) / sigma_t

so that the variance filter sees the same shocks under both measures and
discounted dividend-adjusted prices are martingales.
"""

from __future__ import annotations

import csv
import enum
import io
import logging
import math
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import optimize

from . import rng

logger = logging.getLogger(__name__)

TRADING_DAYS = 252
PATHSET_MAGIC = b"HLPS"
PATHSET_VERSION = 1


class FormatError(RuntimeError):
    """A persisted artifact failed magic/version validation."""


class Measure(enum.Enum):
    P = 0
    Q = 1


@dataclass(frozen=True)
class GarchParams:
    """GJR-GARCH(1,1) coefficients plus market constants.

    mu, omega, alpha, gamma, beta are in daily units; ``r`` and ``q`` are
    annualized continuously compounded rates; ``lambda_`` is the year
    fraction per step.
    """

    mu: float
    omega: float
    alpha: float
    gamma: float
    beta: float
    r: float
    q: float
    lambda_: float = 1.0 / TRADING_DAYS

    def __post_init__(self) -> None:
        for name in ("mu", "omega", "alpha", "gamma", "beta", "r", "q", "lambda_"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.omega <= 0.0:
            raise ValueError("omega must be positive")
        if self.alpha < 0.0 or self.beta < 0.0:
            raise ValueError("alpha and beta must be non-negative")
        # alpha + gamma >= 0 keeps the negative-shock ARCH load non-negative,
        # which is what makes the variance recursion positive for every shock.
        if self.alpha + self.gamma < 0.0:
            raise ValueError("alpha + gamma must be non-negative")
        if self.lambda_ <= 0.0:
            raise ValueError("lambda_ must be positive")
        if self.persistence >= 1.0:
            warnings.warn(
                f"non-stationary parameters: alpha + gamma/2 + beta = "
                f"{self.persistence:.6f} >= 1",
                stacklevel=2,
            )

    @property
    def persistence(self) -> float:
        return self.alpha + self.gamma / 2.0 + self.beta

    @property
    def stationary_variance(self) -> float:
        denom = 1.0 - self.persistence
        if denom <= 0.0:
            raise ValueError("stationary variance undefined: persistence >= 1")
        return self.omega / denom

    @property
    def stationary_vol(self) -> float:
        return math.sqrt(self.stationary_variance)

    def to_dict(self) -> dict:
        return {
            "mu": self.mu,
            "omega": self.omega,
            "alpha": self.alpha,
            "gamma": self.gamma,
            "beta": self.beta,
            "r": self.r,
            "q": self.q,
            "lambda_": self.lambda_,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GarchParams":
        return cls(**{k: float(v) for k, v in d.items()})


#: Daily S&P 500 fit (2016-2020) used as the default market everywhere.
#: omega is in daily-variance units; the stationary volatility is 1% a day,
#: about 15.9% annualized.
DEFAULT_PARAMS = GarchParams(
    mu=0.0006,
    omega=1e-6,
    alpha=0.11,
    gamma=0.20,
    beta=0.78,
    r=0.0266,
    q=0.0177,
)

#: Default initial daily volatility: 10% above the long-run level of 1%/day,
#: which pins the default-market 63-day ATM call price at 3.16-3.19.
DEFAULT_SIGMA1 = 0.011


@dataclass
class PathSet:
    """Simulated price/volatility paths plus generation metadata.

    ``prices[:, t]`` is the asset price at day ``t`` for ``t = 0..T``.
    ``vols[:, t]`` is the daily volatility of the *next* return, i.e. the
    volatility known at day ``t``; column 0 therefore equals ``sigma1``.
    """

    prices: np.ndarray
    vols: np.ndarray
    measure: Measure
    seed: int
    s0: float
    sigma1: float

    def __post_init__(self) -> None:
        if self.prices.shape != self.vols.shape:
            raise ValueError("prices and vols must have identical shapes")
        if self.prices.ndim != 2 or self.prices.shape[1] < 2:
            raise ValueError("paths need at least one step")

    @property
    def n_paths(self) -> int:
        return self.prices.shape[0]

    @property
    def n_steps(self) -> int:
        return self.prices.shape[1] - 1

    def take(self, index: np.ndarray) -> "PathSet":
        """Sub-PathSet holding the selected paths (rows)."""
        return PathSet(
            prices=self.prices[index],
            vols=self.vols[index],
            measure=self.measure,
            seed=self.seed,
            s0=self.s0,
            sigma1=self.sigma1,
        )

    def validate(self) -> None:
        if not np.all(self.prices[:, 0] == self.s0):
            raise ValueError("prices[:, 0] must equal s0")
        if not np.all(self.vols[:, 0] == self.sigma1):
            raise ValueError("vols[:, 0] must equal sigma1")
        if not (np.all(self.prices > 0.0) and np.all(self.vols > 0.0)):
            raise ValueError("prices and vols must be strictly positive")

    def save(self, path: str | Path) -> None:
        path = Path(path)
        header = struct.pack(
            "<4sIBQQQdd",
            PATHSET_MAGIC,
            PATHSET_VERSION,
            self.measure.value,
            self.seed,
            self.n_paths,
            self.n_steps,
            self.s0,
            self.sigma1,
        )
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(self.prices, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.vols, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "PathSet":
        path = Path(path)
        head_size = struct.calcsize("<4sIBQQQdd")
        with open(path, "rb") as fh:
            head = fh.read(head_size)
            if len(head) < head_size:
                raise FormatError(f"{path}: truncated header")
            magic, version, measure, seed, n_paths, n_steps, s0, sigma1 = struct.unpack(
                "<4sIBQQQdd", head
            )
            if magic != PATHSET_MAGIC:
                raise FormatError(f"{path}: bad magic {magic!r}, expected {PATHSET_MAGIC!r}")
            if version != PATHSET_VERSION:
                raise FormatError(f"{path}: unsupported version {version}")
            n_cols = n_paths * (n_steps + 1)
            raw = fh.read(2 * n_cols * 8)
            if len(raw) != 2 * n_cols * 8:
                raise FormatError(f"{path}: truncated body")
            body = np.frombuffer(raw, dtype="<f8")
        prices = body[:n_cols].reshape(n_paths, n_steps + 1).copy()
        vols = body[n_cols:].reshape(n_paths, n_steps + 1).copy()
        return cls(
            prices=prices,
            vols=vols,
            measure=Measure(measure),
            seed=int(seed),
            s0=float(s0),
            sigma1=float(sigma1),
        )

    def to_csv(self, path: str | Path) -> None:
        """Long-form dump (path_id, t, price, vol) for eyeballing."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["path_id", "t", "price", "vol"])
            for i in range(self.n_paths):
                for t in range(self.n_steps + 1):
                    writer.writerow([i, t, repr(float(self.prices[i, t])), repr(float(self.vols[i, t]))])


def step_variance_p(sigma2_t, eps_t, params: GarchParams):
    """One physical-measure variance update; vectorizes over inputs."""
    sigma2_t = np.asarray(sigma2_t, dtype=np.float64)
    eps_t = np.asarray(eps_t, dtype=np.float64)
    if not (np.all(np.isfinite(sigma2_t)) and np.all(np.isfinite(eps_t))):
        raise ValueError("non-finite inputs")
    if np.any(sigma2_t <= 0.0):
        raise ValueError("sigma2_t must be positive")
    arch = params.alpha + params.gamma * (eps_t < 0.0)
    out = params.omega + sigma2_t * arch * eps_t**2 + params.beta * sigma2_t
    return out if out.ndim else float(out)


# Numerical guards for the far tail of the risk-neutral dynamics: the
# innovation shift eta grows like sigma/2, which makes the Q variance
# recursion explosive once daily volatility passes ~100%.  Paths out there
# have prices collapsing to zero and contribute nothing to any estimator,
# but the raw arithmetic would overflow to inf/NaN.  The caps are far beyond
# anything reachable from realistic starting volatilities.
_VARIANCE_CAP = 100.0  # daily sigma capped at 1000%
_LOG_PRICE_FLOOR = -700.0  # keeps exp(log_s) strictly positive


def _simulate_block(
    params: GarchParams,
    s0: float,
    sigma1: float,
    eps: np.ndarray,
    risk_neutral: bool,
) -> tuple[np.ndarray, np.ndarray]:
    """Run the return/variance recursion on one block of innovation rows."""
    n_paths, n_steps = eps.shape
    prices = np.empty((n_paths, n_steps + 1))
    vols = np.empty((n_paths, n_steps + 1))
    prices[:, 0] = s0
    vols[:, 0] = sigma1
    carry = (params.r - params.q) * params.lambda_
    sigma2 = np.full(n_paths, sigma1**2)
    log_s = np.full(n_paths, math.log(s0))
    for t in range(n_steps):
        sigma = np.sqrt(sigma2)
        e = eps[:, t]
        if risk_neutral:
            log_s = np.maximum(log_s + carry - sigma2 / 2.0 + sigma * e, _LOG_PRICE_FLOOR)
            # The variance filter runs on the physical-measure shock, which
            # under Q is the drawn innovation shifted by eta_t.
            eta = (params.mu - carry + sigma2 / 2.0) / sigma
            shock = e - eta
        else:
            log_s = np.maximum(log_s + params.mu + sigma * e, _LOG_PRICE_FLOOR)
            shock = e
        arch = params.alpha + params.gamma * (shock < 0.0)
        sigma2 = np.minimum(
            params.omega + sigma2 * arch * shock**2 + params.beta * sigma2,
            _VARIANCE_CAP,
        )
        prices[:, t + 1] = np.exp(log_s)
        vols[:, t + 1] = np.sqrt(sigma2)
    return prices, vols


def _simulate(
    params: GarchParams,
    s0: float,
    sigma1: float,
    n_steps: int,
    n_paths: int,
    seed: int,
    risk_neutral: bool,
    innovations: np.ndarray | None,
    workers: int,
) -> PathSet:
    if n_steps < 1 or n_paths < 1:
        raise ValueError("n_steps and n_paths must be at least 1")
    if s0 <= 0.0:
        raise ValueError("s0 must be positive")
    if sigma1 <= 0.0:
        raise ValueError("sigma1 must be positive")

    if innovations is not None:
        innovations = np.asarray(innovations, dtype=np.float64)
        if innovations.shape != (n_paths, n_steps):
            raise ValueError("innovations must have shape (n_paths, n_steps)")
        prices, vols = _simulate_block(params, s0, sigma1, innovations, risk_neutral)
    else:
        prices = np.empty((n_paths, n_steps + 1))
        vols = np.empty((n_paths, n_steps + 1))
        block = 65536

        def run(lo: int, hi: int) -> None:
            eps = rng.normal_block(seed, lo, hi - lo, n_steps)
            prices[lo:hi], vols[lo:hi] = _simulate_block(
                params, s0, sigma1, eps, risk_neutral
            )

        bounds = [(lo, min(lo + block, n_paths)) for lo in range(0, n_paths, block)]
        if workers > 1 and len(bounds) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(lambda b: run(*b), bounds))
        else:
            for lo, hi in bounds:
                run(lo, hi)

    return PathSet(
        prices=prices,
        vols=vols,
        measure=Measure.Q if risk_neutral else Measure.P,
        seed=seed,
        s0=s0,
        sigma1=sigma1,
    )


def simulate_p(
    params: GarchParams,
    s0: float,
    sigma1: float,
    n_steps: int,
    n_paths: int,
    seed: int,
    innovations: np.ndarray | None = None,
    workers: int = 1,
) -> PathSet:
    """Simulate physical-measure paths.

    ``innovations`` overrides the random draws (same shape as the innovation
    matrix) for deterministic tests.
    """
    return _simulate(
        params, s0, sigma1, n_steps, n_paths, seed, False, innovations, workers
    )


def simulate_q(
    params: GarchParams,
    s0: float,
    sigma1: float,
    n_steps: int,
    n_paths: int,
    seed: int,
    innovations: np.ndarray | None = None,
    workers: int = 1,
) -> PathSet:
    """Simulate risk-neutral paths; see the module docstring for the dynamics."""
    return _simulate(
        params, s0, sigma1, n_steps, n_paths, seed, True, innovations, workers
    )


def log_likelihood(params: GarchParams, returns: np.ndarray, sigma1: float) -> float:
    """Gaussian log-likelihood of a return series with the variance filter run forward."""
    returns = np.asarray(returns, dtype=np.float64)
    if returns.size == 0:
        raise ValueError("returns must be non-empty")
    if not np.all(np.isfinite(returns)):
        raise ValueError("returns must be finite")
    if sigma1 <= 0.0:
        raise ValueError("sigma1 must be positive")
    mu, omega, alpha, gamma, beta = (
        params.mu,
        params.omega,
        params.alpha,
        params.gamma,
        params.beta,
    )
    sigma2 = sigma1 * sigma1
    ll = 0.0
    log_2pi = math.log(2.0 * math.pi)
    for x in returns.tolist():
        if sigma2 <= 0.0:
            raise FloatingPointError("variance filter left the positive domain")
        resid = x - mu
        ll -= 0.5 * (log_2pi + math.log(sigma2)) + resid * resid / (2.0 * sigma2)
        eps = resid / math.sqrt(sigma2)
        arch = alpha + (gamma if eps < 0.0 else 0.0)
        sigma2 = omega + sigma2 * arch * eps * eps + beta * sigma2
    return ll


@dataclass(frozen=True)
class CalibrationBounds:
    """Box constraints for the calibration search space."""

    mu: tuple[float, float] = (-0.01, 0.01)
    omega: tuple[float, float] = (1e-12, 1e-2)
    persistence_max: float = 0.9999


class CalibrationError(RuntimeError):
    """Optimizer failed to converge; ``best`` holds the best iterate found."""

    def __init__(self, message: str, best: GarchParams):
        super().__init__(message)
        self.best = best


def _logit(p: float) -> float:
    p = min(max(p, 1e-12), 1.0 - 1e-12)
    return math.log(p / (1.0 - p))


def _sigmoid(z: np.ndarray | float):
    return 1.0 / (1.0 + np.exp(-np.asarray(z, dtype=np.float64)))


def _coeffs_from_z(z, bounds: CalibrationBounds):
    """Map unconstrained coordinates to feasible raw coefficients.

    Positivity comes from the log/logit transforms and stationarity from
    parameterizing total persistence directly, so every iterate the optimizer
    visits is a valid parameter set.
    """
    mu = float(z[0])
    omega = math.exp(float(z[1]))
    p = float(_sigmoid(z[2])) * bounds.persistence_max  # alpha + gamma/2 + beta
    f = float(_sigmoid(z[3]))  # share of p taken by alpha + gamma/2
    g = float(_sigmoid(z[4]))  # share of alpha + gamma/2 taken by gamma/2
    x = p * f
    beta = p - x
    half_gamma = x * g
    alpha = x - half_gamma
    return mu, omega, alpha, 2.0 * half_gamma, beta


def calibrate(
    returns: np.ndarray,
    init: GarchParams = DEFAULT_PARAMS,
    bounds: CalibrationBounds = CalibrationBounds(),
) -> GarchParams:
    """Maximum-likelihood GJR-GARCH fit of a daily log-return series.

    Box-constrained L-BFGS-B runs in transformed coordinates (log variance
    intercept, logistic persistence shares); ``r``, ``q`` and ``lambda_`` are
    carried over from ``init`` untouched.  Raises :class:`CalibrationError`
    with the best iterate attached if the optimizer does not converge.
    """
    returns = np.asarray(returns, dtype=np.float64)
    if returns.size == 0:
        raise ValueError("returns must be non-empty")
    if returns.size < 250:
        warnings.warn("fewer than 250 observations: estimates will be unstable")

    p0 = min(init.persistence, bounds.persistence_max * (1.0 - 1e-6))
    x0 = init.alpha + init.gamma / 2.0
    z0 = np.array(
        [
            min(max(init.mu, bounds.mu[0]), bounds.mu[1]),
            math.log(min(max(init.omega, bounds.omega[0]), bounds.omega[1])),
            _logit(p0 / bounds.persistence_max),
            _logit(x0 / p0 if p0 > 0 else 0.5),
            _logit((init.gamma / 2.0) / x0 if x0 > 0 else 0.5),
        ]
    )
    z_bounds = [
        bounds.mu,
        (math.log(bounds.omega[0]), math.log(bounds.omega[1])),
        (-30.0, 30.0),
        (-30.0, 30.0),
        (-30.0, 30.0),
    ]

    n = returns.size

    def neg_mean_ll(z: np.ndarray) -> float:
        mu, omega, alpha, gamma, beta = _coeffs_from_z(z, bounds)
        candidate = replace(
            init, mu=mu, omega=omega, alpha=alpha, gamma=gamma, beta=beta
        )
        sigma1 = candidate.stationary_vol
        return -log_likelihood(candidate, returns, sigma1) / n

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        result = optimize.minimize(
            neg_mean_ll,
            z0,
            method="L-BFGS-B",
            bounds=z_bounds,
            options={"ftol": 1e-12, "gtol": 1e-8, "maxiter": 500},
        )
    mu, omega, alpha, gamma, beta = _coeffs_from_z(result.x, bounds)
    fitted = replace(init, mu=mu, omega=omega, alpha=alpha, gamma=gamma, beta=beta)
    if not result.success:
        raise CalibrationError(
            f"calibration did not converge: {result.message}", best=fitted
        )
    logger.info(
        "calibrated params: mu=%.3e omega=%.3e alpha=%.4f gamma=%.4f beta=%.4f "
        "(mean log-likelihood %.6f)",
        mu,
        omega,
        alpha,
        gamma,
        beta,
        -result.fun,
    )
    return fitted


def read_returns_csv(path: str | Path) -> np.ndarray:
    """Read a single-column CSV of daily log-returns; a header row is optional."""
    values: list[float] = []
    with open(path, "r", newline="") as fh:
        for row_no, row in enumerate(csv.reader(fh)):
            if not row or not row[0].strip():
                continue
            try:
                values.append(float(row[0]))
            except ValueError:
                if row_no == 0:
                    continue  # header
                raise ValueError(f"{path}: non-numeric value on line {row_no + 1}")
    if not values:
        raise ValueError(f"{path}: no return observations found")
    return np.asarray(values)
