"""Feedforward hedging policy trained on the empirical CVaR of its hedging error.

Architecture: 4 -> 56 -> 56 -> 56 -> 56 -> 1, ReLU hidden activations, and a
leverage-capped output ``delta = min(Z, (V_t + B) / S_t)`` that keeps the
implied cash balance above ``-B``.  Inputs are the standardized state
``(V_t, log S_t, sigma_{t+1}, tau)``.

Gradients are exact reverse-mode derivatives of the batch CVaR estimator,
back-propagated through every step of the self-financing recursion: a position
moves the portfolio value, which feeds both the next feature vector and the
next leverage cap.  Optimization is mini-batch SGD with Adam.
"""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import risk
from .hedging import Contract, PositionRule, rollout, step_value
from .market import FormatError, GarchParams, Measure, PathSet

logger = logging.getLogger(__name__)

N_FEATURES = 4
HIDDEN_WIDTH = 56
N_HIDDEN = 4
LAYER_DIMS = (
    [(N_FEATURES, HIDDEN_WIDTH)]
    + [(HIDDEN_WIDTH, HIDDEN_WIDTH)] * (N_HIDDEN - 1)
    + [(HIDDEN_WIDTH, 1)]
)

CHECKPOINT_MAGIC = b"HLNN"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Loss or parameters left the finite domain during training."""


@dataclass
class PolicyNetwork:
    """Weights, leverage bound and feature standardization of one policy."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    leverage_cap: float
    feat_mean: np.ndarray
    feat_scale: np.ndarray

    def __post_init__(self) -> None:
        dims = [w.shape for w in self.weights]
        if dims != LAYER_DIMS:
            raise ValueError(f"unexpected layer shapes {dims}, want {LAYER_DIMS}")
        for w, b in zip(self.weights, self.biases):
            if b.shape != (w.shape[1],):
                raise ValueError("bias shapes must match weight fan-out")
        if self.feat_mean.shape != (N_FEATURES,) or self.feat_scale.shape != (N_FEATURES,):
            raise ValueError("feature stats must have one entry per feature")
        if np.any(self.feat_scale <= 0.0):
            raise ValueError("feature scales must be positive")

    def copy(self) -> "PolicyNetwork":
        return PolicyNetwork(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            leverage_cap=self.leverage_cap,
            feat_mean=self.feat_mean.copy(),
            feat_scale=self.feat_scale.copy(),
        )

    @property
    def has_default_feature_stats(self) -> bool:
        return bool(
            np.all(self.feat_mean == 0.0) and np.all(self.feat_scale == 1.0)
        )

    def standardize(self, features: np.ndarray) -> np.ndarray:
        return (features - self.feat_mean) / self.feat_scale

    def unstandardize(self, standardized: np.ndarray) -> np.ndarray:
        return standardized * self.feat_scale + self.feat_mean

    def all_finite(self) -> bool:
        return all(
            np.all(np.isfinite(a)) for a in (*self.weights, *self.biases)
        )


def glorot_init(seed: int, leverage_cap: float = 100.0) -> PolicyNetwork:
    """Uniform(+-sqrt(6/(fan_in+fan_out))) weights, zero biases, identity stats."""
    gen = np.random.Generator(np.random.Philox(key=seed))
    weights = []
    biases = []
    for fan_in, fan_out in LAYER_DIMS:
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(gen.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return PolicyNetwork(
        weights=weights,
        biases=biases,
        leverage_cap=leverage_cap,
        feat_mean=np.zeros(N_FEATURES),
        feat_scale=np.ones(N_FEATURES),
    )


def _forward_hidden(net: PolicyNetwork, xhat: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Hidden post-activations and the raw scalar output for a feature batch."""
    h = xhat
    posts = []
    for layer in range(N_HIDDEN):
        h = np.maximum(h @ net.weights[layer] + net.biases[layer], 0.0)
        posts.append(h)
    z = (h @ net.weights[N_HIDDEN] + net.biases[N_HIDDEN])[:, 0]
    return posts, z


def policy_forward(
    net: PolicyNetwork,
    features: np.ndarray,
    s: np.ndarray,
    v: np.ndarray,
) -> np.ndarray:
    """Position for raw feature rows ``(V_t, log S_t, sigma_{t+1}, tau)``.

    The cap ``(v + B) / s`` bounds borrowing only; short positions are not
    constrained.
    """
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if not np.all(np.isfinite(features)):
        raise ValueError("non-finite features")
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0.0):
        raise ValueError("prices must be positive")
    _, z = _forward_hidden(net, net.standardize(features))
    return np.minimum(z, (np.asarray(v, dtype=np.float64) + net.leverage_cap) / s)


class DeepPolicyRule(PositionRule):
    """Hedge-rollout adapter for a (frozen) policy network."""

    def __init__(self, net: PolicyNetwork, tag: str = "deep"):
        self.net = net
        self.tag = tag

    def positions(self, t, s_t, sigma_next, tau, v_t):
        features = np.stack(
            [v_t, np.log(s_t), sigma_next, np.full_like(s_t, float(tau))], axis=1
        )
        return policy_forward(self.net, features, s_t, v_t)


def fit_feature_stats(
    net: PolicyNetwork,
    paths: PathSet,
    contract: Contract,
    params: GarchParams,
    n_pilot: int = 4096,
) -> PolicyNetwork:
    """Standardization statistics from a pilot rollout of the initialized policy.

    Path-driven features (log-price, volatility, maturity) take their pilot
    mean/std; the portfolio value takes its pilot mean but is scaled by the
    initial price, since its training-time dispersion depends on the policy.
    The pilot itself runs under provisional statistics so the initialized
    network sees sanely scaled inputs.
    """
    pilot = paths.take(np.arange(min(n_pilot, paths.n_paths)))
    t_steps = pilot.n_steps
    provisional = net.copy()
    provisional.feat_mean = np.array(
        [contract.v0, math.log(pilot.s0), pilot.sigma1, t_steps / 2.0]
    )
    provisional.feat_scale = np.array(
        [pilot.s0, 0.05, max(pilot.sigma1 / 2.0, 1e-6), t_steps / 4.0]
    )
    ledger = rollout(DeepPolicyRule(provisional, tag="pilot"), pilot, contract, params)

    v_flat = ledger.values[:, :-1].ravel()
    log_s = np.log(pilot.prices[:, :-1]).ravel()
    sig = pilot.vols[:, :-1].ravel()
    tau = np.broadcast_to(
        np.arange(t_steps, 0, -1, dtype=np.float64), (pilot.n_paths, t_steps)
    ).ravel()
    fitted = net.copy()
    fitted.feat_mean = np.array(
        [v_flat.mean(), log_s.mean(), sig.mean(), tau.mean()]
    )
    fitted.feat_scale = np.array(
        [
            pilot.s0,
            max(log_s.std(), 1e-9),
            max(sig.std(), 1e-9),
            max(tau.std(), 1e-9),
        ]
    )
    return fitted


def episode_gradient(
    net: PolicyNetwork,
    batch: PathSet,
    contract: Contract,
    params: GarchParams,
    alpha: float,
) -> tuple[float, tuple[list[np.ndarray], list[np.ndarray]]]:
    """Batch CVaR of the hedging error and its exact parameter gradient.

    Rolls the portfolio recursion forward over the batch, applies the
    empirical CVaR estimator to the terminal errors, and back-propagates its
    subgradient through all time steps.
    """
    if batch.n_paths < 2:
        raise ValueError("batch must contain at least 2 paths")
    if batch.n_steps != contract.n_steps:
        raise ValueError("batch horizon does not match the contract")
    prices, vols = batch.prices, batch.vols
    n, t_steps = batch.n_paths, batch.n_steps
    growth = math.exp(params.r * params.lambda_)
    carry = math.exp(params.q * params.lambda_)
    weights = net.weights
    cap_b = net.leverage_cap
    v_scale = net.feat_scale[0]

    v = np.full(n, contract.v0)
    log_s = np.log(prices)
    saved = []
    for t in range(t_steps):
        s = prices[:, t]
        features = np.stack(
            [v, log_s[:, t], vols[:, t], np.full(n, float(t_steps - t))], axis=1
        )
        xhat = net.standardize(features)
        posts, z = _forward_hidden(net, xhat)
        cap = (v + cap_b) / s
        cap_active = z >= cap
        delta = np.where(cap_active, cap, z)
        u = carry * prices[:, t + 1] - growth * s
        saved.append((xhat, posts, cap_active, s, u))
        v = growth * v + delta * u

    xi = contract.payoff(prices[:, -1]) - v
    loss, dxi, _ = risk.cvar_hat_with_gradient(xi, alpha)

    d_w = [np.zeros_like(w) for w in weights]
    d_b = [np.zeros_like(b) for b in net.biases]
    gv = -dxi  # dL/dV_T
    for t in reversed(range(t_steps)):
        xhat, posts, cap_active, s, u = saved[t]
        gd = gv * u
        gz = np.where(cap_active, 0.0, gd)
        gcap = np.where(cap_active, gd, 0.0)
        g = gz[:, None]
        d_w[N_HIDDEN] += posts[N_HIDDEN - 1].T @ g
        d_b[N_HIDDEN] += g.sum(axis=0)
        g = g @ weights[N_HIDDEN].T
        for layer in range(N_HIDDEN - 1, 0, -1):
            g = g * (posts[layer] > 0.0)
            d_w[layer] += posts[layer - 1].T @ g
            d_b[layer] += g.sum(axis=0)
            g = g @ weights[layer].T
        g = g * (posts[0] > 0.0)
        d_w[0] += xhat.T @ g
        d_b[0] += g.sum(axis=0)
        gx = g @ weights[0].T
        gv = gv * growth + gcap / s + gx[:, 0] / v_scale

    return loss, (d_w, d_b)


@dataclass
class AdamState:
    """First/second moment accumulators mirroring the parameter structure."""

    m_w: list[np.ndarray]
    v_w: list[np.ndarray]
    m_b: list[np.ndarray]
    v_b: list[np.ndarray]
    step: int
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, net: PolicyNetwork, learning_rate: float) -> "AdamState":
        return cls(
            m_w=[np.zeros_like(w) for w in net.weights],
            v_w=[np.zeros_like(w) for w in net.weights],
            m_b=[np.zeros_like(b) for b in net.biases],
            v_b=[np.zeros_like(b) for b in net.biases],
            step=0,
            learning_rate=learning_rate,
        )


def adam_step(
    net: PolicyNetwork,
    grads: tuple[list[np.ndarray], list[np.ndarray]],
    state: AdamState,
) -> None:
    """One bias-corrected Adam update, in place."""
    d_w, d_b = grads
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**state.step
    corr2 = 1.0 - b2**state.step
    scale = state.learning_rate / corr1
    for params, grad, m, v in (
        (net.weights, d_w, state.m_w, state.v_w),
        (net.biases, d_b, state.m_b, state.v_b),
    ):
        for i in range(len(params)):
            m[i] *= b1
            m[i] += (1.0 - b1) * grad[i]
            v[i] *= b2
            v[i] += (1.0 - b2) * grad[i] ** 2
            params[i] -= scale * m[i] / (np.sqrt(v[i] / corr2) + state.eps)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    alpha: float
    seed: int
    batch_size: int = 1000
    learning_rate: float = 5e-4

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0, 1)")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float  # mean batch loss over the last <=100 batches of the epoch
    valid_cvar: float
    wall_time: float


def evaluate_cvar(
    net: PolicyNetwork,
    paths: PathSet,
    contract: Contract,
    params: GarchParams,
    alpha: float,
) -> float:
    """CVaR of the policy's hedging error on a path set (no gradients)."""
    ledger = rollout(DeepPolicyRule(net), paths, contract, params)
    return risk.cvar_hat(ledger.terminal_error, alpha)


def train(
    net: PolicyNetwork,
    train_paths: PathSet,
    config: TrainConfig,
    valid_paths: PathSet,
    contract: Contract,
    params: GarchParams,
) -> tuple[PolicyNetwork, list[EpochRecord]]:
    """Mini-batch Adam training; returns the best-validation-CVaR parameters.

    With ``epochs == 0`` the input network is returned untouched.  Feature
    statistics are fitted from a pilot rollout first unless the network
    already carries non-default statistics.
    """
    if train_paths.measure is not Measure.P:
        raise ValueError("training paths must be simulated under the physical measure")
    if config.epochs == 0:
        return net, []
    net = net.copy()
    if net.has_default_feature_stats:
        net = fit_feature_stats(net, train_paths, contract, params)
    state = AdamState.init(net, config.learning_rate)
    shuffle = np.random.Generator(np.random.Philox(key=config.seed))
    n = train_paths.n_paths
    n_batches = n // config.batch_size
    if n_batches == 0:
        raise ValueError("fewer training paths than one batch")
    best_cvar = math.inf
    best_net = net.copy()
    records: list[EpochRecord] = []
    t0 = time.monotonic()
    for epoch in range(1, config.epochs + 1):
        perm = shuffle.permutation(n)
        losses = []
        for b in range(n_batches):
            idx = perm[b * config.batch_size : (b + 1) * config.batch_size]
            loss, grads = episode_gradient(
                net, train_paths.take(idx), contract, params, config.alpha
            )
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {b} "
                    f"(last finite: {losses[-1] if losses else 'none'})"
                )
            adam_step(net, grads, state)
            if not net.all_finite():
                raise TrainingDiverged(
                    f"non-finite parameters after epoch {epoch}, batch {b}"
                )
            losses.append(loss)
        valid_cvar = evaluate_cvar(net, valid_paths, contract, params, config.alpha)
        record = EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(losses[-100:])),
            valid_cvar=valid_cvar,
            wall_time=time.monotonic() - t0,
        )
        records.append(record)
        logger.info(
            "epoch %d: train %.4f valid %.4f (%.1fs)",
            epoch,
            record.train_loss,
            record.valid_cvar,
            record.wall_time,
        )
        if valid_cvar < best_cvar:
            best_cvar = valid_cvar
            best_net = net.copy()
    return best_net, records


def write_training_log(records: list[EpochRecord], path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,train_loss,valid_cvar,wall_time\n")
        for r in records:
            fh.write(f"{r.epoch},{r.train_loss!r},{r.valid_cvar!r},{r.wall_time:.3f}\n")


def save_checkpoint(
    net: PolicyNetwork, path: str | Path, meta: dict | None = None
) -> None:
    """Binary checkpoint plus a JSON sidecar of training metadata."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(LAYER_DIMS)))
        for fan_in, fan_out in LAYER_DIMS:
            fh.write(struct.pack("<II", fan_in, fan_out))
        fh.write(struct.pack("<d", net.leverage_cap))
        fh.write(np.ascontiguousarray(net.feat_mean, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(net.feat_scale, dtype="<f8").tobytes())
        for w, b in zip(net.weights, net.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    if meta is not None:
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2))


def load_checkpoint(path: str | Path) -> tuple[PolicyNetwork, dict | None]:
    path = Path(path)

    def read_exact(fh, size: int, what: str) -> bytes:
        raw = fh.read(size)
        if len(raw) != size:
            raise FormatError(f"{path}: truncated {what}")
        return raw

    with open(path, "rb") as fh:
        head = read_exact(fh, struct.calcsize("<4sII"), "header")
        magic, version, n_layers = struct.unpack("<4sII", head)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        dims = [
            struct.unpack("<II", read_exact(fh, 8, "layer dims")) for _ in range(n_layers)
        ]
        if dims != LAYER_DIMS:
            raise FormatError(f"{path}: unexpected layer dims {dims}")
        (cap,) = struct.unpack("<d", read_exact(fh, 8, "leverage bound"))
        feat_mean = np.frombuffer(read_exact(fh, N_FEATURES * 8, "feature means"), dtype="<f8").copy()
        feat_scale = np.frombuffer(read_exact(fh, N_FEATURES * 8, "feature scales"), dtype="<f8").copy()
        weights = []
        biases = []
        for fan_in, fan_out in dims:
            weights.append(
                np.frombuffer(read_exact(fh, fan_in * fan_out * 8, "weights"), dtype="<f8")
                .reshape(fan_in, fan_out)
                .copy()
            )
            biases.append(np.frombuffer(read_exact(fh, fan_out * 8, "biases"), dtype="<f8").copy())
    net = PolicyNetwork(
        weights=weights,
        biases=biases,
        leverage_cap=cap,
        feat_mean=feat_mean,
        feat_scale=feat_scale,
    )
    sidecar = path.with_suffix(path.suffix + ".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else None
    return net, meta
