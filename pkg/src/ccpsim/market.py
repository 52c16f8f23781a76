"""Regime-switching jump-diffusion drivers for rates, FX spots and member assets.

The stress indicator aggregates realised defaults weighted by member
significance and decays them exponentially; thresholds on it select a
volatility regime.  Wiener drivers are scaled by the regime multiplier and
Poisson drivers are built by superposing one standard layer per regime, so a
single random tape yields comparable paths under every regime configuration.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import ConfigError, InvariantError


@dataclass(frozen=True)
class TermStructure:
    """Piecewise-constant function of time.

    ``knots`` are bucket start times (the first must be 0); ``values[i]``
    applies on ``[knots[i], knots[i+1])`` and the last value extends forever.
    """

    knots: tuple[float, ...] = (0.0,)
    values: tuple[float, ...] = (0.0,)

    def __post_init__(self):
        if len(self.knots) != len(self.values) or not self.knots:
            raise InvariantError("term_structure", "knots and values must have equal nonzero length")
        if self.knots[0] != 0.0 or np.any(np.diff(self.knots) <= 0):
            raise InvariantError("term_structure", "knots must start at 0 and increase strictly")

    @classmethod
    def constant(cls, value: float) -> "TermStructure":
        return cls((0.0,), (float(value),))

    @classmethod
    def parse(cls, raw, path: str = "term_structure") -> "TermStructure":
        """Accept a number or a list of ``[start_time, value]`` pairs."""
        if isinstance(raw, (int, float)):
            return cls.constant(raw)
        try:
            knots = tuple(float(k) for k, _ in raw)
            values = tuple(float(v) for _, v in raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(path, f"expected a number or [[t, value], ...]: {exc}") from exc
        return cls(knots, values)

    def __call__(self, t):
        idx = np.searchsorted(self.knots, t, side="right") - 1
        return np.asarray(self.values)[np.clip(idx, 0, len(self.values) - 1)]

    def integral(self, t):
        """Integral from 0 to ``t`` (vectorised over ``t``)."""
        t = np.asarray(t, dtype=float)
        knots = np.asarray(self.knots)
        values = np.asarray(self.values)
        edges = np.append(knots[1:], np.inf)
        widths = np.clip(t[..., None] - knots, 0.0, None)
        widths = np.minimum(widths, edges - knots)
        return (widths * values).sum(axis=-1)

    def minimum(self) -> float:
        return float(min(self.values))


@dataclass(frozen=True)
class RegimeConfig:
    thresholds: tuple[float, ...] = (0.05, 1.0)
    multipliers: tuple[float, ...] = (1.0, 2.0)
    mean_reversion: float = 1.0

    def __post_init__(self):
        m = np.asarray(self.thresholds, dtype=float)
        lam = np.asarray(self.multipliers, dtype=float)
        if m.ndim != 1 or m.size == 0 or m.size != lam.size:
            raise InvariantError("regime", "thresholds and multipliers need the same nonzero length")
        if not (m[0] > 0 and np.all(np.diff(m) > 0) and m[-1] == 1.0):
            raise InvariantError("regime.thresholds", "need 0 < m_1 < ... < m_S = 1")
        if not (lam[0] == 1.0 and np.all(np.diff(lam) > 0)):
            raise InvariantError("regime.multipliers", "need 1 = L_1 < L_2 < ... < L_S")
        if not self.mean_reversion > 0:
            raise InvariantError("regime.mean_reversion", "must be positive")

    @property
    def n_states(self) -> int:
        return len(self.thresholds)

    def regime(self, indicator):
        """Regime index in 1..S; the lower threshold of each bucket is exclusive."""
        idx = np.searchsorted(np.asarray(self.thresholds), indicator, side="left") + 1
        return np.minimum(idx, self.n_states)

    def multiplier(self, regime):
        return np.asarray(self.multipliers)[np.asarray(regime) - 1]

    def layer_weights(self) -> np.ndarray:
        # intensity of layer i is lambda * (L_i - L_{i-1}), with L_0 = 0
        return np.diff(np.concatenate([[0.0], self.multipliers]))

    def active_layers(self, regime) -> np.ndarray:
        """Boolean mask (..., S) of superposition layers switched on in ``regime``."""
        return np.arange(self.n_states) < np.asarray(regime)[..., None]


@dataclass
class StressState:
    time: float
    weights: np.ndarray
    default_times: np.ndarray  # +inf while the member is alive
    indicator: float = 0.0
    regime: int = 1

    @classmethod
    def initial(cls, weights) -> "StressState":
        w = np.asarray(weights, dtype=float)
        if np.any(w <= 0) or not np.isclose(w.sum(), 1.0, rtol=0, atol=1e-12):
            raise InvariantError("weights", "weights must be positive and sum to 1")
        return cls(0.0, w, np.full(w.shape, np.inf))

    @property
    def defaulted(self) -> np.ndarray:
        return np.isfinite(self.default_times)


def stress_indicator(weights, default_times, t, mean_reversion=1.0):
    """Materiality-weighted, exponentially decayed sum of defaults up to ``t``.

    Vectorised over leading axes; the member axis is last.  A default dated
    exactly at ``t`` counts in full.
    """
    default_times = np.asarray(default_times, dtype=float)
    t = np.asarray(t, dtype=float)[..., None]
    hit = default_times <= t
    elapsed = np.where(hit, t - default_times, 0.0)
    return np.sum(np.where(hit, weights * np.exp(-mean_reversion * elapsed), 0.0), axis=-1)


def update_stress(stress: StressState, new_defaults: Iterable[int], dt: float,
                  config: RegimeConfig) -> StressState:
    """Advance the stress state by one step and register the step's defaults.

    New defaults are dated at the end of the step, so they enter the indicator
    at full weight and first affect the regime of the following step.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    n = stress.weights.size
    new = list(new_defaults)
    for k in new:
        if not (isinstance(k, (int, np.integer)) and 0 <= k < n):
            raise ConfigError("new_defaults", f"unknown member id {k!r}")
        if np.isfinite(stress.default_times[k]):
            raise ValueError(f"member {k} has already defaulted")
    t_new = stress.time + dt
    times = stress.default_times.copy()
    times[new] = t_new
    xi = float(stress_indicator(stress.weights, times, t_new, config.mean_reversion))
    return StressState(t_new, stress.weights, times, xi, int(config.regime(xi)))


@dataclass(frozen=True)
class JumpSpec:
    """Compound Poisson jumps of relative size ``exp(Z) - 1``, Z ~ N(log_mean, log_std)."""

    intensity: float = 0.0
    log_mean: float = 0.0
    log_std: float = 0.0

    def __post_init__(self):
        if self.intensity < 0 or self.log_std < 0:
            raise InvariantError("jump", "intensity and log_std must be non-negative")

    @property
    def mean_jump(self) -> float:
        return float(np.expm1(self.log_mean + 0.5 * self.log_std**2))

    def log_loading_mean(self, beta) -> np.ndarray:
        """E[exp(beta Z)] - 1, the compensator per jump of a log-loaded process."""
        beta = np.asarray(beta, dtype=float)
        return np.expm1(beta * self.log_mean + 0.5 * (beta * self.log_std) ** 2)


@dataclass(frozen=True)
class RatesParams:
    forward_curve: TermStructure  # drift fit phi: initial instantaneous forward
    theta1: float
    theta2: float
    vol: TermStructure
    vol_ratio: float
    correlation: float
    systemic_beta: float = 0.0
    jump: JumpSpec = field(default_factory=JumpSpec)

    def __post_init__(self):
        if not (self.theta1 > 0 and self.theta2 > 0):
            raise InvariantError("rates.theta", "mean reversions must be positive")
        if abs(self.correlation) > 1:
            raise InvariantError("rates.correlation", "|rho| must be <= 1")
        if self.vol.minimum() < 0:
            raise InvariantError("rates.vol", "volatility must be non-negative")


@dataclass(frozen=True)
class ProportionalParams:
    """Shared shape of the FX and non-CCP asset processes."""

    vol: TermStructure
    systemic_beta: float = 0.0
    jump: JumpSpec = field(default_factory=JumpSpec)

    def __post_init__(self):
        if self.vol.minimum() < 0:
            raise InvariantError("vol", "volatility must be non-negative")


@dataclass(frozen=True)
class FxParams(ProportionalParams):
    spot: float = 1.0

    def __post_init__(self):
        super().__post_init__()
        if not self.spot > 0:
            raise InvariantError("fx.spot", "spot must be positive")


@dataclass(frozen=True)
class AssetParams(ProportionalParams):
    initial_assets: float = 1.0

    def __post_init__(self):
        super().__post_init__()
        if not self.initial_assets > 0:
            raise InvariantError("assets.initial_assets", "must be positive")


@dataclass
class MarketState:
    time: float
    x1: np.ndarray  # (..., n_economies)
    x2: np.ndarray
    short_rate: np.ndarray
    fx: np.ndarray  # (..., n_fx), reporting currency per unit of foreign
    assets: np.ndarray  # (..., n_members)
    stress: StressState | None = None


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------

def sample_regime_wiener(rng: np.random.Generator, regime, dt: float, config: RegimeConfig,
                         size=None):
    """Wiener increment with variance ``L_regime**2 * dt``.

    One standard normal stream is scaled by the regime multiplier, so a fixed
    seed gives increments that differ across regimes by exactly that factor.
    """
    if size is None:
        size = np.shape(regime)
    return config.multiplier(regime) * np.sqrt(dt) * rng.standard_normal(size)


def compound_poisson_layers(rng: np.random.Generator, intensity, log_mean, log_std, dt: float,
                            layer_weights, shape=()):
    """Per-layer jump sums for independent compound Poisson processes.

    ``intensity``, ``log_mean`` and ``log_std`` have shape (P,).  Returns the
    arrays ``(sum of exp(Z)-1, sum of Z)``, each of shape ``shape + (P, S)``.
    Layer ``i`` has intensity ``intensity * layer_weights[i]``.
    """
    intensity = np.atleast_1d(np.asarray(intensity, dtype=float))
    log_mean = np.broadcast_to(np.asarray(log_mean, dtype=float), intensity.shape)
    log_std = np.broadcast_to(np.asarray(log_std, dtype=float), intensity.shape)
    layer_weights = np.asarray(layer_weights, dtype=float)
    rates = intensity[:, None] * layer_weights[None, :] * dt
    counts = rng.poisson(np.broadcast_to(rates, tuple(shape) + rates.shape))
    total = int(counts.sum())
    out_shape = counts.shape
    if total == 0:
        zeros = np.zeros(out_shape)
        return zeros, zeros.copy()
    flat = counts.ravel()
    owner = np.repeat(np.arange(flat.size), flat)
    process = owner // layer_weights.size % intensity.size
    z = log_mean[process] + log_std[process] * rng.standard_normal(total)
    sums = np.bincount(owner, weights=np.expm1(z), minlength=flat.size).reshape(out_shape)
    logs = np.bincount(owner, weights=z, minlength=flat.size).reshape(out_shape)
    return sums, logs


def compensated_jump(layer_sums, regime, spec: JumpSpec, dt: float, config: RegimeConfig):
    """Regime-``regime`` jump increment minus its compensator (zero mean)."""
    active = config.active_layers(regime)
    jumps = np.sum(np.where(active, layer_sums, 0.0), axis=-1)
    return jumps - spec.intensity * config.multiplier(regime) * dt * spec.mean_jump


def sample_regime_poisson(rng: np.random.Generator, regime, dt: float, spec: JumpSpec,
                          config: RegimeConfig, size=()):
    """Compensated compound Poisson increment in regime ``regime``.

    The jump count is Poisson with mean ``intensity * L_regime * dt``, built as
    a superposition of one layer per regime.
    """
    shape = tuple(np.atleast_1d(size)) if size != () else np.shape(regime)
    sums, _ = compound_poisson_layers(rng, [spec.intensity], spec.log_mean, spec.log_std, dt,
                                      config.layer_weights(), shape=shape)
    return compensated_jump(sums[..., 0, :], np.broadcast_to(regime, shape), spec, dt, config)


def bridge_log_minimum(log_start, log_end, variance, uniform):
    """Sample the minimum of a Brownian bridge between two log values.

    ``variance`` is the diffusion variance over the step.  The crossing
    probability of a level ``b`` below both ends is
    ``exp(-2 (a - b)(c - b) / variance)``; inverting it at ``uniform`` gives
    the minimum exactly.
    """
    a, c = np.asarray(log_start), np.asarray(log_end)
    h = -0.5 * np.asarray(variance) * np.log(uniform)
    return 0.5 * ((a + c) - np.sqrt((a - c) ** 2 + 4.0 * h))


# ---------------------------------------------------------------------------
# state updates
# ---------------------------------------------------------------------------

def step_rates(x1, x2, short_rate, t: float, dt: float, params: RatesParams,
               dw1, dw2, dn_sys, dn_idio):
    """Euler step of the two-factor rates model.

    ``dn_sys`` and ``dn_idio`` are compensated jump increments; rate jumps are
    proportional to the pre-step short rate.  Returns ``(x1, x2, short_rate)``.
    """
    sigma = params.vol(t)
    x1_new = x1 - params.theta1 * x1 * dt + sigma * dw1
    mixed = params.correlation * dw1 + np.sqrt(1.0 - params.correlation**2) * dw2
    x2_new = x2 - params.theta2 * x2 * dt + params.vol_ratio * sigma * mixed
    dphi = params.forward_curve(t + dt) - params.forward_curve(t)
    jump = short_rate * (params.systemic_beta * dn_sys + dn_idio)
    r_new = short_rate + dphi + (x1_new - x1) + (x2_new - x2) + jump
    return x1_new, x2_new, r_new


def log_euler_factor(sigma, dw, dt: float, multiplier=1.0, beta=0.0, sys_log_jump=0.0,
                     idio_log_jump=0.0, idio_compensator=0.0, sys_compensator=0.0):
    """Multiplicative update ``exp(...)`` of a proportional jump-diffusion.

    Compensators are the expected jump terms per unit of regime-scaled time,
    i.e. ``intensity * E[exp(loading * Z) - 1]``.
    """
    log_step = sigma * dw - 0.5 * sigma**2 * multiplier**2 * dt
    log_step = log_step + beta * sys_log_jump + idio_log_jump
    log_step = log_step - multiplier * dt * (idio_compensator + sys_compensator)
    return np.exp(log_step)


def step_proportional(value, t: float, dt: float, params: ProportionalParams, dw,
                      sys_log_jump=0.0, idio_log_jump=0.0, multiplier=1.0,
                      sys_spec: JumpSpec | None = None, compensate: bool = True):
    """Log-Euler step of ``dX = X (sigma dW + beta dN_sys + dN_idio)``.

    ``dw`` already carries the regime scaling (variance ``multiplier**2 dt``).
    Jumps enter multiplicatively through the summed log jump sizes, so the
    value stays strictly positive; a systemic jump with log size ``Z`` moves
    the process by ``exp(beta Z)``.
    """
    idio_comp = sys_comp = 0.0
    if compensate:
        idio_comp = params.jump.intensity * params.jump.mean_jump
        if sys_spec is not None:
            sys_comp = sys_spec.intensity * sys_spec.log_loading_mean(params.systemic_beta)
    factor = log_euler_factor(np.asarray(params.vol(t), dtype=float), dw, dt, multiplier,
                              params.systemic_beta, sys_log_jump, idio_log_jump,
                              idio_comp, sys_comp)
    return value * factor


def step_fx(spot, t, dt, params: FxParams, dw, sys_log_jump=0.0, idio_log_jump=0.0,
            multiplier=1.0, sys_spec=None, compensate=True):
    return step_proportional(spot, t, dt, params, dw, sys_log_jump, idio_log_jump,
                             multiplier, sys_spec, compensate)


def step_assets(assets, t, dt, params: AssetParams, dw, sys_log_jump=0.0, idio_log_jump=0.0,
                multiplier=1.0, sys_spec=None, compensate=True):
    return step_proportional(assets, t, dt, params, dw, sys_log_jump, idio_log_jump,
                             multiplier, sys_spec, compensate)
