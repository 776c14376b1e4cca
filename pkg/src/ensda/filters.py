"""Sequential ensemble filters over windowed forward models.

Two assimilation updates share the same forecast stage:

* ``ensf_step`` corrects the forecast ensemble by sampling a reverse
  diffusion whose score is the Monte Carlo prior score plus a damped
  observation log-likelihood gradient.  No parametric form is assumed and
  nothing is trained; the score is rebuilt from the forecast ensemble at
  every step.
* ``enkf_step`` is a stochastic ensemble Kalman update with perturbed
  observations, using ensemble cross- and auto-covariances in observation
  space, which handles nonlinear operators without explicit Jacobians.

``open_loop_step`` propagates the ensemble without any correction and
serves as the no-assimilation baseline.  All randomness derives from the
configured master seed through named per-step, per-member substreams, so
results are reproducible and do not depend on member evaluation order.
"""

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .diffusion import (
    DiffusionSchedule,
    Ensemble,
    MiniBatch,
    as_seed_sequence,
    reverse_sde_sample,
    score_estimate,
)
from .errors import ConfigError, DivergenceError
from .observation import (
    ObservationRecord,
    ObservationSpec,
    _LikelihoodPlan,
    apply_operator,
    likelihood_gradient,
)


def linear_damping(tau: float) -> float:
    """Default likelihood damping g(tau) = 1 - tau."""
    return 1.0 - tau


@dataclass(frozen=True)
class FilterConfig:
    """Knobs shared by the filter steps.

    ``batch_size`` of None uses the full ensemble in every score
    evaluation; smaller values redraw a uniform without-replacement
    mini-batch once per (filter step, pseudo-time step).  ``window_mode``
    selects whether member windows are extended with each member's own
    posterior sample ("member") or with the shared posterior mean ("mean").
    ``inflation`` scales forecast anomalies before an assimilation update;
    ``localization_radius`` applies a compactly supported covariance taper
    in the Kalman update only.
    """

    ensemble_size: int = 50
    diffusion_steps: int = 500
    batch_size: int | None = None
    damping: Callable[[float], float] = linear_damping
    model_noise_std: float = 0.01
    seed: int = 0
    inflation: float = 1.0
    localization_radius: float | None = None
    window_mode: str = "member"
    clamp: float = 1e-3

    def __post_init__(self):
        if self.ensemble_size < 1:
            raise ConfigError(f"ensemble_size must be positive, got {self.ensemble_size}")
        if self.diffusion_steps < 2:
            raise ConfigError(f"diffusion_steps must be at least 2, got {self.diffusion_steps}")
        if self.batch_size is not None and not 1 <= self.batch_size <= self.ensemble_size:
            raise ConfigError(
                f"batch_size must lie in [1, {self.ensemble_size}], got {self.batch_size}"
            )
        if self.model_noise_std < 0.0:
            raise ConfigError(f"model_noise_std must be nonnegative, got {self.model_noise_std}")
        if not self.inflation > 0.0:
            raise ConfigError(f"inflation must be positive, got {self.inflation}")
        if self.localization_radius is not None and not self.localization_radius > 0.0:
            raise ConfigError(
                f"localization_radius must be positive, got {self.localization_radius}"
            )
        if self.window_mode not in ("member", "mean"):
            raise ConfigError(f"window_mode must be 'member' or 'mean', got {self.window_mode!r}")
        if abs(self.damping(0.0) - 1.0) > 1e-12 or abs(self.damping(1.0)) > 1e-12:
            raise ConfigError("damping must satisfy g(0) = 1 and g(1) = 0")


@dataclass(frozen=True)
class FilterState:
    """Ensemble, per-member input windows (oldest row first), and the step index."""

    ensemble: Ensemble
    windows: np.ndarray
    step: int

    def __post_init__(self):
        windows = np.asarray(self.windows, dtype=float)
        if windows.ndim != 3:
            raise ValueError(f"windows must be (members, window_length, dim), got {windows.shape}")
        if windows.shape[0] != self.ensemble.size or windows.shape[2] != self.ensemble.dim:
            raise ValueError(
                f"windows shape {windows.shape} inconsistent with ensemble "
                f"({self.ensemble.size}, {self.ensemble.dim})"
            )
        if not np.isfinite(windows).all():
            raise ValueError("windows contain non-finite entries")
        if self.step < 0:
            raise ValueError(f"step must be nonnegative, got {self.step}")
        object.__setattr__(self, "windows", windows)


def warm_start(
    truth_window: np.ndarray, ensemble_size: int, jitter_std: float = 0.0, seed=0
) -> FilterState:
    """Initialize every member's window from the same reference states.

    ``truth_window`` is (window_length, dim), oldest first.  With a positive
    ``jitter_std`` the newest row of each member gets independent Gaussian
    jitter so the ensemble starts with spread.
    """
    truth_window = np.asarray(truth_window, dtype=float)
    if truth_window.ndim != 2:
        raise ValueError(f"truth_window must be (window_length, dim), got {truth_window.shape}")
    if not np.isfinite(truth_window).all():
        raise ValueError("truth_window contains non-finite entries")
    if ensemble_size < 1:
        raise ConfigError(f"ensemble_size must be positive, got {ensemble_size}")
    if jitter_std < 0.0:
        raise ConfigError(f"jitter_std must be nonnegative, got {jitter_std}")
    windows = np.broadcast_to(truth_window, (ensemble_size,) + truth_window.shape).copy()
    if jitter_std > 0.0:
        jitter = _member_normals(as_seed_sequence(seed), ensemble_size, truth_window.shape[1])
        windows[:, -1, :] += jitter_std * jitter
    return FilterState(Ensemble(windows[:, -1, :].copy()), windows, 0)


def state_estimate(ensemble: Ensemble) -> np.ndarray:
    """Point estimate: the ensemble mean."""
    return ensemble.mean()


def posterior_score(
    z: np.ndarray,
    tau: float,
    prior: Ensemble,
    batch: MiniBatch | None,
    obs: ObservationRecord,
    spec: ObservationSpec,
    damping: Callable[[float], float] = linear_damping,
) -> np.ndarray:
    """Prior ensemble score plus the damped observation likelihood gradient.

    The likelihood gradient is evaluated at the diffusion sample z itself
    and enters with weight damping(tau), so the observation fully shapes the
    flow at tau = 0 and vanishes at tau = 1 where the prior is pure noise.
    """
    return score_estimate(z, tau, prior, batch) + damping(tau) * likelihood_gradient(z, obs, spec)


def _guided_score_fn(
    prior: Ensemble,
    obs: ObservationRecord,
    spec: ObservationSpec,
    cfg: FilterConfig,
    batch_ss: np.random.SeedSequence,
) -> Callable[[np.ndarray, float], np.ndarray]:
    """Build the posterior score callable for one assimilation step.

    Same composition as ``posterior_score`` with the observation constants
    hoisted out of the pseudo-time loop; with a reduced batch size a fresh
    mini-batch is drawn for every score evaluation.
    """
    members = prior.size
    batch_size = cfg.batch_size if cfg.batch_size is not None else members
    if batch_size > members:
        raise ConfigError(f"batch_size {batch_size} exceeds the ensemble size {members}")
    likelihood = _LikelihoodPlan(obs, spec)
    damping = cfg.damping
    batch_rng = np.random.default_rng(batch_ss) if batch_size < members else None

    def guided_score(states: np.ndarray, tau: float) -> np.ndarray:
        batch = (
            None
            if batch_rng is None
            else MiniBatch.sample(batch_rng, members, batch_size)
        )
        scores = score_estimate(states, tau, prior, batch)
        grad = likelihood(states)
        grad *= damping(tau)
        scores += grad
        return scores

    return guided_score


def _member_normals(ss: np.random.SeedSequence, count: int, dim: int) -> np.ndarray:
    """One standard-normal row per member, each from its own child stream."""
    return np.stack(
        [np.random.default_rng(c).standard_normal(dim) for c in ss.spawn(count)]
    )


def _step_streams(cfg: FilterConfig, step: int) -> tuple:
    """Per-step substreams: (forecast, update/transport, mini-batch)."""
    return np.random.SeedSequence(cfg.seed, spawn_key=(step,)).spawn(3)


def _forecast(
    state: FilterState, model, cfg: FilterConfig, forecast_ss: np.random.SeedSequence
) -> np.ndarray:
    """Propagate every member's window one step with per-member model noise."""
    members, window_length, dim = state.windows.shape
    if window_length != model.window_length or dim != model.dim:
        raise ConfigError(
            f"state windows {(window_length, dim)} do not match the model "
            f"({model.window_length}, {model.dim})"
        )
    noises = cfg.model_noise_std * _member_normals(forecast_ss, members, dim)
    if hasattr(model, "propagate_batch"):
        predicted = np.asarray(model.propagate_batch(state.windows, noises, state.step), dtype=float)
    else:
        rows = []
        for m in range(members):
            try:
                rows.append(model.propagate(state.windows[m], noises[m], state.step))
            except Exception as exc:
                raise type(exc)(f"forward model failed for member {m}: {exc}") from exc
        predicted = np.asarray(rows, dtype=float)
    if predicted.shape != (members, dim):
        raise ConfigError(
            f"forward model returned shape {predicted.shape}, expected {(members, dim)}"
        )
    if not np.isfinite(predicted).all():
        bad = int(np.argwhere(~np.isfinite(predicted).all(axis=1))[0, 0])
        raise DivergenceError(
            f"forecast produced non-finite state for member {bad} at step {state.step}"
        )
    return predicted


def _inflate(predicted: np.ndarray, factor: float) -> np.ndarray:
    if factor == 1.0:
        return predicted
    center = predicted.mean(axis=0)
    return center + factor * (predicted - center)


def _advance_windows(windows: np.ndarray, new_states: np.ndarray, mode: str) -> np.ndarray:
    if mode == "mean":
        newest = np.broadcast_to(new_states.mean(axis=0), new_states.shape)
    else:
        newest = new_states
    return np.concatenate([windows[:, 1:, :], newest[:, None, :]], axis=1)


def _check_obs(state: FilterState, obs: ObservationRecord, spec: ObservationSpec) -> None:
    if obs.step != state.step + 1:
        raise ValueError(
            f"observation step {obs.step} does not follow filter step {state.step}"
        )
    if spec.dim != state.ensemble.dim or obs.mask.shape[0] != spec.dim:
        raise ValueError(
            f"dimension mismatch between state ({state.ensemble.dim}), spec ({spec.dim}) "
            f"and observation ({obs.mask.shape[0]})"
        )


def ensf_step(
    state: FilterState,
    model,
    obs: ObservationRecord,
    spec: ObservationSpec,
    cfg: FilterConfig,
) -> FilterState:
    """One score-based assimilation step.

    Stages: forecast every member through the model with its own noise
    draw; build the Monte Carlo score of the forecast ensemble; add the
    damped likelihood gradient of the new observation; sample the posterior
    ensemble by reverse diffusion driven by that score; slide each member's
    window forward.  With an empty observed mask the likelihood term is zero
    everywhere and the step reduces to resampling the forecast ensemble.
    """
    _check_obs(state, obs, spec)
    forecast_ss, transport_ss, batch_ss = _step_streams(cfg, state.step)
    predicted = _inflate(_forecast(state, model, cfg, forecast_ss), cfg.inflation)
    prior = Ensemble(predicted)
    guided_score = _guided_score_fn(prior, obs, spec, cfg, batch_ss)
    schedule = DiffusionSchedule(cfg.diffusion_steps, cfg.clamp)
    posterior = reverse_sde_sample(guided_score, prior.size, prior.dim, schedule, transport_ss)
    windows = _advance_windows(state.windows, posterior.samples, cfg.window_mode)
    return FilterState(posterior, windows, state.step + 1)


def enkf_step(
    state: FilterState,
    model,
    obs: ObservationRecord,
    spec: ObservationSpec,
    cfg: FilterConfig,
) -> FilterState:
    """One stochastic ensemble Kalman step with perturbed observations.

    The gain is built from ensemble covariances between state space and the
    observed, operator-mapped components, so arctan observations need no
    linearization.  Each member is nudged toward its own independently
    perturbed copy of the observation, which keeps the analysis spread
    consistent with the noise level.
    """
    _check_obs(state, obs, spec)
    if state.ensemble.size < 2:
        raise ConfigError("the Kalman update needs at least 2 members for covariances")
    forecast_ss, update_ss, _ = _step_streams(cfg, state.step)
    predicted = _inflate(_forecast(state, model, cfg, forecast_ss), cfg.inflation)
    mask = obs.mask
    observed = int(mask.sum())
    if observed == 0:
        analysis = predicted
    else:
        members = predicted.shape[0]
        obs_space = apply_operator(predicted, spec)[:, mask]
        state_anom = predicted - predicted.mean(axis=0)
        obs_anom = obs_space - obs_space.mean(axis=0)
        cov_xy = state_anom.T @ obs_anom / (members - 1)
        cov_yy = obs_anom.T @ obs_anom / (members - 1)
        if cfg.localization_radius is not None:
            idx = np.flatnonzero(mask)
            all_idx = np.arange(predicted.shape[1])
            cov_xy = cov_xy * _gaspari_cohn(
                np.abs(all_idx[:, None] - idx[None, :]) / cfg.localization_radius
            )
            cov_yy = cov_yy * _gaspari_cohn(
                np.abs(idx[:, None] - idx[None, :]) / cfg.localization_radius
            )
        innovation_cov = cov_yy + spec.noise_std**2 * np.eye(observed)
        gain = np.linalg.solve(innovation_cov, cov_xy.T).T
        perturbed = obs.values[mask] + spec.noise_std * _member_normals(
            update_ss, members, observed
        )
        analysis = predicted + (perturbed - obs_space) @ gain.T
    windows = _advance_windows(state.windows, analysis, cfg.window_mode)
    return FilterState(Ensemble(analysis), windows, state.step + 1)


def open_loop_step(state: FilterState, model, cfg: FilterConfig) -> FilterState:
    """Forecast without assimilation; each window takes its member's forecast."""
    forecast_ss, _, _ = _step_streams(cfg, state.step)
    predicted = _forecast(state, model, cfg, forecast_ss)
    windows = _advance_windows(state.windows, predicted, "member")
    return FilterState(Ensemble(predicted), windows, state.step + 1)


def run_filter(
    state: FilterState,
    model,
    spec: ObservationSpec | None,
    cfg: FilterConfig,
    method: str,
    observations: Sequence[ObservationRecord] | None = None,
    horizon: int | None = None,
) -> tuple[np.ndarray, FilterState]:
    """Advance a filter over a span of steps and collect per-step estimates.

    Returns the (steps, dim) array of ensemble-mean estimates and the final
    state.  ``method`` is "ensf", "enkf" or "none"; the assimilating methods
    consume one observation per step.
    """
    if method not in ("ensf", "enkf", "none"):
        raise ConfigError(f"unknown filter method {method!r}")
    if method == "none":
        steps = horizon if horizon is not None else (len(observations) if observations else 0)
        if steps < 1:
            raise ConfigError("open-loop run needs a positive horizon")
    else:
        if not observations:
            raise ConfigError(f"method {method!r} needs observations")
        steps = len(observations)
    estimates = np.empty((steps, state.ensemble.dim))
    for k in range(steps):
        if method == "ensf":
            state = ensf_step(state, model, observations[k], spec, cfg)
        elif method == "enkf":
            state = enkf_step(state, model, observations[k], spec, cfg)
        else:
            state = open_loop_step(state, model, cfg)
        estimates[k] = state_estimate(state.ensemble)
    return estimates, state


def _gaspari_cohn(scaled_dist: np.ndarray) -> np.ndarray:
    """Compactly supported fifth-order correlation taper.

    Takes distance already divided by the localization radius; the taper is
    1 at distance 0 and reaches 0 at twice the radius.
    """
    r = np.asarray(scaled_dist, dtype=float)
    out = np.zeros_like(r)
    near = r <= 1.0
    far = (r > 1.0) & (r < 2.0)
    rn = r[near]
    out[near] = (
        -0.25 * rn**5 + 0.5 * rn**4 + 0.625 * rn**3 - (5.0 / 3.0) * rn**2 + 1.0
    )
    rf = r[far]
    out[far] = (
        (1.0 / 12.0) * rf**5
        - 0.5 * rf**4
        + 0.625 * rf**3
        + (5.0 / 3.0) * rf**2
        - 5.0 * rf
        + 4.0
        - (2.0 / 3.0) / rf
    )
    return out
