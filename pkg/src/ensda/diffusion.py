"""Forward-diffusion schedule, ensemble score estimation, and reverse-SDE sampling.

The forward process interpolates a state distribution toward a standard normal
over pseudo-time tau in [0, 1]:

    Z_tau = alpha(tau) * Z_0 + beta(tau) * xi,   xi ~ N(0, I)

with the linear schedule alpha(tau) = 1 - tau and beta^2(tau) = tau.  The
matching SDE coefficients are

    b(tau)      = d log alpha / d tau            = -1 / (1 - tau)
    sigma^2(tau) = d beta^2 / d tau - 2 b beta^2 = 1 + 2 tau / (1 - tau)

Sampling runs the reverse SDE from N(0, I) at tau = 1 down to tau = 0 with an
Euler-Maruyama discretization driven by a score function.  The score of the
diffused ensemble is estimated without training as a weighted sum of Gaussian
kernel gradients over (a mini-batch of) the ensemble members.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DataError, DivergenceError

# Chunk size bound for per-member noise pre-draws (number of doubles held at
# once), keeping memory flat for large state dimensions.
_NOISE_BLOCK_FLOATS = 4_000_000

# Reverse-SDE states beyond this magnitude are declared divergent before
# they can overflow float64 inside the score kernel.
_DIVERGENCE_LIMIT = 1e150


def as_seed_sequence(seed) -> np.random.SeedSequence:
    """Coerce an int or SeedSequence into a SeedSequence."""
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


@dataclass(frozen=True)
class DiffusionSchedule:
    """Uniform pseudo-time grid tau_l = l / num_steps with singularity clamp.

    Parameters
    ----------
    num_steps:
        Number of reverse integration steps L; the grid has L + 1 nodes.
    clamp:
        Width epsilon of the guard band at tau = 1.  Drift and diffusion are
        evaluated at min(tau, 1 - epsilon) because both are singular at 1.
    """

    num_steps: int = 500
    clamp: float = 1e-3

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError(f"num_steps must be positive, got {self.num_steps}")
        if not 0.0 < self.clamp < 1.0:
            raise ValueError(f"clamp must lie in (0, 1), got {self.clamp}")

    @property
    def delta_tau(self) -> float:
        return 1.0 / self.num_steps

    @property
    def taus(self) -> np.ndarray:
        """Grid nodes tau_0 = 0, ..., tau_L = 1."""
        return np.arange(self.num_steps + 1) / self.num_steps

    def evaluate(self, tau: float) -> tuple[float, float, float, float]:
        """Return (alpha, beta_sq, drift, diffusion_sq) at pseudo-time tau.

        Valid for 0 <= tau <= 1 - clamp; outside that range the drift and
        squared diffusion are singular or undefined and a ValueError is
        raised to signal a caller bug.
        """
        if not 0.0 <= tau <= 1.0 - self.clamp:
            raise ValueError(
                f"tau={tau} outside [0, {1.0 - self.clamp}]; drift and "
                "diffusion are singular at tau=1"
            )
        alpha = 1.0 - tau
        beta_sq = tau
        drift = -1.0 / (1.0 - tau)
        diffusion_sq = 1.0 + 2.0 * tau / (1.0 - tau)
        return alpha, beta_sq, drift, diffusion_sq


@dataclass(frozen=True)
class Ensemble:
    """A set of equally weighted state samples, one row per member."""

    samples: np.ndarray

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim != 2 or samples.shape[0] < 1 or samples.shape[1] < 1:
            raise ValueError(f"samples must be (members, dim), got {samples.shape}")
        if not np.isfinite(samples).all():
            raise DataError("ensemble contains non-finite entries")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "_sq_norms", None)

    @property
    def size(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    def _member_sq_norms(self) -> np.ndarray:
        """Per-member squared norms, computed once and reused by the score kernel."""
        if self._sq_norms is None:
            norms = (self.samples * self.samples).sum(axis=1)
            object.__setattr__(self, "_sq_norms", norms)
        return self._sq_norms


@dataclass(frozen=True)
class MiniBatch:
    """Indices of the ensemble members entering one score evaluation."""

    indices: np.ndarray

    def __post_init__(self):
        indices = np.asarray(self.indices, dtype=int)
        if indices.ndim != 1 or indices.size == 0:
            raise ValueError("mini-batch must hold at least one index")
        if len(np.unique(indices)) != indices.size:
            raise ValueError("mini-batch indices must be distinct")
        object.__setattr__(self, "indices", indices)

    @classmethod
    def full(cls, ensemble_size: int) -> "MiniBatch":
        return cls(np.arange(ensemble_size))

    @classmethod
    def sample(cls, rng: np.random.Generator, ensemble_size: int, batch_size: int) -> "MiniBatch":
        """Draw batch_size distinct member indices uniformly."""
        if not 1 <= batch_size <= ensemble_size:
            raise ValueError(
                f"batch_size must lie in [1, {ensemble_size}], got {batch_size}"
            )
        return cls(rng.choice(ensemble_size, size=batch_size, replace=False))


def forward_diffuse(z0: np.ndarray, tau: float, seed) -> np.ndarray:
    """Push a state through the forward process: alpha*z0 + beta*xi.

    Parameters
    ----------
    z0:
        State vector, or a (batch, dim) matrix diffused row-wise.
    tau:
        Pseudo-time in [0, 1].
    seed:
        Seed or SeedSequence for the Gaussian draw.
    """
    z0 = np.asarray(z0, dtype=float)
    if not np.isfinite(z0).all():
        raise DataError("forward_diffuse input contains non-finite entries")
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    rng = np.random.default_rng(as_seed_sequence(seed))
    xi = rng.standard_normal(z0.shape)
    return (1.0 - tau) * z0 + np.sqrt(tau) * xi


def _as_points(z: np.ndarray) -> tuple[np.ndarray, bool]:
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        return z[None, :], True
    if z.ndim == 2:
        return z, False
    raise ValueError(f"state must be a vector or matrix, got ndim={z.ndim}")


def _kernel_log_densities(
    pts: np.ndarray, tau: float, ensemble: Ensemble, batch: MiniBatch | None
) -> tuple[np.ndarray, np.ndarray]:
    """Log transition densities up to a per-row constant, shifted to peak at 0.

    Entry (k, j) is -|z_k - alpha m_j|^2 / (2 beta^2) plus a row constant.
    Terms that do not depend on j (the |z_k|^2 cross term and the Gaussian
    normalizer) are dropped outright because every use normalizes across j,
    so the matrix costs one matmul against the pre-scaled member block plus
    one broadcast add.  Also returns the selected member matrix.
    """
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1] for score weights, got {tau}")
    if not np.isfinite(pts).all():
        raise DataError("score query point contains non-finite entries")
    if batch is None:
        members = ensemble.samples
        sq_norms = ensemble._member_sq_norms()
    else:
        members = ensemble.samples[batch.indices]
        sq_norms = ensemble._member_sq_norms()[batch.indices]
    if members.shape[1] != pts.shape[1]:
        raise ValueError(
            f"dimension mismatch: query dim {pts.shape[1]}, ensemble dim {members.shape[1]}"
        )
    alpha = 1.0 - tau
    # -|z - alpha m|^2 / (2 tau) ~ (alpha/tau) <z, m> - alpha^2 |m|^2 / (2 tau)
    logk = pts @ ((alpha / tau) * members).T
    logk += (-alpha * alpha / (2.0 * tau)) * sq_norms
    logk -= logk.max(axis=1, keepdims=True)
    return logk, members


def score_log_weights(
    z: np.ndarray, tau: float, ensemble: Ensemble, batch: MiniBatch | None
) -> np.ndarray:
    """Log of the normalized Gaussian kernel weights, one row per query point.

    Weight j is proportional to the transition density of the forward process
    from batch member j to z, i.e. exp(-|z - alpha z_j|^2 / (2 beta^2)) up to
    a constant that cancels in the normalization.  Rows are normalized with a
    log-sum-exp so each row of exp(result) sums to one even when the raw
    densities underflow in high dimension.  ``batch=None`` uses every member.
    """
    pts, single = _as_points(z)
    logk, _ = _kernel_log_densities(pts, tau, ensemble, batch)
    logw = logk - np.log(np.exp(logk).sum(axis=1, keepdims=True))
    return logw[0] if single else logw


def score_estimate(
    z: np.ndarray, tau: float, ensemble: Ensemble, batch: MiniBatch | None
) -> np.ndarray:
    """Monte Carlo score of the diffused ensemble at (z, tau).

    Averages the Gaussian kernel gradients -(z - alpha z_j) / beta^2 over the
    mini-batch members with the normalized transition-density weights of
    ``score_log_weights``.  For a single-member batch this reduces exactly to
    the conditional score -(z - alpha z_j) / beta^2.

    Parameters
    ----------
    z:
        Query state vector, or a matrix of query states (one per row).
    tau:
        Pseudo-time in (0, 1]; beta^2(0) = 0 makes tau = 0 invalid.
    ensemble:
        Samples defining the target distribution at tau = 0.
    batch:
        Indices of the members entering this evaluation, or None to use
        every member.

    Returns
    -------
    Array of the same shape as ``z`` holding the estimated score.
    """
    pts, single = _as_points(z)
    logk, members = _kernel_log_densities(pts, tau, ensemble, batch)
    weights = np.exp(logk, out=logk)
    weights /= weights.sum(axis=1, keepdims=True)
    alpha = 1.0 - tau
    # sum_j w_j (z - alpha z_j) = z - alpha * (W @ Z_batch)
    scores = -(pts - alpha * (weights @ members)) / tau
    return scores[0] if single else scores


def _member_noise_stream(gens: list, dim: int, total: int):
    """Yield ``total`` (members, dim) Gaussian draws, one row per member each.

    Each member consumes its own generator so results do not depend on the
    order members are evaluated in.  Draws are buffered in bounded blocks to
    amortize the per-call cost without holding the whole integration's noise
    in memory at once.
    """
    chunk = max(1, min(total, _NOISE_BLOCK_FLOATS // max(1, len(gens) * dim)))
    produced = 0
    while produced < total:
        take = min(chunk, total - produced)
        block = np.stack([g.standard_normal((take, dim)) for g in gens])
        for i in range(take):
            yield block[:, i, :]
        produced += take


def reverse_sde_sample(
    score_fn: Callable[[np.ndarray, float], np.ndarray],
    member_count: int,
    dim: int,
    schedule: DiffusionSchedule,
    seed,
) -> Ensemble:
    """Draw an ensemble by integrating the reverse SDE from tau = 1 to 0.

    Each member starts at an independent N(0, I) sample and is stepped with
    Euler-Maruyama over the schedule grid, for l = L-1, ..., 0:

        Z_l = Z_{l+1} - [b Z_{l+1} - sigma^2 S(Z_{l+1}, tau_{l+1})] dtau
              + sigma * sqrt(dtau) * xi

    where b and sigma^2 are evaluated at min(tau_{l+1}, 1 - clamp) and the
    score at tau_{l+1} itself (always >= tau_1 > 0, so the score never sees
    beta^2 = 0).

    Parameters
    ----------
    score_fn:
        Callable mapping (states, tau) to scores, where states is the
        (member_count, dim) matrix of current member positions.
    member_count, dim:
        Ensemble shape.
    schedule:
        Pseudo-time grid; must have at least 2 steps.
    seed:
        Seed or SeedSequence; one independent child stream per member.

    Raises
    ------
    DivergenceError
        If any member becomes non-finite, naming the offending step index.
    """
    if member_count < 1 or dim < 1:
        raise ValueError(f"need member_count >= 1 and dim >= 1, got {member_count}, {dim}")
    if schedule.num_steps < 2:
        raise ValueError(f"reverse integration needs at least 2 steps, got {schedule.num_steps}")
    gens = [np.random.default_rng(c) for c in as_seed_sequence(seed).spawn(member_count)]
    noise = _member_noise_stream(gens, dim, schedule.num_steps + 1)
    dtau = schedule.delta_tau
    states = next(noise).copy()
    for step in range(schedule.num_steps - 1, -1, -1):
        tau = (step + 1) * dtau
        _, _, drift, diffusion_sq = schedule.evaluate(min(tau, 1.0 - schedule.clamp))
        scores = score_fn(states, tau)
        states = (
            (1.0 - drift * dtau) * states
            + (diffusion_sq * dtau) * scores
            + np.sqrt(diffusion_sq * dtau) * next(noise)
        )
        # A failed comparison also catches NaN, so one reduction covers both
        # non-finite states and growth that would overflow the score kernel.
        largest = float(np.abs(states).max())
        if not largest < _DIVERGENCE_LIMIT:
            raise DivergenceError(
                f"reverse SDE diverged at pseudo-time step {step} (tau={step * dtau:.6g}, "
                f"max |state|={largest:.3g}); likely the observation noise is too small "
                f"for the pseudo-time resolution"
            )
    return Ensemble(states)
