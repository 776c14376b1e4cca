"""Partial, possibly nonlinear observations of a state vector.

Components are observed in rotating contiguous blocks: the state is split
into ``block_count`` nearly equal blocks and the block indexed by
``step mod block_count`` is measured at each step, so every component is
seen exactly once over any window of ``block_count`` consecutive steps.
Each component carries a fixed operator kind, either the identity or the
arctangent, and measurements add independent Gaussian noise.
"""

from dataclasses import dataclass

import numpy as np

from .diffusion import as_seed_sequence
from .errors import DataError

DIRECT = "direct"
ARCTAN = "arctan"


def _block_slices(dim: int, block_count: int) -> list[slice]:
    """Contiguous partition into block_count blocks, earlier blocks larger."""
    if not 1 <= block_count <= dim:
        raise ValueError(f"block_count must lie in [1, {dim}], got {block_count}")
    size, extra = divmod(dim, block_count)
    slices = []
    start = 0
    for b in range(block_count):
        stop = start + size + (1 if b < extra else 0)
        slices.append(slice(start, stop))
        start = stop
    return slices


def build_block_mask(dim: int, block_count: int, step: int) -> np.ndarray:
    """Boolean mask selecting the block observed at the given step index."""
    if step < 0:
        raise ValueError(f"step index must be nonnegative, got {step}")
    slices = _block_slices(dim, block_count)
    mask = np.zeros(dim, dtype=bool)
    mask[slices[step % block_count]] = True
    return mask


@dataclass(frozen=True)
class ObservationSpec:
    """Per-component operator kinds plus the block schedule and noise level.

    Parameters
    ----------
    kinds:
        One of ``"direct"`` or ``"arctan"`` per state component.
    block_count:
        Number of rotating observation blocks B, 1 <= B <= dim.
    noise_std:
        Standard deviation of the additive measurement noise, > 0.
    """

    kinds: tuple[str, ...]
    block_count: int
    noise_std: float

    def __post_init__(self):
        kinds = tuple(self.kinds)
        if len(kinds) == 0:
            raise ValueError("kinds must cover at least one component")
        bad = sorted({k for k in kinds if k not in (DIRECT, ARCTAN)})
        if bad:
            raise ValueError(f"unknown operator kinds {bad}; use {DIRECT!r} or {ARCTAN!r}")
        _block_slices(len(kinds), self.block_count)
        if not self.noise_std > 0.0:
            raise ValueError(f"noise_std must be positive, got {self.noise_std}")
        object.__setattr__(self, "kinds", kinds)
        object.__setattr__(self, "_arctan", np.array([k == ARCTAN for k in kinds]))

    @property
    def dim(self) -> int:
        return len(self.kinds)

    @classmethod
    def direct(cls, dim: int, block_count: int, noise_std: float) -> "ObservationSpec":
        """All components observed through the identity."""
        return cls((DIRECT,) * dim, block_count, noise_std)

    @classmethod
    def mixed(cls, dim: int, block_count: int, noise_std: float) -> "ObservationSpec":
        """Alternate direct/arctan within each block by local index parity.

        Even local indices are direct and odd ones arctan, so each block is
        half and half with any odd remainder going to direct.
        """
        kinds = [DIRECT] * dim
        for sl in _block_slices(dim, block_count):
            for local, i in enumerate(range(sl.start, sl.stop)):
                if local % 2 == 1:
                    kinds[i] = ARCTAN
        return cls(tuple(kinds), block_count, noise_std)


@dataclass(frozen=True)
class ObservationRecord:
    """One measurement: values where the mask is true, NaN elsewhere."""

    values: np.ndarray
    mask: np.ndarray
    step: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        if values.ndim != 1 or values.shape != mask.shape:
            raise ValueError(
                f"values and mask must be equal-length vectors, got {values.shape} and {mask.shape}"
            )
        if self.step < 0:
            raise ValueError(f"step index must be nonnegative, got {self.step}")
        if not np.isfinite(values[mask]).all():
            raise DataError(f"observation at step {self.step} has non-finite observed entries")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)


def apply_operator(x: np.ndarray, spec: ObservationSpec) -> np.ndarray:
    """Map states through the componentwise operators (no masking, no noise).

    Accepts a state vector or any array whose trailing axis is the state
    dimension; the operator acts elementwise along that axis.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != spec.dim:
        raise ValueError(f"state dim {x.shape[-1]} does not match spec dim {spec.dim}")
    return np.where(spec._arctan, np.arctan(x), x)


def synthesize_observation(
    x_true: np.ndarray, spec: ObservationSpec, step: int, seed
) -> ObservationRecord:
    """Measure a true state: operator, block mask, additive Gaussian noise."""
    x_true = np.asarray(x_true, dtype=float)
    if x_true.ndim != 1 or x_true.shape[0] != spec.dim:
        raise ValueError(f"expected a length-{spec.dim} state, got shape {x_true.shape}")
    if not np.isfinite(x_true).all():
        raise DataError("true state contains non-finite entries")
    mask = build_block_mask(spec.dim, spec.block_count, step)
    rng = np.random.default_rng(as_seed_sequence(seed))
    noisy = apply_operator(x_true, spec) + spec.noise_std * rng.standard_normal(spec.dim)
    return ObservationRecord(np.where(mask, noisy, np.nan), mask, step)


def likelihood_gradient(
    z: np.ndarray, obs: ObservationRecord, spec: ObservationSpec
) -> np.ndarray:
    """Gradient of the observation log-likelihood at the state z.

    For Gaussian noise with variance noise_std^2 on each observed component,

        grad_i = -H_i'(z_i) * (H_i(z_i) - y_i) / noise_std^2

    on observed components and zero elsewhere.  H' is 1 for direct
    components and 1 / (1 + z_i^2) for arctan ones.  Accepts a state vector
    or an array of states with the component axis last.
    """
    z = np.asarray(z, dtype=float)
    if obs.mask.shape[0] != spec.dim:
        raise ValueError(
            f"observation mask length {obs.mask.shape[0]} does not match spec dim {spec.dim}"
        )
    if z.shape[-1] != spec.dim:
        raise ValueError(f"state dim {z.shape[-1]} does not match spec dim {spec.dim}")
    if not np.isfinite(z).all():
        raise DataError("state contains non-finite entries")
    mask = obs.mask
    grad = np.zeros_like(z)
    if not mask.any():
        return grad
    zm = z[..., mask]
    residual = np.where(spec._arctan[mask], np.arctan(zm), zm) - obs.values[mask]
    jacobian = np.where(spec._arctan[mask], 1.0 / (1.0 + zm * zm), 1.0)
    grad[..., mask] = -jacobian * residual / (spec.noise_std**2)
    return grad


class _LikelihoodPlan:
    """Mask constants of one observation, precomputed for repeated gradients.

    Evaluating the gradient inside the reverse-SDE loop hits the same record
    hundreds of times per assimilation step; hoisting the masked index set,
    operator split, and noise scale out of that loop keeps the per-call work
    to a handful of array operations.  Calls must agree elementwise with
    ``likelihood_gradient`` on 2-d state batches.
    """

    __slots__ = ("dim", "idx", "full", "arctan_sel", "any_arctan", "values", "var")

    def __init__(self, obs: ObservationRecord, spec: ObservationSpec):
        if obs.mask.shape[0] != spec.dim:
            raise ValueError(
                f"observation mask length {obs.mask.shape[0]} does not match spec dim {spec.dim}"
            )
        self.dim = spec.dim
        self.idx = np.flatnonzero(obs.mask)
        self.full = self.idx.size == spec.dim
        self.arctan_sel = spec._arctan[obs.mask]
        self.any_arctan = bool(self.arctan_sel.any())
        self.values = obs.values[obs.mask]
        self.var = spec.noise_std**2

    def __call__(self, z: np.ndarray) -> np.ndarray:
        if self.idx.size == 0:
            return np.zeros_like(z)
        zm = z if self.full else z[:, self.idx]
        if self.any_arctan:
            term = np.where(self.arctan_sel, np.arctan(zm), zm) - self.values
            term *= np.where(self.arctan_sel, 1.0 / (1.0 + zm * zm), 1.0)
        else:
            term = zm - self.values
        np.negative(term, out=term)
        term /= self.var
        if self.full:
            return term
        grad = np.zeros_like(z)
        grad[:, self.idx] = term
        return grad
