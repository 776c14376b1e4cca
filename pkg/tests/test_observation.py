import numpy as np
import pytest

from ensda import (
    ObservationRecord,
    ObservationSpec,
    apply_operator,
    build_block_mask,
    likelihood_gradient,
    synthesize_observation,
)
from ensda.errors import DataError
from ensda.observation import _LikelihoodPlan


# --- rotating block masks -----------------------------------------------------


def test_block_mask_even_split():
    # d=8, B=4: two components per block, rotating with the step
    assert list(np.flatnonzero(build_block_mask(8, 4, 0))) == [0, 1]
    assert list(np.flatnonzero(build_block_mask(8, 4, 1))) == [2, 3]
    assert list(np.flatnonzero(build_block_mask(8, 4, 3))) == [6, 7]
    assert list(np.flatnonzero(build_block_mask(8, 4, 4))) == [0, 1]  # wraps


def test_block_mask_uneven_split_front_loaded():
    # d=7, B=3: remainder goes to the earliest blocks: sizes 3, 2, 2
    assert list(np.flatnonzero(build_block_mask(7, 3, 0))) == [0, 1, 2]
    assert list(np.flatnonzero(build_block_mask(7, 3, 1))) == [3, 4]
    assert list(np.flatnonzero(build_block_mask(7, 3, 2))) == [5, 6]


def test_block_masks_partition_components():
    for dim, blocks in [(8, 4), (7, 3), (5, 5), (40, 4), (6, 1)]:
        hits = np.zeros(dim, dtype=int)
        for step in range(blocks):
            hits += build_block_mask(dim, blocks, step).astype(int)
        np.testing.assert_array_equal(hits, 1)


def test_single_block_is_full():
    assert build_block_mask(5, 1, 0).all()
    assert build_block_mask(5, 1, 17).all()


def test_block_mask_validation():
    with pytest.raises(ValueError):
        build_block_mask(4, 0, 0)
    with pytest.raises(ValueError):
        build_block_mask(4, 5, 0)


# --- operator layouts -----------------------------------------------------------


def test_direct_spec_kinds():
    spec = ObservationSpec.direct(5, 2, 0.1)
    assert spec.kinds == ("direct",) * 5
    assert spec.dim == 5 and spec.block_count == 2 and spec.noise_std == 0.1


def test_mixed_spec_alternates_within_blocks():
    # blocks of d=7, B=3 are [0,1,2], [3,4], [5,6]; even local index -> direct
    spec = ObservationSpec.mixed(7, 3, 0.1)
    assert spec.kinds == ("direct", "arctan", "direct", "direct", "arctan", "direct", "arctan")


def test_spec_validation():
    with pytest.raises(ValueError):
        ObservationSpec.direct(4, 1, 0.0)
    with pytest.raises(ValueError):
        ObservationSpec(("direct", "bad"), 1, 0.1)


def test_apply_operator_values():
    spec = ObservationSpec(("direct", "arctan"), 1, 0.1)
    out = apply_operator(np.array([1.0, 1.0]), spec)
    assert out[0] == 1.0
    assert abs(out[1] - np.pi / 4.0) < 1e-15
    batch = apply_operator(np.ones((3, 2)), spec)
    assert batch.shape == (3, 2)
    with pytest.raises(ValueError):
        apply_operator(np.ones(3), spec)


# --- synthesis --------------------------------------------------------------------


def test_synthesize_masks_and_determinism():
    spec = ObservationSpec.direct(8, 4, 0.05)
    x = np.arange(8.0)
    a = synthesize_observation(x, spec, 1, seed=9)
    b = synthesize_observation(x, spec, 1, seed=9)
    np.testing.assert_array_equal(a.values, b.values)
    np.testing.assert_array_equal(a.mask, build_block_mask(8, 4, 1))
    assert np.isnan(a.values[~a.mask]).all()
    assert np.isfinite(a.values[a.mask]).all()
    assert a.step == 1


def test_synthesize_noise_level():
    spec = ObservationSpec.direct(2, 1, 0.3)
    x = np.array([1.0, -2.0])
    draws = np.array([synthesize_observation(x, spec, 0, seed=s).values for s in range(4000)])
    np.testing.assert_allclose(draws.mean(axis=0), x, atol=0.02)
    np.testing.assert_allclose(draws.std(axis=0), 0.3, rtol=0.05)


def test_synthesize_applies_operator_before_noise():
    spec = ObservationSpec(("arctan",), 1, 1e-12)
    rec = synthesize_observation(np.array([1.0]), spec, 0, seed=0)
    assert abs(rec.values[0] - np.pi / 4.0) < 1e-9


def test_record_validation():
    mask = np.array([True, False])
    ObservationRecord(np.array([1.0, np.nan]), mask, 0)
    with pytest.raises(DataError):
        ObservationRecord(np.array([np.nan, np.nan]), mask, 0)  # masked value missing
    with pytest.raises(ValueError):
        ObservationRecord(np.array([1.0, np.nan]), mask, -1)


# --- likelihood gradient ------------------------------------------------------------


def test_gradient_frozen_direct():
    # -(z - y) / noise^2 on the observed component, zero elsewhere
    spec = ObservationSpec.direct(2, 2, 0.1)
    rec = ObservationRecord(np.array([0.6, np.nan]), np.array([True, False]), 0)
    grad = likelihood_gradient(np.array([1.0, 5.0]), rec, spec)
    np.testing.assert_allclose(grad, [-40.0, 0.0], rtol=1e-12)


def test_gradient_frozen_arctan():
    spec = ObservationSpec(("arctan",), 1, 1.0)
    rec = ObservationRecord(np.array([0.1]), np.array([True]), 0)
    grad = likelihood_gradient(np.array([0.0]), rec, spec)
    # jacobian 1/(1+0) = 1, residual arctan(0) - 0.1 = -0.1
    np.testing.assert_allclose(grad, [0.1], rtol=1e-12)
    at_obs = likelihood_gradient(np.array([np.tan(0.1)]), rec, spec)
    np.testing.assert_allclose(at_obs, [0.0], atol=1e-15)


def _log_likelihood(z, rec, spec):
    values = apply_operator(z, spec)
    residual = values[rec.mask] - rec.values[rec.mask]
    return -0.5 * float(residual @ residual) / spec.noise_std**2


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(12)
    for dim, blocks, step in [(8, 4, 1), (7, 3, 0), (5, 1, 0)]:
        spec = ObservationSpec.mixed(dim, blocks, 0.2)
        truth = rng.normal(size=dim)
        rec = synthesize_observation(truth, spec, step, seed=3)
        z = rng.normal(size=dim)
        grad = likelihood_gradient(z, rec, spec)
        h = 1e-6
        for i in range(dim):
            zp, zm = z.copy(), z.copy()
            zp[i] += h
            zm[i] -= h
            fd = (_log_likelihood(zp, rec, spec) - _log_likelihood(zm, rec, spec)) / (2 * h)
            if rec.mask[i]:
                assert abs(grad[i] - fd) <= 1e-5 * max(1.0, abs(fd))
            else:
                assert grad[i] == 0.0


def test_gradient_batched_rows_match_single():
    spec = ObservationSpec.mixed(6, 2, 0.5)
    rec = synthesize_observation(np.zeros(6), spec, 1, seed=1)
    rng = np.random.default_rng(0)
    z = rng.normal(size=(4, 6))
    batched = likelihood_gradient(z, rec, spec)
    for k in range(4):
        np.testing.assert_array_equal(batched[k], likelihood_gradient(z[k], rec, spec))


def test_gradient_validation():
    spec = ObservationSpec.direct(3, 1, 0.1)
    rec = synthesize_observation(np.zeros(3), spec, 0, seed=0)
    with pytest.raises(ValueError):
        likelihood_gradient(np.zeros(4), rec, spec)
    with pytest.raises(DataError):
        likelihood_gradient(np.array([np.nan, 0.0, 0.0]), rec, spec)


def test_plan_matches_gradient_bitwise():
    # the hoisted per-step plan must agree exactly with the reference function
    rng = np.random.default_rng(5)
    cases = [
        ObservationSpec.mixed(8, 4, 0.3),
        ObservationSpec.mixed(8, 1, 0.3),
        ObservationSpec.direct(8, 4, 0.05),
        ObservationSpec.direct(8, 1, 0.05),
    ]
    for spec in cases:
        for step in range(spec.block_count):
            rec = synthesize_observation(rng.normal(size=8), spec, step, seed=2)
            plan = _LikelihoodPlan(rec, spec)
            z = rng.normal(size=(10, 8))
            np.testing.assert_array_equal(plan(z), likelihood_gradient(z, rec, spec))


def test_plan_empty_mask():
    spec = ObservationSpec.direct(3, 1, 0.1)
    rec = ObservationRecord(np.full(3, np.nan), np.zeros(3, dtype=bool), 0)
    z = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_array_equal(_LikelihoodPlan(rec, spec)(z), np.zeros((4, 3)))
    np.testing.assert_array_equal(likelihood_gradient(z, rec, spec), np.zeros((4, 3)))
