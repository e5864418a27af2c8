import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from diffnormal.metrics import (
    NormalMap,
    angular_error_map,
    ensemble_mean,
    evaluate,
    pixelwise_variance,
    summarize_errors,
)


def random_unit(rng, shape):
    v = rng.standard_normal((*shape, 3))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def test_error_map_examples():
    rng = np.random.default_rng(0)
    gt = NormalMap(random_unit(rng, (4, 5)))
    err, mask = angular_error_map(gt, gt)
    assert mask.all()
    np.testing.assert_allclose(err, 0.0, atol=1e-6)
    err, _ = angular_error_map(NormalMap(-gt.vectors), gt)
    np.testing.assert_allclose(err, 180.0, atol=1e-6)
    a = NormalMap(np.array([[[1.0, 0, 0]]]))
    b = NormalMap(np.array([[[0.0, 1, 0]]]))
    assert angular_error_map(a, b)[0][0, 0] == pytest.approx(90.0, abs=1e-12)


def test_error_map_masks_and_errors():
    v = np.tile([0.0, 0, 1], (2, 2, 1))
    m = np.array([[True, False], [True, True]])
    err, mask = angular_error_map(NormalMap(v, m), NormalMap(v))
    assert np.isnan(err[0, 1]) and not mask[0, 1]
    with pytest.raises(ValueError):
        angular_error_map(NormalMap(v), NormalMap(np.tile(v, (2, 1, 1))))
    z = v.copy()
    z[1, 1] = 0
    with pytest.raises(ValueError):
        angular_error_map(NormalMap(z), NormalMap(v))
    # a zero vector where the mask is off is fine
    off = np.ones((2, 2), bool)
    off[1, 1] = False
    err, _ = angular_error_map(NormalMap(z, off), NormalMap(v))
    assert np.isnan(err[1, 1]) and err[0, 0] == 0.0


def test_renormalizes_within_tolerance():
    v = np.tile([0.0, 0, 1.00005], (1, 1, 1))
    err, _ = angular_error_map(NormalMap(v), NormalMap(np.array([[[0.0, 0, 1]]])))
    assert err[0, 0] == 0.0


def test_clamping_near_unit_dot():
    for eps in (1e-7, -1e-7):
        for sign in (1.0, -1.0):
            a = np.array([[[0.0, 0.0, 1.0 + eps]]])
            b = np.array([[[0.0, 0.0, sign]]])
            err, _ = angular_error_map(NormalMap(a), NormalMap(b))
            assert np.isfinite(err).all()
    # raw dot above one after renormalization must not produce NaN either
    a = np.array([[[1e-9, 0.0, 1.0]]])
    err, _ = angular_error_map(NormalMap(a), NormalMap(a))
    assert np.isfinite(err[0, 0])


def test_summarize_examples():
    r = summarize_errors(np.full((4, 4), 10.0), np.ones((4, 4), bool))
    assert (r.mean_deg, r.median_deg, r.pct_11_25, r.n_valid) == (10.0, 10.0, 100.0, 16)
    half = np.array([[0.0, 45.0], [0.0, 45.0]])
    r = summarize_errors(half, np.ones((2, 2), bool))
    assert (r.pct_22_5, r.pct_30, r.mean_deg) == (50.0, 50.0, 22.5)
    assert r.median_deg == 0.0  # lower median
    with pytest.raises(ValueError):
        summarize_errors(half, np.zeros((2, 2), bool))


def test_thresholds_are_strict():
    r = summarize_errors(np.array([11.25, 22.5, 30.0]), np.ones(3, bool))
    assert (r.pct_11_25, r.pct_22_5, r.pct_30) == (0.0, 100 / 3, 200 / 3)


def brute_force_report(pred, gt, mask):
    vals = []
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            if not mask[i, j]:
                continue
            a, b = pred[i, j], gt[i, j]
            na = math.sqrt(sum(x * x for x in a))
            nb = math.sqrt(sum(x * x for x in b))
            d = sum(x * y for x, y in zip(a, b)) / (na * nb)
            vals.append(math.degrees(math.acos(max(-1.0, min(1.0, d)))))
    vals.sort()
    n = len(vals)
    return (
        sum(vals) / n,
        vals[(n - 1) // 2],
        [100.0 * sum(v < th for v in vals) / n for th in (11.25, 22.5, 30.0)],
        n,
    )


def test_matches_brute_force_8x8():
    rng = np.random.default_rng(3)
    for _ in range(20):
        gt = random_unit(rng, (8, 8))
        pred = gt + 0.6 * rng.standard_normal(gt.shape)
        mask = rng.uniform(size=(8, 8)) > 0.2
        r = evaluate(NormalMap.from_raw(pred), NormalMap(gt, mask))
        mean, med, pcts, n = brute_force_report(pred, gt, mask)
        assert r.n_valid == n
        assert r.mean_deg == pytest.approx(mean, abs=1e-9)
        assert r.median_deg == pytest.approx(med, abs=1e-9)
        assert [r.pct_11_25, r.pct_22_5, r.pct_30] == pcts


def test_rotation_covariance():
    rng = np.random.default_rng(4)
    gt = random_unit(rng, (6, 7))
    pred = random_unit(rng, (6, 7))
    base, _ = angular_error_map(NormalMap(pred), NormalMap(gt))
    for rot in Rotation.random(10, random_state=5):
        m = rot.as_matrix()
        err, _ = angular_error_map(NormalMap(pred @ m.T), NormalMap(gt @ m.T))
        # near 0 deg arccos amplifies rounding, so compare cosines there
        np.testing.assert_allclose(np.cos(np.radians(err)), np.cos(np.radians(base)), atol=1e-9)
        np.testing.assert_allclose(err[base > 1], base[base > 1], atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 180), min_size=1, max_size=64))
def test_threshold_monotonicity(vals):
    r = summarize_errors(np.array(vals), np.ones(len(vals), bool))
    assert r.pct_11_25 <= r.pct_22_5 <= r.pct_30
    assert 0 <= r.mean_deg <= 180


# ----------------------------------------------------------------- variance and ensembles


def test_variance_identical_runs():
    v = random_unit(np.random.default_rng(0), (3, 3))
    rep = pixelwise_variance([NormalMap(v), NormalMap(v.copy()), NormalMap(v.copy())])
    assert rep.mean_variance == 0.0 and not rep.per_pixel.any() and rep.repeats == 3


def test_variance_sign_flip():
    v = np.tile([0.6, 0.0, 0.8], (4, 4, 1))
    w = v.copy()
    w[1, 2, 0] = -0.6
    rep = pixelwise_variance([NormalMap(v), NormalMap(w)])
    # unbiased variance of {0.6, -0.6} is 0.72; averaged over 3 components
    direct = np.var([0.6, -0.6], ddof=1) / 3
    assert rep.per_pixel[1, 2] == pytest.approx(direct, rel=1e-12)
    assert direct == pytest.approx(2 / 3 * (1.2 / 2) ** 2, rel=1e-12)
    assert np.count_nonzero(rep.per_pixel) == 1
    assert rep.mean_variance == pytest.approx(direct / 16, rel=1e-12)


def test_variance_errors():
    v = np.tile([0.0, 0, 1], (2, 2, 1))
    with pytest.raises(ValueError):
        pixelwise_variance([NormalMap(v)])
    with pytest.raises(ValueError):
        pixelwise_variance([NormalMap(v), NormalMap(np.tile(v, (2, 1, 1)))])
    m = np.ones((2, 2), bool)
    m[0, 0] = False
    with pytest.raises(ValueError):
        pixelwise_variance([NormalMap(v), NormalMap(v, m)])


def test_variance_ignores_invalid_pixels():
    rng = np.random.default_rng(2)
    m = np.ones((3, 3), bool)
    m[1, 1] = False
    a, b = random_unit(rng, (3, 3)), random_unit(rng, (3, 3))
    b[m] = a[m]
    rep = pixelwise_variance([NormalMap(a, m), NormalMap(b, m)])
    assert rep.mean_variance == 0.0


def test_ensemble_examples():
    v = random_unit(np.random.default_rng(1), (2, 3))
    single = ensemble_mean([NormalMap(v)])
    np.testing.assert_allclose(single.vectors, v, atol=1e-15)
    anti = ensemble_mean([NormalMap(np.array([[[0.0, 0, 1]]])), NormalMap(np.array([[[0.0, 0, -1]]]))])
    assert not anti.mask[0, 0]
    e = ensemble_mean([NormalMap(np.array([[[1.0, 0, 0]]])), NormalMap(np.array([[[0.0, 1, 0]]]))])
    np.testing.assert_allclose(e.vectors[0, 0], np.array([1, 1, 0]) / np.sqrt(2), rtol=1e-15)


def test_normal_map_validation():
    with pytest.raises(ValueError):
        NormalMap(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        NormalMap(np.zeros((2, 2, 3)), np.ones((3, 2), bool))
    with pytest.raises(ValueError):
        NormalMap(np.full((1, 1, 3), 0.5)).check_unit()
    NormalMap.from_raw(np.full((1, 1, 3), 0.5)).check_unit()
    raw = NormalMap.from_raw(np.zeros((1, 2, 3)) + np.array([[[0, 0, 0]], [[1, 0, 0]]]).reshape(1, 2, 3))
    assert raw.mask.tolist() == [[False, True]]
