import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from svdonet.decomposition import (
    Decomposition,
    SnapshotKind,
    SnapshotMatrix,
    SnapshotScaler,
    SnapshotSVD,
    UnreachedEnergyWarning,
    center_scale,
    cumulative_energy,
    principal_components,
    principal_directions,
    rank_for_energy,
    reconstruct,
    svd,
    truncate,
)
from svdonet.exceptions import InvalidData, InvalidRank, InvalidShape, NotFittedError

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
matrices = st.tuples(st.integers(1, 12), st.integers(1, 12)).flatmap(
    lambda s: arrays(np.float64, s, elements=finite)
)


def _orthonormal(M, tol=1e-10):
    G = M.T @ M
    return np.allclose(G, np.eye(G.shape[0]), atol=tol)


# --- center_scale ---------------------------------------------------------


def test_mean_auto_on_simple_column():
    X, prep = center_scale(np.array([[1.0], [2.0], [3.0]]))
    assert prep.c[0] == pytest.approx(2.0)
    assert prep.d[0] == pytest.approx(1.0)
    np.testing.assert_allclose(X[:, 0], [-1, 0, 1])


def test_none_none_is_identity():
    A = np.random.default_rng(1).normal(size=(5, 4))
    X, prep = center_scale(A, "none", "none")
    np.testing.assert_array_equal(X, A)
    np.testing.assert_array_equal(prep.c, 0)
    np.testing.assert_array_equal(prep.d, 1)


def test_constant_column_keeps_unit_scale():
    X, prep = center_scale(np.array([[5.0], [5.0], [5.0]]))
    np.testing.assert_array_equal(X, 0)
    assert prep.d[0] == 1.0


def test_center_scale_rejects_nonfinite():
    with pytest.raises(InvalidData):
        center_scale(np.array([[1.0], [np.nan]]))


def test_center_scale_keeps_snapshot_type():
    snap = SnapshotMatrix(np.arange(6.0).reshape(3, 2), SnapshotKind.SCENARIO,
                          np.arange(3.0)[:, None], np.eye(2))
    out, _ = center_scale(snap)
    assert isinstance(out, SnapshotMatrix)
    assert out.kind is SnapshotKind.SCENARIO


@settings(max_examples=40, deadline=None)
@given(matrices)
def test_center_scale_moments(A):
    X, prep = center_scale(A)
    assert np.all(prep.d > 0)
    scale = np.abs(A).max(axis=0) + 1
    assert np.all(np.abs(X.mean(axis=0)) <= 1e-12 * scale * max(1, A.shape[0]))
    if A.shape[0] > 1:
        sd = A.std(axis=0, ddof=1)
        ok = sd >= 1e-12 * scale
        np.testing.assert_allclose(X[:, ok].std(axis=0, ddof=1), 1.0, atol=1e-10)


# --- svd ------------------------------------------------------------------


def test_identity_singular_values():
    np.testing.assert_allclose(svd(np.eye(3)).sigma, [1, 1, 1])


def test_outer_product_rank_one():
    a = np.array([2.0, 0.0, 0.0])
    b = np.array([0.0, 3.0])
    s = svd(np.outer(a, b)).sigma
    assert s[0] == pytest.approx(6.0)
    assert np.all(s[1:] < 1e-12)


def test_hand_two_by_two():
    s = svd(np.array([[3.0, 0.0], [4.0, 5.0]])).sigma
    np.testing.assert_allclose(s, [np.sqrt(45), np.sqrt(5)], rtol=1e-12)


def test_sign_convention_largest_entry_positive():
    A = np.random.default_rng(3).normal(size=(8, 5))
    dec = svd(A)
    idx = np.abs(dec.U).argmax(axis=0)
    assert np.all(dec.U[idx, np.arange(dec.rank)] > 0)
    # the same input gives the same factors
    dec2 = svd(A.copy())
    np.testing.assert_array_equal(dec.U, dec2.U)


@settings(max_examples=40, deadline=None)
@given(matrices)
def test_svd_reconstructs_and_is_orthonormal(A):
    dec = svd(A)
    assert np.all(np.diff(dec.sigma) <= 1e-12 * (dec.sigma[0] + 1))
    assert np.all(dec.sigma >= 0)
    rec = (dec.U * dec.sigma) @ dec.V.T
    nrm = np.linalg.norm(A)
    if nrm > 0:
        assert np.linalg.norm(rec - A) / nrm < 1e-10
    full = dec.sigma > 1e-8 * (dec.sigma[0] + 1e-300)
    assert _orthonormal(dec.V[:, full]) and _orthonormal(dec.U[:, full])


# --- truncate -------------------------------------------------------------


def test_truncate_full_rank_is_noop():
    dec = svd(np.random.default_rng(0).normal(size=(6, 4)))
    t = truncate(dec, dec.rank)
    np.testing.assert_array_equal(t.sigma, dec.sigma)
    assert t.total_energy == dec.total_energy


def test_truncate_identity_keeps_total_energy():
    t = truncate(svd(np.eye(3)), 1)
    np.testing.assert_allclose(t.sigma, [1.0])
    assert t.total_energy == pytest.approx(3.0)


@pytest.mark.parametrize("r", [0, 5])
def test_truncate_rejects_bad_rank(r):
    with pytest.raises(InvalidRank):
        truncate(svd(np.eye(4)), r)


def test_rank_two_truncation_spectral_error_equals_sigma2():
    rng = np.random.default_rng(7)
    A = rng.normal(size=(9, 2)) @ rng.normal(size=(2, 6))
    dec = svd(A)
    t = truncate(dec, 1)
    err = np.linalg.norm(A - (t.U * t.sigma) @ t.V.T, 2)
    assert err == pytest.approx(dec.sigma[1], rel=1e-10)


@settings(max_examples=25, deadline=None)
@given(matrices, st.integers(1, 12))
def test_truncation_residual_matches_tail_energy(A, r):
    dec = svd(A)
    r = min(r, dec.rank)
    t = truncate(dec, r)
    res = np.linalg.norm(A - (t.U * t.sigma) @ t.V.T) ** 2
    tail = np.sum(dec.sigma[r:] ** 2)
    assert res == pytest.approx(tail, rel=1e-8, abs=1e-8 * (dec.total_energy + 1))


def test_eckart_young_beats_random_projections():
    rng = np.random.default_rng(11)
    for _ in range(50):
        A = rng.normal(size=(20, 10))
        dec = svd(A)
        for r in range(1, 10):
            t = truncate(dec, r)
            best = np.linalg.norm(A - (t.U * t.sigma) @ t.V.T)
            for _ in range(100):
                Q, _ = np.linalg.qr(rng.normal(size=(20, r)))
                assert best <= np.linalg.norm(A - Q @ (Q.T @ A)) + 1e-10


# --- components, directions, energy ---------------------------------------


def test_identity_components_and_directions():
    dec = svd(np.eye(3))
    np.testing.assert_allclose(np.abs(principal_components(dec)), np.eye(3), atol=1e-14)
    np.testing.assert_allclose(principal_components(dec) @ principal_directions(dec).T, np.eye(3),
                               atol=1e-14)


def test_component_norms_and_direction_orthonormality():
    A = np.random.default_rng(5).normal(size=(10, 6))
    dec = svd(A)
    Phi, V = principal_components(dec), principal_directions(dec)
    np.testing.assert_allclose(np.linalg.norm(Phi, axis=0), dec.sigma, rtol=1e-10)
    assert _orthonormal(V)
    np.testing.assert_allclose(Phi @ V.T, A, atol=1e-10)


def test_cumulative_energy_examples():
    dec = Decomposition(np.eye(3), np.array([1.0, 1.0, 1.0]), np.eye(3))
    assert cumulative_energy(dec, 3) == pytest.approx(1.0)
    dec = Decomposition(np.eye(2), np.array([4.0, 3.0]), np.eye(2))
    assert cumulative_energy(dec, 1) == pytest.approx(0.64)
    assert cumulative_energy(dec, 1, convention="amplitude") == pytest.approx(4 / 7)
    with pytest.raises(InvalidRank):
        cumulative_energy(dec, 3)


def test_unsorted_sigma_rejected():
    with pytest.raises(ValueError):
        Decomposition(np.eye(2), np.array([3.0, 4.0]), np.eye(2))


def test_rank_for_energy_examples():
    assert rank_for_energy(Decomposition(np.eye(3), np.array([1.0, 0, 0]), np.eye(3)), 0.95) == 1
    dec = Decomposition(np.eye(2), np.array([4.0, 3.0]), np.eye(2))
    assert rank_for_energy(dec, 0.5) == 1
    assert rank_for_energy(dec, 0.7) == 2


def test_rank_for_energy_unreached_flag():
    dec = truncate(svd(np.eye(4)), 2)
    with pytest.warns(UnreachedEnergyWarning):
        k, reached = rank_for_energy(dec, 0.9, return_reached=True)
    assert (k, reached) == (2, False)


@settings(max_examples=30, deadline=None)
@given(matrices)
def test_energy_monotone_and_complete(A):
    dec = svd(A)
    if dec.total_energy == 0:
        return
    vals = [cumulative_energy(dec, k) for k in range(1, dec.rank + 1)]
    assert all(b >= a - 1e-15 for a, b in zip(vals, vals[1:]))
    assert vals[-1] == pytest.approx(1.0, abs=1e-12)


# --- reconstruct ----------------------------------------------------------


def test_reconstruct_shape_mismatch():
    with pytest.raises(InvalidShape):
        reconstruct(np.ones((3, 2)), np.ones((4, 1)))


@settings(max_examples=30, deadline=None)
@given(matrices)
def test_center_scale_round_trip_at_full_rank(A):
    X, prep = center_scale(A)
    dec = svd(X)
    rec = reconstruct(principal_components(dec), principal_directions(dec), prep)
    assert np.linalg.norm(rec - A) <= 1e-9 * (np.linalg.norm(A) + 1)


def test_rank_one_exact():
    A = np.outer(np.arange(1.0, 5.0), np.array([1.0, -2.0, 0.5]))
    t = truncate(svd(A), 1)
    np.testing.assert_allclose(reconstruct(principal_components(t), principal_directions(t)), A,
                               atol=1e-10)


# --- estimators -----------------------------------------------------------


def test_scaler_estimator_round_trip():
    A = np.random.default_rng(2).normal(size=(7, 3)) * [1, 10, 100] + [0, 5, -5]
    sc = SnapshotScaler().fit(A)
    np.testing.assert_allclose(sc.inverse_transform(sc.transform(A)), A, atol=1e-12)
    assert sc.get_params() == {"center": "mean", "scale": "auto"}
    with pytest.raises(InvalidShape):
        sc.transform(A[:, :2])


def test_snapshot_svd_estimator():
    rng = np.random.default_rng(4)
    A = rng.normal(size=(30, 2)) @ rng.normal(size=(2, 8)) + rng.normal(size=8)
    est = SnapshotSVD(n_components=2, center="none", scale="none").fit(A)
    assert est.reconstruction_error(A) < 1e-10 + np.linalg.svd(A, compute_uv=False)[2] / np.linalg.norm(A)
    est = SnapshotSVD(energy_threshold=0.999999).fit(A)
    assert est.n_components_ <= 3
    with pytest.raises(NotFittedError):
        SnapshotSVD().transform(A)
