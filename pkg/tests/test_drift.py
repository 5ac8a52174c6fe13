"""Drift tests.

The KL oracle is the independent diagonal-case formula; the implementation
goes through Cholesky factors, so agreement is a real check.  The
Monte-Carlo comparison pins the closed form to the definition.
"""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segreg.drift import (
    COV_RIDGE,
    LatentSnapshot,
    drift_report,
    fit_moments,
    gaussian_kl,
    make_probe,
    pca_project,
)
from segreg.gaussianity import GaussianMoments


def moments(mean, var):
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    return GaussianMoments(mean=mean, cov=np.diag(np.atleast_1d(np.asarray(var, float))))


def diag_kl(mu_a, var_a, mu_b, var_b):
    """Independent per-coordinate KL for diagonal Gaussians."""
    mu_a, var_a = np.atleast_1d(np.asarray(mu_a, float)), np.atleast_1d(np.asarray(var_a, float))
    mu_b, var_b = np.atleast_1d(np.asarray(mu_b, float)), np.atleast_1d(np.asarray(var_b, float))
    return 0.5 * float(
        np.sum(var_a / var_b + (mu_b - mu_a) ** 2 / var_b - 1.0 + np.log(var_b / var_a))
    )


# --- moment fitting ---


def test_fit_moments_two_point_fixture():
    m = fit_moments(np.array([[0.0, 0.0], [2.0, 0.0]]))
    assert np.allclose(m.mean, [1.0, 0.0], atol=1e-15)
    assert np.allclose(m.cov, np.diag([2.0 + COV_RIDGE, COV_RIDGE]), atol=1e-15)


def test_fit_moments_matches_numpy_cov():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(40, 3))
    m = fit_moments(x, ridge=0.0)
    assert np.allclose(m.cov, np.cov(x, rowvar=False, ddof=1), atol=1e-12)


def test_fit_moments_rejects_single_row():
    with pytest.raises(ValueError, match="rows"):
        fit_moments(np.ones((1, 4)))


def test_ridge_keeps_degenerate_fit_invertible():
    x = np.zeros((10, 3))
    x[:, 0] = np.arange(10.0)
    m = fit_moments(x)
    assert np.linalg.cond(m.cov) < 1e6


# --- KL divergence ---


def test_kl_standard_vs_shifted_is_half():
    # 1-D, unit variances, unit mean gap: KL = mu^2 / 2 = 0.5 on the nose
    assert gaussian_kl(moments(0.0, 1.0), moments(1.0, 1.0)) == pytest.approx(0.5, abs=1e-14)


def test_kl_hand_fixture():
    # tr = 2 + 1, mahalanobis = 1, -d = -2, logdet ratio = -ln 2
    a = moments([1.0, 0.0], [2.0, 1.0])
    b = moments([0.0, 0.0], [1.0, 1.0])
    want = 0.5 * (3.0 + 1.0 - 2.0 - math.log(2.0))
    assert gaussian_kl(a, b) == pytest.approx(want, abs=1e-14)


def test_kl_self_is_zero_and_asymmetric():
    a = moments([0.3, -1.2], [0.5, 2.0])
    b = moments([1.0, 0.0], [1.0, 1.0])
    assert gaussian_kl(a, a) == pytest.approx(0.0, abs=1e-12)
    assert gaussian_kl(a, b) != pytest.approx(gaussian_kl(b, a), abs=1e-3)


def test_kl_full_covariance_invariant_to_rotation():
    # KL is invariant under a shared orthogonal change of basis
    rng = np.random.default_rng(3)
    q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    mu_a, mu_b = rng.normal(size=4), rng.normal(size=4)
    va, vb = rng.uniform(0.5, 2.0, 4), rng.uniform(0.5, 2.0, 4)
    plain = gaussian_kl(moments(mu_a, va), moments(mu_b, vb))
    rot = gaussian_kl(
        GaussianMoments(mean=q @ mu_a, cov=q @ np.diag(va) @ q.T),
        GaussianMoments(mean=q @ mu_b, cov=q @ np.diag(vb) @ q.T),
    )
    assert rot == pytest.approx(plain, rel=1e-10)


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.floats(-3, 3), min_size=2, max_size=4),
    st.lists(st.floats(0.1, 4.0), min_size=2, max_size=4),
    st.lists(st.floats(-3, 3), min_size=2, max_size=4),
    st.lists(st.floats(0.1, 4.0), min_size=2, max_size=4),
)
def test_kl_matches_diagonal_oracle(mu_a, va, mu_b, vb):
    d = min(len(mu_a), len(va), len(mu_b), len(vb))
    mu_a, va, mu_b, vb = mu_a[:d], va[:d], mu_b[:d], vb[:d]
    got = gaussian_kl(moments(mu_a, va), moments(mu_b, vb))
    assert got == pytest.approx(diag_kl(mu_a, va, mu_b, vb), rel=1e-10, abs=1e-12)
    assert got >= -1e-12


def test_kl_against_monte_carlo():
    rng = np.random.default_rng(11)
    d = 3
    raw = rng.normal(size=(d, d))
    cov_a = raw @ raw.T + 0.5 * np.eye(d)
    raw = rng.normal(size=(d, d))
    cov_b = raw @ raw.T + 0.5 * np.eye(d)
    a = GaussianMoments(mean=rng.normal(size=d), cov=cov_a)
    b = GaussianMoments(mean=rng.normal(size=d) * 0.5, cov=cov_b)

    x = rng.multivariate_normal(a.mean, a.cov, size=200_000)

    def logpdf(pts, m):
        diff = pts - m.mean
        sol = np.linalg.solve(m.cov, diff.T).T
        _, logdet = np.linalg.slogdet(m.cov)
        return -0.5 * (np.sum(diff * sol, axis=1) + logdet + d * math.log(2 * math.pi))

    mc = float(np.mean(logpdf(x, a) - logpdf(x, b)))
    assert gaussian_kl(a, b) == pytest.approx(mc, rel=0.02)


# --- probes and snapshots ---


def test_probe_is_deterministic_and_stratified():
    rng = np.random.default_rng(5)
    masks = rng.integers(0, 3, size=(4, 16, 16)).astype(np.uint8)
    p1 = make_probe(masks, n_pixels=90, seed=7)
    p2 = make_probe(masks, n_pixels=90, seed=7)
    assert np.array_equal(p1.image_idx, p2.image_idx)
    assert np.array_equal(p1.rows, p2.rows)
    assert p1.size == 90
    counts = np.bincount(p1.labels, minlength=3)
    assert (counts == 30).all()
    # positions actually carry the advertised labels
    assert np.array_equal(masks[p1.image_idx, p1.rows, p1.cols], p1.labels)


def test_probe_rolls_shortfall_into_background():
    masks = np.zeros((1, 16, 16), dtype=np.uint8)
    masks[0, :2, :2] = 1  # only 4 pixels of class 1
    p = make_probe(masks, n_pixels=100, seed=0)
    assert p.size == 100
    counts = np.bincount(p.labels, minlength=2)
    assert counts[1] == 4 and counts[0] == 96


def test_probe_seed_changes_selection():
    masks = np.zeros((2, 16, 16), dtype=np.uint8)
    a = make_probe(masks, n_pixels=32, seed=0)
    b = make_probe(masks, n_pixels=32, seed=1)
    assert not (
        np.array_equal(a.image_idx, b.image_idx)
        and np.array_equal(a.rows, b.rows)
        and np.array_equal(a.cols, b.cols)
    )


def test_snapshot_class_moments_respects_row_floor():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(20, 4))
    labels = np.array([0] * 16 + [1] * 4)  # class 1 has exactly d rows: too few
    snap = LatentSnapshot(stage=0, latents=z, labels=labels)
    cm = snap.class_moments()
    assert 0 in cm and 1 not in cm


# --- drift report ---


def make_snap(stage, rng, shift=0.0, scale=1.0, n=200, d=3):
    z = rng.normal(size=(n, d)) * scale + shift
    labels = np.repeat(np.arange(2), n // 2)
    return LatentSnapshot(stage=stage, latents=z, labels=labels)


def test_drift_zero_for_identical_snapshots():
    z = np.random.default_rng(0).normal(size=(100, 3))
    labels = np.zeros(100, dtype=np.int64)
    snaps = [LatentSnapshot(stage=t, latents=z.copy(), labels=labels) for t in range(3)]
    rep = drift_report(snaps)
    assert rep.total == pytest.approx(0.0, abs=1e-12)
    assert rep.step_kl == pytest.approx((0.0, 0.0), abs=1e-12)


def test_drift_total_is_sum_of_steps():
    rng = np.random.default_rng(4)
    snaps = [make_snap(t, rng, shift=0.5 * t) for t in range(4)]
    rep = drift_report(snaps)
    assert len(rep.step_kl) == 3
    assert rep.total == pytest.approx(sum(rep.step_kl), abs=1e-12)
    assert all(k > 0 for k in rep.step_kl)
    assert rep.stages == (0, 1, 2, 3)


def test_drift_step_matches_direct_kl():
    rng = np.random.default_rng(9)
    s0, s1 = make_snap(0, rng), make_snap(1, rng, shift=1.0)
    rep = drift_report([s0, s1])
    direct = gaussian_kl(fit_moments(s1.latents), fit_moments(s0.latents))
    assert rep.step_kl[0] == pytest.approx(direct, abs=1e-14)


def test_drift_per_class_series():
    rng = np.random.default_rng(6)
    snaps = [make_snap(t, rng, shift=0.3 * t) for t in range(3)]
    rep = drift_report(snaps)
    assert set(rep.per_class_kl) == {0, 1}
    for series in rep.per_class_kl.values():
        assert len(series) == 2
        assert all(v is not None and v > 0 for v in series)
    d = rep.to_dict()
    assert d["total"] == pytest.approx(rep.total)
    assert set(d["per_class_kl"]) == {"0", "1"}


def test_drift_needs_two_snapshots():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="two"):
        drift_report([make_snap(0, rng)])


# --- PCA ---


def test_pca_recovers_dominant_direction():
    rng = np.random.default_rng(8)
    t = rng.normal(size=500)
    direction = np.array([1.0, 1.0]) / math.sqrt(2.0)
    x = np.outer(t, direction) + 0.05 * rng.normal(size=(500, 2))
    coords, comps, explained = pca_project(x, k=2)
    assert coords.shape == (500, 2) and comps.shape == (2, 2)
    assert abs(abs(comps[0] @ direction) - 1.0) < 1e-3
    assert explained[0] > 0.99 * (1.0 / (1.0 + 0.0025 * 2))
    assert explained[0] >= explained[1] >= 0.0
    assert explained.sum() == pytest.approx(1.0, abs=1e-12)


def test_pca_components_orthonormal():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(60, 5)) @ np.diag([3.0, 2.0, 1.0, 0.5, 0.1])
    _, comps, _ = pca_project(x, k=3)
    assert np.allclose(comps @ comps.T, np.eye(3), atol=1e-10)


def test_pca_sign_convention_stable_under_flip():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(80, 4)) * np.array([4.0, 1.0, 0.5, 0.2])
    _, c1, _ = pca_project(x, k=2)
    _, c2, _ = pca_project(-x, k=2)
    assert np.allclose(c1, c2, atol=1e-10)
    for row in c1:
        assert row[np.argmax(np.abs(row))] > 0


def test_pca_coords_reproduce_variances():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(300, 3)) * np.array([5.0, 1.0, 0.2])
    coords, _, explained = pca_project(x, k=3)
    var = coords.var(axis=0, ddof=1)
    assert var[0] > var[1] > var[2]
    assert explained.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(var / var.sum(), explained, atol=1e-12)


def test_pca_validates_k():
    with pytest.raises(ValueError, match="k="):
        pca_project(np.zeros((10, 2)), k=3)
