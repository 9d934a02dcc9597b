"""Kernels, Gram assembly, (K)CCA solvers, PCA, and the sigma_1 experiment."""

import numpy as np
import pytest

from crossmae.kcca import (CovTriple, ConditioningError, Linear, ModelEncoder,
                           RawFlatten, ViewGrams, cca_sigma, center_gram,
                           kcca_solve, load_gram, patch_kernel, pca_reduce,
                           save_gram, sigma1_experiment, view_gram, Rbf)
from crossmae.model import ArchSpec, init_model
from crossmae.windows import SensorWindow, SynthSpec, generate_windows


def test_patch_kernel_point_examples():
    a = np.array([1.0, 2.0, -1.0])
    assert patch_kernel(Rbf(gamma=0.5), a, a) == 1.0
    assert patch_kernel(Linear(), np.array([1.0, 0.0]), np.array([0.0, 3.0])) == 0.0
    assert abs(patch_kernel(Linear(), a, a) - 6.0) < 1e-12
    with pytest.raises(ValueError):
        Rbf(gamma=0.0)


@pytest.mark.parametrize("kind", [Linear(), Rbf(gamma=0.3)])
def test_patch_gram_is_psd(kind):
    rng = np.random.default_rng(0)
    patches = rng.standard_normal((20, 6))
    gram = np.array([[patch_kernel(kind, a, b) for b in patches] for a in patches])
    assert np.linalg.eigvalsh(gram).min() >= -1e-10


def test_view_gram_single_patch_reduces_to_patch_kernel():
    rng = np.random.default_rng(1)
    views = [rng.standard_normal((1, 5)) for _ in range(6)]
    got = view_gram(views, Linear())
    want = np.array([[patch_kernel(Linear(), a[0], b[0]) for b in views] for a in views])
    assert np.max(np.abs(got - want)) < 1e-12


def test_view_gram_duplicate_views_share_rows():
    rng = np.random.default_rng(2)
    v = rng.standard_normal((3, 4))
    views = [v, rng.standard_normal((2, 4)), v.copy()]
    k = view_gram(views, Rbf(gamma=0.2))
    assert np.max(np.abs(k[0] - k[2])) < 1e-12


def test_view_gram_linear_equals_mean_feature_dot_products():
    rng = np.random.default_rng(3)
    views = [rng.standard_normal((int(rng.integers(1, 5)), 6)) for _ in range(8)]
    means = np.stack([v.mean(axis=0) for v in views])
    assert np.max(np.abs(view_gram(views, Linear()) - means @ means.T)) <= 1e-10


def test_view_gram_matches_brute_force_rbf():
    rng = np.random.default_rng(4)
    views = [rng.standard_normal((int(rng.integers(1, 4)), 3)) for _ in range(5)]
    kind = Rbf(gamma=0.7)
    got = view_gram(views, kind)
    want = np.empty((5, 5))
    for i, vi in enumerate(views):
        for j, vj in enumerate(views):
            want[i, j] = np.mean([[patch_kernel(kind, a, b) for b in vj] for a in vi])
    assert np.max(np.abs(got - want)) < 1e-12


def test_view_gram_accepts_coordinate_tuples():
    rng = np.random.default_rng(5)
    raw = [rng.standard_normal((2, 4)) for _ in range(3)]
    tupled = [[(0, p, patches[p]) for p in range(2)] for patches in raw]
    assert np.max(np.abs(view_gram(tupled, Linear()) - view_gram(raw, Linear()))) == 0.0


def test_center_gram_examples():
    assert np.max(np.abs(center_gram(np.ones((5, 5))))) < 1e-12
    rng = np.random.default_rng(6)
    x = rng.standard_normal((7, 3))
    k = x @ x.T
    c = center_gram(k)
    assert np.max(np.abs(c.sum(axis=0))) < 1e-10
    assert np.max(np.abs(center_gram(c) - c)) < 1e-10


def test_kcca_identical_views_is_perfectly_correlated():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((40, 3))
    k = x @ x.T
    res = kcca_solve(ViewGrams(k, k.copy()), 1e-6, 1e-6, centered=True)
    assert res.rho >= 0.999


def test_kcca_permutation_null_stays_low():
    rng = np.random.default_rng(8)
    n = 200
    x = rng.standard_normal((n, 5))
    y = rng.standard_normal((n, 5))
    k_u, k_m = x @ x.T, y @ y.T
    rhos = []
    for s in range(200):
        perm = np.random.default_rng([77, s]).permutation(n)
        shuffled = k_m[np.ix_(perm, perm)]
        rhos.append(kcca_solve(ViewGrams(k_u, shuffled), 1e-2, 1e-2, centered=True).rho)
    assert np.quantile(rhos, 0.95) < 0.35


def test_kcca_invariant_under_simultaneous_permutation():
    rng = np.random.default_rng(9)
    n = 30
    z = rng.standard_normal((n, 2))
    x = z + 0.3 * rng.standard_normal((n, 2))
    y = z + 0.3 * rng.standard_normal((n, 2))
    k_u, k_m = x @ x.T, y @ y.T
    base = kcca_solve(ViewGrams(k_u, k_m), 1e-3, 1e-3, centered=True).rho
    perm = rng.permutation(n)
    moved = kcca_solve(ViewGrams(k_u[np.ix_(perm, perm)], k_m[np.ix_(perm, perm)]),
                       1e-3, 1e-3, centered=True).rho
    assert abs(base - moved) < 1e-8


def test_kcca_normalizes_beta_against_its_regularized_gram():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((25, 3))
    y = x @ rng.standard_normal((3, 3)) + 0.1 * rng.standard_normal((25, 3))
    grams = ViewGrams(x @ x.T, y @ y.T)
    res = kcca_solve(grams, 1e-3, 1e-3, centered=True)
    assert 0.0 <= res.rho <= 1.0 + 1e-10
    assert res.alpha.shape == (25,) and res.beta.shape == (25,)


def test_kcca_conditioning_error_names_eigenvalue():
    bad = np.diag([-0.5, 1.0, 1.0])
    with pytest.raises(ConditioningError, match="eigenvalue"):
        kcca_solve(ViewGrams(bad, np.eye(3)), 1.0, 1.0, centered=False)


def test_view_grams_validation():
    with pytest.raises(ValueError, match="symmetric"):
        ViewGrams(np.array([[0.0, 1.0], [0.0, 0.0]]), np.eye(2))
    with pytest.raises(ValueError, match="square"):
        ViewGrams(np.ones((2, 3)), np.eye(2))
    with pytest.raises(ValueError, match="share a shape"):
        ViewGrams(np.eye(2), np.eye(3))


def test_pca_rank_one_recovery_and_centering():
    rng = np.random.default_rng(11)
    direction = rng.standard_normal(6)
    weights = rng.standard_normal(30)
    x = np.outer(weights, direction)
    z = pca_reduce(x, 1)
    target = (weights - weights.mean()) * np.linalg.norm(direction)
    sign = np.sign(z[0, 0]) * np.sign(target[0])
    assert np.max(np.abs(z[:, 0] - sign * target)) < 1e-8
    assert abs(z.mean()) < 1e-10


def test_pca_full_rank_round_trip_and_bounds():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((20, 4))
    z = pca_reduce(x, 4)
    assert np.max(np.abs(z.mean(axis=0))) < 1e-10
    centered = x - x.mean(axis=0)
    coef, *_ = np.linalg.lstsq(z, centered, rcond=None)
    assert np.max(np.abs(z @ coef - centered)) < 1e-8
    with pytest.raises(ValueError):
        pca_reduce(x, 5)
    with pytest.raises(ValueError):
        pca_reduce(x, 0)


def test_pca_sign_convention_is_deterministic():
    rng = np.random.default_rng(13)
    x = rng.standard_normal((15, 5))
    assert np.array_equal(pca_reduce(x, 3), pca_reduce(x.copy(), 3))


def test_cca_sigma_zero_cross_and_identical_views():
    s = np.diag([2.0, 1.0, 0.5])
    res = cca_sigma(CovTriple(s, s.copy(), np.zeros((3, 3))))
    assert np.max(np.abs(res.sigma)) < 1e-12

    rng = np.random.default_rng(14)
    x = rng.standard_normal((500, 3))
    c = x.T @ x / 500
    res2 = cca_sigma(CovTriple(c, c.copy(), c.copy()))
    assert abs(res2.sigma[0] - 1.0) < 1e-8


def test_cca_sigma_invariant_under_linear_mixing():
    rng = np.random.default_rng(15)
    z_u = rng.standard_normal((2000, 3))
    z_m = 0.6 * z_u + 0.8 * rng.standard_normal((2000, 3))
    a = rng.standard_normal((3, 3)) + np.eye(3)
    b = rng.standard_normal((3, 3)) + np.eye(3)

    def sig(u, m):
        n = u.shape[0]
        u = u - u.mean(axis=0)
        m = m - m.mean(axis=0)
        return cca_sigma(CovTriple(u.T @ u / n, m.T @ m / n, u.T @ m / n)).sigma

    base = sig(z_u, z_m)
    mixed = sig(z_u @ a, z_m @ b)
    assert np.max(np.abs(base - mixed)) < 1e-6


def test_cca_sigma_conditioning_error_on_indefinite_view():
    s_uu = np.diag([1.0, -0.1])
    with pytest.raises(ConditioningError, match="eigenvalue"):
        cca_sigma(CovTriple(s_uu, np.eye(2), 0.1 * np.eye(2)))


def _transition_windows(n, strength, seed, length=80):
    base = generate_windows(SynthSpec(n_windows=n, n_modalities=4,
                                      n_samples=length, n_classes=3,
                                      shared_latent_strength=strength,
                                      noise_sd=1.0, seed=seed))
    return base


def test_sigma1_experiment_bounds_and_determinism():
    # length 140 gives P=7, the smallest grid where the synchronized policy
    # is non-degenerate at the default 0.15 ratio
    ws = _transition_windows(30, 0.9, 16, length=140)
    v1 = sigma1_experiment(ws, "cross", RawFlatten(), pca_k=10, seed=3, patch_len=20)
    v2 = sigma1_experiment(ws, "cross", RawFlatten(), pca_k=10, seed=3, patch_len=20)
    v3 = sigma1_experiment(ws, "sync", RawFlatten(), pca_k=10, seed=3, patch_len=20)
    assert v1 == v2
    for v in (v1, v3):
        assert 0.0 <= v <= 1.0 + 1e-8


def test_sigma1_experiment_model_encoder_runs():
    ws = _transition_windows(12, 0.9, 17)
    arch = ArchSpec(n_modalities=4, n_patches=4, patch_len=20, d_model=8,
                    enc_layers=1, dec_layers=1, n_heads=2)
    enc = ModelEncoder(init_model(arch, seed=0))
    v = sigma1_experiment(ws, "cross", enc, pca_k=6, seed=4)
    assert 0.0 <= v <= 1.0 + 1e-8
    with pytest.raises(ValueError):
        sigma1_experiment(ws, "cross", object(), pca_k=6, seed=4)
    with pytest.raises(ValueError):
        sigma1_experiment([], "cross", RawFlatten())


def test_gram_file_round_trip(tmp_path):
    rng = np.random.default_rng(18)
    k = rng.standard_normal((7, 7))
    k = k @ k.T
    path = tmp_path / "view.gram"
    save_gram(path, k)
    assert np.array_equal(load_gram(path), k)

    path.write_bytes(b"other-format 7 7\n" + k.tobytes())
    with pytest.raises(ValueError, match="header"):
        load_gram(path)

    save_gram(path, k)
    data = path.read_bytes()
    path.write_bytes(data[:-16])
    with pytest.raises(ValueError, match="bytes"):
        load_gram(path)
