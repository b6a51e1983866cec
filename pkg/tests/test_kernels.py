import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_psd
from spectral_cmm import kernels as K
from spectral_cmm.contrastive import SpectralModel
from spectral_cmm.errors import DegenerateInput, InvalidInput
from spectral_cmm.linalg import frac_power, symmetrize
from spectral_cmm.nnet import FeatureNet
from spectral_cmm.oracles import discrete_oracle, random_pmf


def random_model(seed, J=4, dz=3, dx=2, commuting=False):
    r = np.random.default_rng(seed)
    phi = FeatureNet.init([dz, 8, J], r)
    psi = FeatureNet.init([dx, 8, J], r)
    if commuting:
        sz, sx = np.diag(r.uniform(0.1, 2, J)), np.diag(r.uniform(0.1, 2, J))
    else:
        sz, sx = random_psd(r, J) + 0.05 * np.eye(J), random_psd(r, J) + 0.05 * np.eye(J)
    return SpectralModel(phi, psi, sz, sx)


def constant_model(dz=2, dx=3):
    phi = FeatureNet([dz, 1], [np.zeros((dz, 1))], [np.ones(1)])
    psi = FeatureNet([dx, 1], [np.zeros((dx, 1))], [np.ones(1)])
    return SpectralModel(phi, psi, np.ones((1, 1)), np.ones((1, 1)))


def min_eig_ok(g):
    lam = np.linalg.eigvalsh(g)
    return lam[0] >= -1e-8 * max(1.0, lam[-1])


def test_estimate_covariance_examples():
    v = np.array([[1.0, 2.0, -1.0]])
    assert np.allclose(K.estimate_covariance(v), v.T @ v)
    assert np.allclose(K.estimate_covariance(np.tile([1.0, 0, 0], (4, 1))), np.diag([1.0, 0, 0]))
    assert np.allclose(K.estimate_covariance(np.eye(2)), 0.5 * np.eye(2))


def test_kx_alpha_one_is_sigma_z():
    m = random_model(0)
    assert np.array_equal(K.build_kx(m, 1.0).middle, m.sigma_z)
    assert np.array_equal(K.build_kz(m, 1.0).middle, m.sigma_x)


@pytest.mark.parametrize("alpha", [0.5, 1.0, 2.0, 3.0])
def test_constant_features_give_unit_kernel(alpha):
    m = constant_model()
    x, z = np.random.default_rng(0).standard_normal((5, 3)), np.ones((4, 2))
    assert np.allclose(K.gram(K.build_kx(m, alpha), x), 1.0)
    assert np.allclose(K.gram(K.build_kz(m, alpha), z), 1.0)


@pytest.mark.parametrize("seed", range(5))
def test_kx_middle_two_routes(seed):
    m = random_model(seed)
    alpha = 2.0
    got = K.build_kx(m, alpha).middle
    # second route: eigendecomposition of the whitened operator S^{1/2} T S^{1/2}
    lam_s, v_s = np.linalg.eigh(m.sigma_x)
    root = (v_s * np.sqrt(lam_s)) @ v_s.T
    inv_root = (v_s / np.sqrt(lam_s)) @ v_s.T
    lam_w, v_w = np.linalg.eigh(symmetrize(root @ m.sigma_z @ root))
    ref = inv_root @ ((v_w * lam_w ** alpha) @ v_w.T) @ inv_root
    assert np.linalg.norm(got - ref) < 1e-8


@pytest.mark.parametrize("seed", range(5))
def test_kz_is_kx_of_swapped_model(seed):
    m = random_model(seed)
    z = np.random.default_rng(seed).standard_normal((6, 3))
    a = K.gram(K.build_kz(m, 2.5), z)
    b = K.gram(K.build_kx(m.swapped(), 2.5), z)
    assert np.max(np.abs(a - b)) <= 1e-10


def test_kz_default_exponent_is_alpha_plus_one():
    m = random_model(1)
    assert K.build_kz(m, alpha=2.0).alpha == 3.0
    assert np.allclose(K.build_kz(m, alpha=2.0).middle, K.build_kz(m, 3.0).middle)


@pytest.mark.parametrize("seed", range(5))
def test_alg1_matches_eq9prime_at_alpha_one(seed):
    m = random_model(seed)
    x = np.random.default_rng(seed).standard_normal((7, 2))
    kx_alg, _ = K.build_alg1_pair(m, 1.0)
    a = K.gram(kx_alg, x)
    b = K.gram(K.build_kx(m, 1.0), x)
    f = m.psi(x)
    assert np.max(np.abs(a - b)) <= 1e-12
    assert np.max(np.abs(a - f @ m.sigma_z @ f.T)) <= 1e-12


def test_alg1_differs_at_alpha_two_unless_commuting():
    x = np.random.default_rng(0).standard_normal((7, 2))
    m = random_model(3)
    gap = np.max(np.abs(K.gram(K.build_alg1_pair(m, 2.0)[0], x) - K.gram(K.build_kx(m, 2.0), x)))
    assert gap > 1e-6
    mc = random_model(3, commuting=True)
    for alpha in (0.5, 2.0, 3.0):
        a = K.gram(K.build_alg1_pair(mc, alpha)[0], x)
        b = K.gram(K.build_kx(mc, alpha), x)
        assert np.max(np.abs(a - b)) <= 1e-10 * max(1.0, np.abs(b).max())


def test_alg1_kz_exponents():
    m = random_model(4)
    _, kz = K.build_alg1_pair(m, 2.0)
    side = frac_power(m.sigma_z, 1.0)
    assert np.allclose(kz.middle, side @ frac_power(m.sigma_x, 3.0) @ side)


def test_alpha_must_be_positive():
    with pytest.raises(InvalidInput):
        K.build_kx(random_model(0), 0.0)
    with pytest.raises(InvalidInput):
        K.build_alg1_pair(random_model(0), -1.0)


@given(st.integers(0, 10_000), st.sampled_from([0.5, 1.0, 2.0, 3.0]),
       st.sampled_from(["eq9prime", "alg1"]))
def test_all_recipes_give_psd_grams(seed, alpha, recipe):
    m = random_model(seed % 50)
    r = np.random.default_rng(seed)
    x, z = r.standard_normal((60, 2)), r.standard_normal((60, 3))
    if recipe == "alg1":
        kx, kz = K.build_alg1_pair(m, alpha)
    else:
        kx, kz = K.build_kx(m, alpha), K.build_kz(m, alpha=alpha)
    assert min_eig_ok(K.gram(kx, x)) and min_eig_ok(K.gram(kz, z))


@given(st.integers(0, 10_000), st.floats(0.1, 5))
def test_rbf_gram_psd_and_unit_diagonal(seed, bw):
    p = np.random.default_rng(seed).standard_normal((40, 3))
    g = K.gram(K.RbfKernel(bw), p)
    assert np.allclose(np.diag(g), 1.0) and min_eig_ok(g)


def test_rbf_single_point_and_empty():
    k = K.RbfKernel(1.3)
    assert np.array_equal(K.gram(k, [[0.2, 0.1]], [[0.2, 0.1]]), [[1.0]])
    assert K.gram(k, np.ones((3, 2)), np.zeros((0, 2))).shape == (3, 0)
    with pytest.raises(InvalidInput):
        K.RbfKernel(0.0)


def test_learned_gram_two_paths():
    m = random_model(5)
    kx = K.build_kx(m, 2.0)
    r = np.random.default_rng(0)
    a, b = r.standard_normal((5, 2)), r.standard_normal((4, 2))
    g = K.gram(kx, a, b)
    pointwise = np.array([[kx(a[i:i + 1], b[j:j + 1])[0, 0] for j in range(4)] for i in range(5)])
    assert np.max(np.abs(g - pointwise)) <= 1e-12
    h = kx.factor(a)
    assert np.allclose(h @ h.T, K.gram(kx, a), atol=1e-12)


def test_product_with_unit_factor():
    r = np.random.default_rng(1)
    p = r.standard_normal((6, 3))
    ka = K.RbfKernel(1.0)
    unit = K.build_kx(constant_model(dx=1), 1.0)
    prod = K.product_kernel(ka, unit, (0, 1), (2,))
    assert np.allclose(K.gram(prod, p), K.gram(ka, p[:, :2]))


def test_product_gram_psd_and_rank():
    r = np.random.default_rng(2)
    p = r.standard_normal((10, 3))
    m = random_model(2, J=2, dx=2)
    ka = K.build_kx(m, 1.0)
    kb = K.RbfKernel(0.7)
    prod = K.product_kernel(ka, kb, (0, 1), (2,))
    g = K.gram(prod, p)
    assert min_eig_ok(g)
    ra = np.linalg.matrix_rank(K.gram(ka, p[:, :2]))
    rb = np.linalg.matrix_rank(K.gram(kb, p[:, 2:]))
    assert np.linalg.matrix_rank(g) <= ra * rb


def test_product_dimension_mismatch():
    m = random_model(0, dx=2)
    with pytest.raises(InvalidInput):
        K.product_kernel(K.build_kx(m, 1.0), K.RbfKernel(1.0), (0,), (1,))
    prod = K.product_kernel(K.build_kx(m, 1.0), K.RbfKernel(1.0), (0, 1), (2,))
    with pytest.raises(InvalidInput):
        K.gram(prod, np.ones((3, 2)))


def test_median_heuristic_examples():
    assert K.median_heuristic([0.0, 1.0, 2.0]) == 1.0
    assert K.median_heuristic([[0.0, 0.0], [3.0, 4.0]]) == 5.0
    with pytest.raises(DegenerateInput):
        K.median_heuristic(np.ones((4, 2)))
    with pytest.raises(InvalidInput):
        K.median_heuristic([[1.0]])


@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_median_heuristic_homogeneous(seed, c):
    p = np.random.default_rng(seed).standard_normal((15, 2))
    assert K.median_heuristic(c * p) == pytest.approx(c * K.median_heuristic(p), rel=1e-12)


def test_serialization_round_trip():
    m = random_model(6)
    kx = K.build_kx(m, 2.0)
    prod = K.product_kernel(kx, K.RbfKernel(0.5), (0, 1), (2,))
    back = K.kernel_from_dict(prod.to_dict())
    p = np.random.default_rng(0).standard_normal((4, 3))
    assert np.array_equal(K.gram(back, p), K.gram(prod, p))
    doc = kx.to_dict()
    assert doc["recipe"] == "eq9prime" and doc["alpha"] == 2.0
    assert np.array_equal(np.array(doc["middle"]), kx.middle)


def _factor_table(oracle, r):
    """Features with phi(z)^T psi(x) = h0(z, x), skewed by a random invertible map."""
    p = oracle.params
    pz, px = p["pz"], p["px"]
    s = np.sqrt(np.maximum(np.linalg.svd(p["Q"], compute_uv=False), 0.0))
    u, _, vt = np.linalg.svd(p["Q"])
    m = len(pz)
    skew = r.standard_normal((m, m)) + 3 * np.eye(m)
    phi = (u * s) / np.sqrt(pz)[:, None] @ skew
    psi = (vt.T * s) / np.sqrt(px)[:, None] @ np.linalg.inv(skew).T
    return phi, psi


@pytest.mark.parametrize("alpha", [0.5, 1.0, 2.0, 3.0])
def test_integral_operator_identity_on_discrete_oracle(alpha):
    r = np.random.default_rng(int(alpha * 10))
    m = 5
    oracle = discrete_oracle(random_pmf(m, r))
    pz, px, pmf = oracle.params["pz"], oracle.params["px"], oracle.params["pmf"]
    phi, psi = _factor_table(oracle, r)
    assert np.allclose(phi @ psi.T, pmf / np.outer(pz, px), atol=1e-10)
    sx = psi.T @ (px[:, None] * psi)  # exact covariances
    sz = phi.T @ (pz[:, None] * phi)
    middle = K.whitened_middle(sx, sz, alpha)
    k = psi @ middle @ psi.T
    dx = np.sqrt(px)
    t_k = dx[:, None] * k * dx[None, :]  # integral operator in L2(P_x) orthonormal coordinates
    b = np.sqrt(np.outer(pz, px)) * (pmf / np.outer(pz, px))
    lam, v = np.linalg.eigh(b.T @ b)
    ref = (v * np.maximum(lam, 0) ** alpha) @ v.T
    assert np.max(np.abs(t_k - ref)) <= 1e-8
