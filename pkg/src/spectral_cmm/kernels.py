"""Learned feature kernels, RBF kernels, product kernels and Gram assembly.

A learned kernel has the form ``k(a, b) = f(a)^T M f(b)`` for a frozen feature
map ``f`` and a fixed PSD middle matrix ``M`` built from feature covariances.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .contrastive import estimate_covariance
from .errors import DegenerateInput, InvalidInput
from .linalg import frac_power, psd_project, symmetrize
from .nnet import FeatureNet

__all__ = [
    "LearnedKernel", "RbfKernel", "ProductKernel", "estimate_covariance",
    "whitened_middle", "build_kx", "build_kz", "build_alg1_pair",
    "product_kernel", "median_heuristic", "gram", "kernel_from_dict",
]

RECIPES = ("eq9prime", "eq11", "alg1")


def _as_points(a, dim=None):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None] if dim in (None, 1) else a.reshape(-1, dim)
    if dim is not None and a.shape[1] != dim:
        raise InvalidInput(f"expected points with {dim} columns, got {a.shape[1]}")
    return a


@dataclass(frozen=True)
class LearnedKernel:
    side: str  # "x" or "z"
    feature: FeatureNet
    middle: np.ndarray
    alpha: float
    recipe: str

    @property
    def in_dim(self):
        return self.feature.in_dim

    def features(self, points):
        return self.feature(_as_points(points, self.in_dim))

    def factor(self, points):
        """Matrix ``H`` with ``gram(points) = H H^T``."""
        return self.features(points) @ frac_power(self.middle, 0.5)

    def __call__(self, a, b):
        fa, fb = self.features(a), self.features(b)
        return fa @ self.middle @ fb.T

    def to_dict(self):
        return {"type": "learned", "side": self.side, "recipe": self.recipe,
                "alpha": self.alpha, "middle": self.middle.tolist(),
                "feature": self.feature.to_dict()}


@dataclass(frozen=True)
class RbfKernel:
    bandwidth: float

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise InvalidInput("RBF bandwidth must be positive")

    def __call__(self, a, b):
        d2 = cdist(_as_points(a), _as_points(b), "sqeuclidean")
        return np.exp(-d2 / (2.0 * self.bandwidth ** 2))

    def to_dict(self):
        return {"type": "rbf", "bandwidth": self.bandwidth}


@dataclass(frozen=True)
class ProductKernel:
    """``k((a1, a2), (b1, b2)) = k_a(a1, b1) k_b(a2, b2)`` on column blocks."""

    k_a: object
    k_b: object
    cols_a: tuple
    cols_b: tuple

    @property
    def in_dim(self):
        return max(max(self.cols_a), max(self.cols_b)) + 1

    def _split(self, p):
        p = _as_points(p)
        if p.shape[1] < self.in_dim:
            raise InvalidInput(f"product kernel needs {self.in_dim} columns, got {p.shape[1]}")
        return p[:, list(self.cols_a)], p[:, list(self.cols_b)]

    def __call__(self, a, b):
        a1, a2 = self._split(a)
        b1, b2 = self._split(b)
        return self.k_a(a1, b1) * self.k_b(a2, b2)

    def to_dict(self):
        return {"type": "product", "cols_a": list(self.cols_a), "cols_b": list(self.cols_b),
                "k_a": self.k_a.to_dict(), "k_b": self.k_b.to_dict()}


def kernel_from_dict(doc):
    kind = doc["type"]
    if kind == "rbf":
        return RbfKernel(doc["bandwidth"])
    if kind == "learned":
        return LearnedKernel(doc["side"], FeatureNet.from_dict(doc["feature"]),
                             np.array(doc["middle"], dtype=float), doc["alpha"], doc["recipe"])
    if kind == "product":
        return ProductKernel(kernel_from_dict(doc["k_a"]), kernel_from_dict(doc["k_b"]),
                             tuple(doc["cols_a"]), tuple(doc["cols_b"]))
    raise InvalidInput(f"unknown kernel type {kind!r}")


def whitened_middle(sigma_own, sigma_other, alpha):
    """``S^{-1/2} (S^{1/2} T S^{1/2})^alpha S^{-1/2}`` with ``S = sigma_own``, ``T = sigma_other``.

    At ``alpha = 1`` the powers cancel and ``T`` is returned as is.
    """
    if not alpha > 0:
        raise InvalidInput("alpha must be positive")
    if float(alpha) == 1.0:
        return psd_project(symmetrize(sigma_other))
    root = frac_power(sigma_own, 0.5)
    inv_root = frac_power(sigma_own, -0.5)
    inner = frac_power(symmetrize(root @ sigma_other @ root), alpha)
    return psd_project(symmetrize(inv_root @ inner @ inv_root))


def build_kx(model, alpha=1.0):
    """Treatment-side kernel on the psi features."""
    m = whitened_middle(model.sigma_x, model.sigma_z, alpha)
    return LearnedKernel("x", model.psi, m, float(alpha), "eq9prime")


def build_kz(model, alpha_prime=None, alpha=1.0):
    """Instrument-side kernel: the mirror of ``build_kx`` with phi and psi exchanged.

    ``alpha_prime`` defaults to ``alpha + 1``.
    """
    a = alpha + 1.0 if alpha_prime is None else alpha_prime
    m = whitened_middle(model.sigma_z, model.sigma_x, a)
    return LearnedKernel("z", model.phi, m, float(a), "eq11")


def build_alg1_pair(model, alpha=1.0):
    """Direct-power recipe: ``Sx^{(a-1)/2} Sz^a Sx^{(a-1)/2}`` and ``Sz^{a/2} Sx^{a+1} Sz^{a/2}``."""
    if not alpha > 0:
        raise InvalidInput("alpha must be positive")
    sx, sz = model.sigma_x, model.sigma_z
    if float(alpha) == 1.0:
        mx = psd_project(symmetrize(sz))
    else:
        side = frac_power(sx, (alpha - 1.0) / 2.0)
        mx = psd_project(symmetrize(side @ frac_power(sz, alpha) @ side))
    side = frac_power(sz, alpha / 2.0)
    mz = psd_project(symmetrize(side @ frac_power(sx, alpha + 1.0) @ side))
    return (LearnedKernel("x", model.psi, mx, float(alpha), "alg1"),
            LearnedKernel("z", model.phi, mz, float(alpha + 1.0), "alg1"))


def product_kernel(k_a, k_b, cols_a, cols_b):
    cols_a, cols_b = tuple(int(c) for c in cols_a), tuple(int(c) for c in cols_b)
    if not cols_a or not cols_b or min(cols_a + cols_b) < 0:
        raise InvalidInput("product kernel needs non-empty, non-negative column lists")
    for k, cols in ((k_a, cols_a), (k_b, cols_b)):
        dim = getattr(k, "in_dim", None)
        if dim is not None and dim != len(cols):
            raise InvalidInput(f"kernel expects {dim} inputs but {len(cols)} columns were given")
    return ProductKernel(k_a, k_b, cols_a, cols_b)


def median_heuristic(points):
    """Median pairwise Euclidean distance over all pairs i < j."""
    p = _as_points(points)
    if p.shape[0] < 2:
        raise InvalidInput("median heuristic needs at least two points")
    med = float(np.median(pdist(p)))
    if med <= 0:
        raise DegenerateInput("median pairwise distance is zero")
    return med


def gram(kernel, points_a, points_b=None, chunk=4096):
    """Gram matrix ``G[i, j] = k(a_i, b_j)``; symmetrized when ``points_b`` is omitted."""
    a = np.asarray(points_a, dtype=float)
    sym = points_b is None
    b = a if sym else np.asarray(points_b, dtype=float)
    if len(b) == 0 or len(a) == 0:
        return np.zeros((len(a), len(b)))
    if isinstance(kernel, LearnedKernel):
        fa = kernel.features(a)
        fb = fa if sym else kernel.features(b)
        g = fa @ kernel.middle @ fb.T
    else:
        g = np.vstack([kernel(a[i:i + chunk], b) for i in range(0, len(a), chunk)])
    return symmetrize(g) if sym else g
