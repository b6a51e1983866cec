"""Analytic conditional-expectation operators and exact ill-posedness quantities.

Every oracle exposes a truncated SVD ``E psi_j = s_j phi_j``, the density ratio
``h0 = dP_zx / d(P_z x P_x)`` and the chi-square divergence. Hypothesis spaces
are described in singular coordinates: a K x J matrix whose columns are the
coefficients of the spanning functions in the basis ``psi_1..psi_K``.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import hermite_e
from scipy.linalg.lapack import dgejsv
from scipy.special import zeta

from .errors import DegenerateInput, InfeasibleConstraint, InvalidInput, Unsupported

GH_NODES = 200
TORUS_NODES = 512
TORUS_H0_TERMS = 4096  # Fourier terms used to evaluate the torus density ratio


@dataclass(frozen=True)
class OperatorOracle:
    kind: str
    params: dict
    s: np.ndarray  # singular values, non-increasing
    chi2: float  # may be inf
    _psi: object = field(repr=False, default=None)  # x -> (len(x), K)
    _phi: object = field(repr=False, default=None)  # z -> (len(z), K)
    _h0: object = field(repr=False, default=None)  # (z, x) -> pointwise ratio
    _quad: object = field(repr=False, default=None)  # () -> (nodes, weights) on x-space

    @property
    def K(self):
        return len(self.s)

    def psi(self, x):
        return self._psi(np.asarray(x))

    def phi(self, z):
        return self._phi(np.asarray(z))

    def h0(self, z, x):
        return self._h0(np.asarray(z), np.asarray(x))

    def quadrature(self):
        return self._quad()

    @property
    def chi2_finite(self):
        return bool(np.isfinite(self.chi2))


@dataclass(frozen=True)
class HypothesisSpec:
    basis: np.ndarray  # K x J coefficients in singular coordinates
    metric: np.ndarray = None  # K x K Gram of the hypothesis norm in singular coordinates

    def __post_init__(self):
        b = np.asarray(self.basis, dtype=float)
        if b.ndim != 2 or b.shape[1] < 1:
            raise InvalidInput("basis must be a K x J matrix with J >= 1")
        if np.linalg.matrix_rank(b) < b.shape[1]:
            raise InvalidInput("basis columns are linearly dependent")
        object.__setattr__(self, "basis", b)
        if self.metric is not None:
            m = np.asarray(self.metric, dtype=float)
            if m.shape != (b.shape[0], b.shape[0]):
                raise InvalidInput("metric must be K x K")
            object.__setattr__(self, "metric", m)

    @classmethod
    def span(cls, K, indices):
        """Span of ``psi_i`` for 1-based ``indices``."""
        idx = [int(i) - 1 for i in indices]
        if min(idx) < 0 or max(idx) >= K:
            raise InvalidInput(f"indices must lie in 1..{K}")
        b = np.zeros((K, len(idx)))
        b[idx, np.arange(len(idx))] = 1.0
        return cls(b)

    def orthonormal(self):
        q, _ = np.linalg.qr(self.basis)
        return q


def _normalized_hermite(x, K):
    """Columns He_j(x) / sqrt(j!) for j = 1..K (three-term recurrence)."""
    x = np.asarray(x, dtype=float).ravel()
    out = np.empty((len(x), K + 1))
    out[:, 0] = 1.0
    if K >= 1:
        out[:, 1] = x
    for j in range(1, K):
        # He_{j+1} = x He_j - j He_{j-1}, normalized by sqrt((j+1)!)
        out[:, j + 1] = (x * out[:, j] - math.sqrt(j) * out[:, j - 1]) / math.sqrt(j + 1)
    return out[:, 1:]


def gaussian_oracle(rho, K):
    """Standard bivariate normal pair with correlation ``rho``.

    ``s_j = rho^j`` and ``psi_j = phi_j = He_j / sqrt(j!)`` for j >= 1; the
    constant direction (singular value one) is excluded.
    """
    if not 0.0 < rho < 1.0:
        raise InvalidInput("rho must lie in (0, 1)")
    if K < 1:
        raise InvalidInput("K must be positive")
    s = rho ** np.arange(1, K + 1, dtype=float)
    c = 1.0 - rho ** 2

    def h0(z, x):
        z, x = np.asarray(z, dtype=float), np.asarray(x, dtype=float)
        return np.exp(-(rho ** 2 * z ** 2 - 2 * rho * z * x + rho ** 2 * x ** 2) / (2 * c)) / math.sqrt(c)

    def quad():
        nodes, weights = hermite_e.hermegauss(GH_NODES)
        return nodes, weights / math.sqrt(2 * math.pi)

    basis = lambda t: _normalized_hermite(t, K)  # noqa: E731
    return OperatorOracle("gaussian", {"rho": rho, "K": K}, s, rho ** 2 / c, basis, basis, h0, quad)


def torus_oracle(p, d_l=1, K=20):
    """Convolution on the circle with Fourier coefficients ``c_j = (1 + j)^{-p}``.

    Singular values come in equal pairs (cosine and sine per frequency); the
    constant, with singular value one, is excluded from ``s``.
    """
    if not p > 0:
        raise InvalidInput("p must be positive")
    if d_l != 1:
        raise Unsupported("only the one-dimensional torus is implemented")
    if K < 1:
        raise InvalidInput("K must be positive")
    freqs = np.arange(1, K + 1)
    freq_of = (freqs + 1) // 2  # 1, 1, 2, 2, ...
    s = (1.0 + freq_of) ** (-float(p))
    chi2 = 2.0 * (zeta(2.0 * p) - 1.0) if p > 0.5 else math.inf

    def basis(t):
        t = np.asarray(t, dtype=float).ravel()
        ang = 2 * math.pi * np.outer(t, freq_of)
        return math.sqrt(2.0) * np.where(freqs % 2 == 1, np.cos(ang), np.sin(ang))

    def h0(z, x):
        if not np.isfinite(chi2):
            raise InvalidInput("density ratio is not square integrable for p <= 1/2")
        d = np.asarray(z, dtype=float) - np.asarray(x, dtype=float)
        j = np.arange(1, TORUS_H0_TERMS + 1)
        coef = 2.0 * (1.0 + j) ** (-float(p))
        return 1.0 + np.cos(2 * math.pi * np.multiply.outer(d, j)) @ coef

    def quad():
        return np.arange(TORUS_NODES) / TORUS_NODES, np.full(TORUS_NODES, 1.0 / TORUS_NODES)

    return OperatorOracle("torus", {"p": p, "d_l": d_l, "K": K}, s, chi2, basis, basis, h0, quad)


def discrete_oracle(pmf):
    """Operator of a finite joint pmf (rows index z, columns index x).

    Here the constant direction is kept, so ``sum s_j^2 = chi2 + 1``.
    """
    pmf = np.asarray(pmf, dtype=float)
    if pmf.ndim != 2 or np.any(pmf < 0) or abs(pmf.sum() - 1.0) > 1e-12:
        raise InvalidInput("pmf must be a non-negative table summing to one")
    pz, px = pmf.sum(axis=1), pmf.sum(axis=0)
    if np.any(pz <= 0) or np.any(px <= 0):
        raise DegenerateInput("every marginal probability must be positive")
    q = pmf / np.sqrt(np.outer(pz, px))
    u, s, vt = np.linalg.svd(q)
    k = min(q.shape)
    u, vt = u[:, :k], vt[:k]
    ratio = pmf / np.outer(pz, px)
    chi2 = float(np.sum((pmf - np.outer(pz, px)) ** 2 / np.outer(pz, px)))
    psi_tab = vt.T / np.sqrt(px)[:, None]
    phi_tab = u / np.sqrt(pz)[:, None]

    def psi(x):
        return psi_tab[np.asarray(x, dtype=int)]

    def phi(z):
        return phi_tab[np.asarray(z, dtype=int)]

    def h0(z, x):
        return ratio[np.asarray(z, dtype=int), np.asarray(x, dtype=int)]

    def quad():
        return np.arange(len(px)), px

    params = {"pmf": pmf, "pz": pz, "px": px, "Q": q, "U": u, "V": vt.T}
    return OperatorOracle("discrete", params, s, chi2, psi, phi, h0, quad)


def operator_matrix(oracle):
    """``E`` as a matrix on ``L2(P_x) -> L2(P_z)`` in orthonormal coordinates (discrete only)."""
    if oracle.kind != "discrete":
        raise Unsupported("operator matrix is only tabulated for discrete oracles")
    return oracle.params["Q"]


@dataclass(frozen=True)
class SourceFunction:
    coef: np.ndarray  # coefficients in the singular basis
    norm: float  # source norm |g|_2
    oracle: OperatorOracle = field(repr=False)

    def __call__(self, x):
        return self.oracle.psi(x) @ self.coef


def source_f0(oracle, beta, g):
    """``f0 = sum_j s_j^beta g_j psi_j``, whose source norm is ``|g|_2``."""
    if beta < 0:
        raise InvalidInput("beta must be non-negative")
    g = np.asarray(g, dtype=float)
    if len(g) > oracle.K:
        raise InvalidInput("more source coefficients than singular directions")
    coef = np.zeros(oracle.K)
    coef[:len(g)] = oracle.s[:len(g)] ** beta * g
    return SourceFunction(coef, float(np.linalg.norm(g)), oracle)


def build_ideal_rkhs(oracle, alpha):
    """Hypothesis space ``Ran (E^T E)^{alpha/2}`` with metric ``diag(s^{-2 alpha})``."""
    if alpha < 0:
        raise InvalidInput("alpha must be non-negative")
    with np.errstate(divide="ignore"):
        metric = np.diag(oracle.s ** (-2.0 * alpha)) if alpha > 0 else np.eye(oracle.K)
    return HypothesisSpec(np.eye(oracle.K), metric)


def rkhs_norm(hyp, coef):
    coef = np.asarray(coef, dtype=float)
    return float(np.sqrt(coef @ hyp.metric @ coef))


def singular_values_accurate(a):
    """Singular values with high relative accuracy (one-sided Jacobi), descending."""
    a = np.asarray(a, dtype=float)
    if a.shape[0] < a.shape[1]:
        a = a.T
    if a.size == 0:
        return np.zeros(0)
    if not np.any(a):
        return np.zeros(a.shape[1])
    sva, _, _, work, _, info = dgejsv(np.asfortranarray(a), joba=1, jobu=3, jobv=3)
    if info != 0:
        return np.linalg.svd(a, compute_uv=False)
    return np.sort(sva * (work[0] / work[1]))[::-1]


def _restricted(oracle, hyp):
    k = hyp.basis.shape[0]
    if k > oracle.K:
        raise InvalidInput("basis has more coordinates than the oracle truncation")
    return oracle.s[:k, None] * hyp.orthonormal()


def illposedness_measure(oracle, hyp):
    """``max_{f in span, |f|_2 = 1} 1 / |E f|_2``; ``inf`` if the span meets the null space."""
    restricted = _restricted(oracle, hyp)
    sv = singular_values_accurate(restricted)
    smin = sv[-1]
    # singular values at round-off level of the operator are null directions
    floor = np.finfo(float).eps * max(restricted.shape) * float(np.max(oracle.s, initial=0.0))
    return math.inf if smin <= floor else float(1.0 / smin)


def variance_explained_gap(oracle, hyp):
    """``sum_{i <= J} s_i^2 - sum_i |E psi_i|^2`` for an orthonormal basis of the span."""
    q = hyp.orthonormal()
    k, J = q.shape
    if k > oracle.K:
        raise InvalidInput("basis has more coordinates than the oracle truncation")
    # per-coordinate weights avoid cancellation between the two sums
    weight = (np.arange(k) < J).astype(float) - np.sum(q ** 2, axis=1)
    return float(math.fsum(oracle.s[:k] ** 2 * weight))


def _secular_max(c, d, radius, tol=1e-10):
    """``max |C v + d|`` over ``|v| <= radius`` via the Lagrange condition ``(mu - C^T C) v = C^T d``."""
    if radius == 0:
        return float(np.linalg.norm(d))
    lam, q = np.linalg.eigh(c.T @ c)
    a = q.T @ (c.T @ d)
    top = lam[-1]
    scale = max(top, 1e-300)
    near_top = lam >= top - 1e-12 * scale
    rest = ~near_top
    # hard case: d has no component on the top eigenspace
    if np.linalg.norm(a[near_top]) <= 1e-14 * max(1.0, np.linalg.norm(a)):
        coords = np.zeros_like(a)
        coords[rest] = a[rest] / (top - lam[rest])
        left = radius ** 2 - np.sum(coords ** 2)
        if left >= 0:
            v = q @ coords
            k = np.flatnonzero(near_top)[0]
            v = v + math.sqrt(left) * q[:, k]
            return float(np.linalg.norm(c @ v + d))

    def vnorm(mu):
        return np.linalg.norm(a / (mu - lam))

    # bracket mu on a log grid above the top eigenvalue, then bisect
    lo_gap, hi_gap = 1e-16 * scale + 1e-300, scale + np.linalg.norm(a) / radius + 1.0
    gaps = np.geomspace(lo_gap, hi_gap, 64)
    vals = np.array([vnorm(top + g) for g in gaps])
    ok = np.flatnonzero(vals <= radius)
    hi = gaps[ok[0]]
    lo = gaps[ok[0] - 1] if ok[0] > 0 else 0.0
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        if mid <= 0 or hi - lo <= tol * max(hi, 1e-300):
            break
        if vnorm(top + mid) > radius:
            lo = mid
        else:
            hi = mid
    mu = top + hi
    v = q @ (a / (mu - lam))
    v *= radius / max(np.linalg.norm(v), 1e-300)
    return float(np.linalg.norm(c @ v + d))


def modulus_of_continuity(oracle, hyp, f0_coef, delta, lam=0.0):
    """``sup {|f - f0|_2 : f in H, |E(f - f0)|^2 + lam |f|_H^2 <= delta^2}``."""
    if delta < 0 or lam < 0:
        raise InvalidInput("delta and lambda must be non-negative")
    if lam > 0 and hyp.metric is None:
        raise InvalidInput("a positive lambda needs a hypothesis space with a metric")
    b = hyp.basis
    k, J = b.shape
    if k > oracle.K:
        raise InvalidInput("basis has more coordinates than the oracle truncation")
    c0 = np.zeros(k)
    f0 = np.asarray(f0_coef, dtype=float)
    c0[:min(k, len(f0))] = f0[:k]
    if np.any(f0[k:]):
        raise InvalidInput("f0 has content outside the basis coordinates")
    s2 = oracle.s[:k] ** 2
    p = b.T @ (s2[:, None] * b)
    if lam > 0:
        if not np.all(np.isfinite(hyp.metric)):
            raise InvalidInput("metric is infinite on a singular direction with s = 0")
        p = p + lam * (b.T @ hyp.metric @ b)
    bvec = b.T @ (s2 * c0)
    r = float(c0 @ (s2 * c0))
    # Jacobi scaling keeps the spectrum check meaningful when the metric spans many decades
    diag = np.diag(p).copy()
    if np.any(diag <= 0):
        return math.inf
    dinv = 1.0 / np.sqrt(diag)
    scaled = dinv[:, None] * p * dinv[None, :]
    lam_p, vec_p = np.linalg.eigh(0.5 * (scaled + scaled.T))
    if lam_p[0] <= 1e-13 * lam_p[-1]:
        return math.inf
    # P = L L^T with L = D^{1/2} V diag(lam)^{1/2}
    center = dinv * (vec_p @ ((vec_p.T @ (dinv * bvec)) / lam_p))
    radius_sq = delta ** 2 - r + float(bvec @ center)
    if radius_sq < -1e-14 * max(1.0, delta ** 2):
        raise InfeasibleConstraint("no function in the hypothesis space meets the violation budget")
    radius = math.sqrt(max(radius_sq, 0.0))
    # w = center + L^{-T} v with |v| <= radius
    inv_factor = dinv[:, None] * vec_p / np.sqrt(lam_p)
    c = b @ inv_factor
    d = b @ center - c0
    return _secular_max(c, d, radius)


def chi2_plugin(oracle, z, x, paired=False):
    """Monte Carlo estimate ``mean (h0(z_i, x'_i) - 1)^2``.

    The expectation is under the product of marginals, so by default each
    ``z_i`` is matched with ``x_{i+1}`` (independent for i.i.d. rows). Pass
    ``paired=True`` when the rows were already drawn independently.
    """
    x = np.asarray(x, dtype=float)
    h = oracle.h0(z, x if paired else np.roll(x, -1, axis=0))
    return float(np.mean((h - 1.0) ** 2))


def transition_table(rho, J, Ms, K=None):
    """Adversarial bases that swap ``psi_J`` for ``psi_{J+M}``: measure grows, gap stays below ``s_J^2``."""
    Ms = [int(m) for m in Ms]
    K = K or J + max(Ms)
    oracle = gaussian_oracle(rho, K)
    rows = []
    for M in Ms:
        hyp = HypothesisSpec.span(K, list(range(1, J)) + [J + M])
        rows.append({
            "oracle": "gaussian", "parameter": rho, "J": J, "M": M,
            "measure": illposedness_measure(oracle, hyp),
            "gap": variance_explained_gap(oracle, hyp),
            "omega": "", "delta": "", "lambda": "",
        })
    return rows


def modulus_sweep(rho, alpha, lambdas, K=60, delta=1.0):
    """``(lambda, omega'^2 / delta^2)`` on the exact-operator RKHS with ``f0 = 0``."""
    oracle = gaussian_oracle(rho, K)
    hyp = build_ideal_rkhs(oracle, alpha)
    rows = []
    for lam in lambdas:
        omega = modulus_of_continuity(oracle, hyp, np.zeros(K), delta, lam)
        rows.append({"oracle": "gaussian", "parameter": rho, "J": K, "M": "",
                     "measure": omega ** 2 / delta ** 2, "gap": "", "omega": omega,
                     "delta": delta, "lambda": lam})
    return rows


def random_pmf(m, rng, concentration=1.0):
    pmf = rng.dirichlet(np.full(m * m, concentration)).reshape(m, m)
    return pmf / pmf.sum()


def lemma2_check(m, n_pmfs, seed, rank=None):
    """Three independent routes to the loss / HS / L2 identities on random pmfs.

    For each pmf a random factorized table ``h = A B^T`` is drawn; returns one
    row per pmf with the three gaps and the trace identity residual.
    """
    rng = np.random.default_rng(seed)
    rank = rank or max(1, m // 2)
    rows = []
    from .contrastive import population_risk_discrete
    for i in range(n_pmfs):
        pmf = random_pmf(m, rng)
        oracle = discrete_oracle(pmf)
        pz, px = oracle.params["pz"], oracle.params["px"]
        h = rng.standard_normal((m, rank)) @ rng.standard_normal((rank, m)) / math.sqrt(rank)
        h0 = pmf / np.outer(pz, px)
        loss_gap = population_risk_discrete(h0, pmf) - population_risk_discrete(h, pmf)
        l2 = float(np.sum(np.outer(pz, px) * (h - h0) ** 2))
        # operator of h in orthonormal coordinates: Q_h[z, x] = sqrt(pz px) h
        q_h = np.sqrt(np.outer(pz, px)) * h
        hs = float(np.sum((q_h - oracle.params["Q"]) ** 2))
        rows.append({
            "index": i, "loss_gap": loss_gap, "l2_sq": l2, "hs_sq": hs,
            "trace_residual": oracle.chi2 + 1.0 - float(np.sum(oracle.s ** 2)),
        })
    return rows


def lemma1_approximant(s, e_tilde, alpha, beta, g, eps):
    """Projection-based approximation of ``f0 = T^{beta/2} g`` inside ``Ran T~^{alpha/2}``.

    ``s`` are the exact singular values (the exact operator is ``diag(s)``),
    ``e_tilde`` a perturbed K x K operator with ``|e_tilde - diag(s)|_HS = eps``.
    Returns ``(f_tilde, f0)`` as coefficient vectors.
    """
    s = np.asarray(s, dtype=float)
    g = np.asarray(g, dtype=float)
    t_tilde = e_tilde.T @ e_tilde
    f0 = s ** beta * g
    g0 = s ** (beta - alpha) * g  # f0 = T^{alpha/2} g0
    above = np.flatnonzero(s > 2 * eps)
    if above.size == 0:
        return np.zeros_like(f0), f0
    k = above[-1] + 1
    f_par = np.zeros_like(f0)
    f_par[:k] = s[:k] ** alpha * g0[:k]
    lam, vec = np.linalg.eigh(0.5 * (t_tilde + t_tilde.T))
    t_alpha = (vec * np.maximum(lam, 0.0) ** alpha) @ vec.T
    block = t_alpha[:k, :k]
    f_tilde = t_alpha[:, :k] @ np.linalg.solve(block, f_par[:k])
    return f_tilde, f0


SWEEP_COLUMNS = ("oracle", "parameter", "J", "M", "measure", "gap", "omega", "delta", "lambda")


def write_sweep(rows, path, columns=SWEEP_COLUMNS):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
