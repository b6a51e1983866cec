"""Closed-form kernel minimax estimator for conditional moment restrictions.

For residuals ``u = f - y`` on the fitting sample the game is

    min_f max_g  2/n u.g - 1/n |g|^2 - nu |g|_I^2 + lam |f|_H^2

with ``f = Kx gamma`` and ``g = Kz beta``. The inner maximum equals
``u^T A u`` where ``A = Kz (Kz + n nu I)^{-1} / n``, and the outer minimizer
solves ``(A Kx + lam I) gamma = A y``. Multiplying through by
``n (Kz + n nu I)`` gives the non-symmetric but well-conditioned system

    (Kz Kx + n lam Kz + n^2 lam nu I) gamma = Kz y.

At the solution ``g = -n lam gamma`` and ``beta = (u + n lam gamma) / (n nu)``,
so the saddle diagnostics come for free.
"""

import csv
import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla

from .errors import InvalidInput, NumericalFailure
from .kernels import (LearnedKernel, RbfKernel, build_alg1_pair, build_kx, build_kz, gram,
                      median_heuristic, product_kernel)
from .linalg import check_symmetric

log = logging.getLogger(__name__)

PSD_RTOL = 1e-8


@dataclass
class CmmFit:
    gamma: np.ndarray
    lam: float
    nu: float
    anchors: np.ndarray = None
    kernel: object = None
    diagnostics: dict = field(default_factory=dict)
    beta: np.ndarray = None
    _coef: np.ndarray = field(default=None, repr=False)

    @property
    def n(self):
        return len(self.gamma)

    def rkhs_norm_sq(self, kx_gram=None):
        if kx_gram is None:
            kx_gram = gram(self.kernel, self.anchors)
        return float(self.gamma @ kx_gram @ self.gamma)

    def with_gamma(self, gamma):
        return CmmFit(np.asarray(gamma, dtype=float), self.lam, self.nu, self.anchors, self.kernel)


def _check_psd(k, name):
    k = check_symmetric(k, name)
    n = k.shape[0]
    if n == 0:
        return k
    tol = PSD_RTOL * max(1.0, float(np.trace(k)))
    try:
        np.linalg.cholesky(k + tol * np.eye(n))
    except np.linalg.LinAlgError as exc:
        raise InvalidInput(f"{name} is not positive semidefinite within tolerance") from exc
    return k


def _finish(gamma, f, y, lam, nu, kz_degenerate, anchors, kernel, kx_norm_sq):
    n = len(y)
    u = f - y
    g = -n * lam * gamma
    beta = (u - g) / (n * nu)
    diagnostics = {
        "saddle_value": float(lam * gamma @ y),
        "inner_norm_sq": float(beta @ g),
        "rkhs_norm_sq": float(kx_norm_sq),
        "train_violation": float(-lam * u @ gamma),
        "kz_degenerate": bool(kz_degenerate),
    }
    if not np.all(np.isfinite(gamma)):
        raise NumericalFailure("minimax solution is not finite")
    return CmmFit(gamma, float(lam), float(nu), anchors, kernel, diagnostics, beta)


def _check_reg(lam, nu):
    if not (lam > 0 and nu > 0):
        raise InvalidInput("lambda and nu must be positive")


def fit_minimax(kx, kz, y, lam, nu, anchors=None, kernel=None, check_psd=True, kzkx=None):
    """Closed-form minimax fit from Gram matrices on the fitting sample."""
    _check_reg(lam, nu)
    y = np.asarray(y, dtype=float)
    n = len(y)
    kx = np.asarray(kx, dtype=float)
    kz = np.asarray(kz, dtype=float)
    if kx.shape != (n, n) or kz.shape != (n, n):
        raise InvalidInput(f"Gram matrices must be {n}x{n}")
    if check_psd:
        _check_psd(kx, "Kx")
        _check_psd(kz, "Kz")
    degenerate = not np.any(kz)
    if degenerate:
        gamma = np.zeros(n)
    else:
        if kzkx is None:
            kzkx = kz @ kx
        system = kzkx + (n * lam) * kz
        system[np.diag_indices(n)] += n * n * lam * nu
        try:
            gamma = sla.solve(system, kz @ y, check_finite=False)
        except (sla.LinAlgError, ValueError) as exc:
            raise NumericalFailure(f"minimax normal equations are singular: {exc}") from exc
    f = kx @ gamma
    return _finish(gamma, f, y, lam, nu, degenerate, anchors, kernel, gamma @ f)


def fit_minimax_factored(hx, hz, y, lam, nu, anchors=None, kernel=None):
    """Exact fit when ``Kx = hx hx^T`` and ``Kz = hz hz^T`` have few columns.

    Costs O(n r^2) instead of O(n^3); returns the same solution as ``fit_minimax``.
    """
    _check_reg(lam, nu)
    y = np.asarray(y, dtype=float)
    n = len(y)
    hx, hz = np.asarray(hx, dtype=float), np.asarray(hz, dtype=float)
    if hx.shape[0] != n or hz.shape[0] != n:
        raise InvalidInput("factor rows must match the number of samples")
    degenerate = not np.any(hz)
    if degenerate:
        gamma = np.zeros(n)
        f = np.zeros(n)
    else:
        inner = hz.T @ hz
        inner[np.diag_indices_from(inner)] += n * nu
        inner_cf = sla.cho_factor(inner)

        def apply_a(v):
            return hz @ sla.cho_solve(inner_cf, hz.T @ v) / n

        ah = apply_a(hx)
        lhs = hx.T @ ah
        lhs[np.diag_indices_from(lhs)] += lam
        try:
            w = sla.solve(lhs, ah.T @ y, assume_a="pos")
        except (sla.LinAlgError, ValueError) as exc:
            raise NumericalFailure(f"minimax normal equations are singular: {exc}") from exc
        f = hx @ w
        gamma = apply_a(y - f) / lam
    return _finish(gamma, f, y, lam, nu, degenerate, anchors, kernel, gamma @ f)


def predict(fit, query, chunk=4096):
    """Evaluate ``f(q) = sum_i gamma_i k(x_i, q)``."""
    q = np.asarray(query, dtype=float)
    if fit.kernel is None or fit.anchors is None:
        raise InvalidInput("fit carries no kernel and anchors to predict with")
    if len(q) == 0:
        return np.zeros(0)
    if isinstance(fit.kernel, LearnedKernel):
        if fit._coef is None:
            fit._coef = fit.kernel.middle @ (fit.kernel.features(fit.anchors).T @ fit.gamma)
        return fit.kernel.features(q) @ fit._coef
    return np.concatenate([gram(fit.kernel, q[i:i + chunk], fit.anchors) @ fit.gamma
                           for i in range(0, len(q), chunk)])


class ViolationScorer:
    """Held-out inner maximum ``(1/m) u^T Kz (Kz + m nu I)^{-1} u`` with a cached factorization."""

    def __init__(self, kz, z_val, nu):
        z_val = np.asarray(z_val, dtype=float)
        m = len(z_val)
        if m < 2:
            raise InvalidInput("held-out violation needs at least two validation rows")
        if not nu > 0:
            raise InvalidInput("nu must be positive")
        self.m, self.nu = m, float(nu)
        self.kz = gram(kz, z_val)
        shifted = self.kz.copy()
        shifted[np.diag_indices(m)] += m * nu
        self._cf = sla.cho_factor(shifted)

    def __call__(self, residuals):
        u = np.asarray(residuals, dtype=float)
        if u.shape != (self.m,):
            raise InvalidInput("residual vector does not match the validation sample")
        # Kz (Kz + m nu)^{-1} u = u - m nu (Kz + m nu)^{-1} u
        t = sla.cho_solve(self._cf, u)
        value = (u @ u - self.m * self.nu * (u @ t)) / self.m
        return max(float(value), 0.0)


def heldout_violation(fit, z_val, x_val, y_val, kz, nu):
    """Inner maximum of the moment game on validation data (non-negative)."""
    scorer = ViolationScorer(kz, z_val, nu)
    return scorer(predict(fit, x_val) - np.asarray(y_val, dtype=float))


@dataclass(frozen=True)
class HparamGrid:
    alphas: tuple = (0.5, 1.0, 2.0, 3.0)
    lambdas: tuple = (0.5, 1.0, 2.0)
    nus: tuple = (0.5, 1.0, 2.0)
    bw_x: tuple = (0.5, 1.0, 1.5)
    bw_z: tuple = (1.0, 2.0, 3.0)
    base_lambda: float = 1e-2
    base_nu: float = 1e-2

    def validate(self, family):
        axes = [self.lambdas, self.nus]
        axes += [self.bw_x, self.bw_z] if family == "rbf" else [self.alphas]
        if any(len(a) == 0 for a in axes):
            raise InvalidInput("hyperparameter grid is empty")
        if any(v <= 0 for a in axes for v in a) or self.base_lambda <= 0 or self.base_nu <= 0:
            raise InvalidInput("hyperparameter grid entries must be positive")
        return self


def base_scale(n, J=None, sup_h_sq=None, risk_gap=0.0, rule="fixed", value=1e-2):
    """Absolute scale multiplying the lambda and nu grids.

    ``fixed`` returns ``value``; ``rate`` returns ``sup_h_sq * J^2 / n + risk_gap``.
    """
    if rule == "fixed":
        return float(value)
    if rule == "rate":
        if J is None or sup_h_sq is None:
            raise InvalidInput("the rate rule needs J and sup |h|^2")
        return float(sup_h_sq * J ** 2 / n + max(risk_gap, 0.0))
    raise InvalidInput(f"unknown base-scale rule {rule!r}")


@dataclass(frozen=True)
class FamilySpec:
    """What kernels a hyperparameter search draws from.

    ``learned`` and ``product`` need a trained spectral model. For ``product``
    the treatment kernel is the learned psi-kernel on ``x[:, x_rest]`` times an
    RBF on the overlap columns ``x[:, x_overlap]``; the instrument kernel is the
    learned phi-kernel on all of ``z`` times an RBF on ``z[:, z_overlap]``.
    """

    family: str = "learned"
    recipe: str = "eq9prime"
    alpha_prime: str = "plus1"  # "plus1" (alpha + 1) or "one"
    x_overlap: tuple = ()
    x_rest: tuple = ()
    z_overlap: tuple = ()


def _candidates(spec, grid, model, z, x):
    fam = spec.family
    if fam == "rbf":
        mx, mz = median_heuristic(x), median_heuristic(z)
        for bx, bz in itertools.product(grid.bw_x, grid.bw_z):
            yield {"bw_x": bx, "bw_z": bz}, RbfKernel(bx * mx), RbfKernel(bz * mz)
        return
    if model is None:
        raise InvalidInput(f"the {fam} kernel family needs a trained spectral model")
    if fam == "product":
        if not spec.x_overlap or not spec.x_rest:
            raise InvalidInput("product family needs overlap and remaining x columns")
        k_t = RbfKernel(median_heuristic(x[:, list(spec.x_overlap)]))
        k_tz = RbfKernel(median_heuristic(z[:, list(spec.z_overlap)])) if spec.z_overlap else None
    elif fam != "learned":
        raise InvalidInput(f"unknown kernel family {fam!r}")
    for a in grid.alphas:
        a_prime = 1.0 if spec.alpha_prime == "one" else a + 1.0
        if spec.recipe == "alg1":
            kx, kz = build_alg1_pair(model, a)
            if spec.alpha_prime == "one":
                kz = build_kz(model, 1.0)
        else:
            kx, kz = build_kx(model, a), build_kz(model, a_prime)
        a_used = kz.alpha
        if fam == "product":
            kx = product_kernel(kx, k_t, spec.x_rest, spec.x_overlap)
            if k_tz is not None:
                kz = product_kernel(kz, k_tz, range(z.shape[1]), spec.z_overlap)
        yield {"alpha": a, "alpha_prime": a_used}, kx, kz


def default_scorer_kernel(spec, model, z):
    """Common adversary kernel used to score every grid point of a family."""
    if spec.family == "rbf":
        return RbfKernel(median_heuristic(z))
    kz = build_kz(model, 1.0)
    if spec.family == "product" and spec.z_overlap:
        k_t = RbfKernel(median_heuristic(z[:, list(spec.z_overlap)]))
        kz = product_kernel(kz, k_t, range(z.shape[1]), spec.z_overlap)
    return kz


@dataclass
class Selection:
    config: dict
    fit: CmmFit
    rows: list
    scorer_nu: float


RESULT_COLUMNS = ("config_id", "alpha", "lambda", "nu", "bw_x", "bw_z",
                  "heldout_violation", "test_mse")


def select_hparams(est, val, grid, spec=None, model=None, test=None, scorer_kernel=None,
                   scorer_nu=None, score_all_on_test=False):
    """Fit every grid point on ``est`` and keep the smallest held-out violation on ``val``.

    ``est``, ``val`` and ``test`` are ``(z, x, y)`` triples; ``test`` may carry a
    truth vector in place of ``y`` and is only used for the reported test MSE.
    Ties go to the first grid point.
    """
    spec = FamilySpec() if spec is None else spec
    grid.validate(spec.family)
    z, x, y = (np.asarray(a, dtype=float) for a in est)
    zv, xv, yv = (np.asarray(a, dtype=float) for a in val)
    n = len(y)
    if n < 1:
        raise InvalidInput("empty estimation split")
    if spec.family != "rbf" and model is None:
        raise InvalidInput(f"the {spec.family} kernel family needs a trained spectral model")
    if scorer_kernel is None:
        scorer_kernel = default_scorer_kernel(spec, model, z)
    scorer_nu = grid.base_nu if scorer_nu is None else scorer_nu
    scorer = ViolationScorer(scorer_kernel, zv, scorer_nu)

    rows, best = [], None
    cid = 0
    kz_cache = {}
    for kcfg, kx, kz in _candidates(spec, grid, model, z, x):
        factored = isinstance(kx, LearnedKernel) and isinstance(kz, LearnedKernel)
        if factored:
            hx, hz = kx.factor(x), kz.factor(z)
        else:
            kx_g = gram(kx, x)
            key = repr(kz.to_dict()) if not isinstance(kz, LearnedKernel) else id(kz)
            if key not in kz_cache:
                kz_cache.clear()
                kz_cache[key] = gram(kz, z)
            kz_g = kz_cache[key]
            _check_psd(kx_g, "Kx")
            _check_psd(kz_g, "Kz")
            kzkx = kz_g @ kx_g
        for lm, nm in itertools.product(grid.lambdas, grid.nus):
            lam, nu = lm * grid.base_lambda, nm * grid.base_nu
            if factored:
                fit = fit_minimax_factored(hx, hz, y, lam, nu, x, kx)
            else:
                fit = fit_minimax(kx_g, kz_g, y, lam, nu, x, kx, check_psd=False, kzkx=kzkx)
            score = scorer(predict(fit, xv) - yv)
            row = {"config_id": cid, "alpha": kcfg.get("alpha", ""), "lambda": lam, "nu": nu,
                   "bw_x": kcfg.get("bw_x", ""), "bw_z": kcfg.get("bw_z", ""),
                   "heldout_violation": score, "test_mse": ""}
            config = dict(kcfg, lam=lam, nu=nu, lambda_mult=lm, nu_mult=nm, config_id=cid)
            if test is not None and score_all_on_test:
                row["test_mse"] = test_mse(fit, test[1], test[2])
            rows.append(row)
            if best is None or score < best[0]:
                best = (score, config, fit, row)
            cid += 1
        if not factored:
            del kx_g, kzkx
    score, config, fit, row = best
    config["heldout_violation"] = score
    if test is not None and row["test_mse"] == "":
        row["test_mse"] = test_mse(fit, test[1], test[2])
    config["test_mse"] = row["test_mse"] if test is not None else None
    return Selection(config, fit, rows, scorer_nu)


def test_mse(fit, x_test, truth):
    err = predict(fit, x_test) - np.asarray(truth, dtype=float)
    return float(np.mean(err ** 2))


test_mse.__test__ = False


def write_results(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)

