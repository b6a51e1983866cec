"""Dense symmetric linear algebra: eigendecomposition, fractional powers, PSD projection."""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateMatrix, InvalidInput, NumericalFailure

# eigenvalues below CLAMP_RTOL * lambda_max are raised to that floor before a negative power
CLAMP_RTOL = 1e-10


@dataclass(frozen=True)
class EigenDecomp:
    eigenvalues: np.ndarray  # descending
    eigenvectors: np.ndarray  # columns

    def reconstruct(self, values=None):
        lam = self.eigenvalues if values is None else values
        v = self.eigenvectors
        return symmetrize((v * lam) @ v.T)


def symmetrize(a):
    a = np.asarray(a, dtype=float)
    return 0.5 * (a + a.T)


def check_symmetric(a, name="matrix"):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidInput(f"{name} must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInput(f"{name} has non-finite entries")
    tol = 1e-12 * np.maximum(1.0, np.abs(a))
    if np.any(np.abs(a - a.T) > tol):
        raise InvalidInput(f"{name} is not symmetric")
    return a


def sym_eig(a):
    """Eigendecomposition of a symmetric matrix, eigenvalues sorted descending."""
    a = check_symmetric(a)
    try:
        lam, vec = np.linalg.eigh(a)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"eigendecomposition did not converge: {exc}") from exc
    order = np.argsort(lam)[::-1]
    return EigenDecomp(lam[order], vec[:, order])


def frac_power(a, power):
    """Return ``V diag(lam**power) V^T``.

    Negative eigenvalues are treated as zero. For a negative ``power`` every
    eigenvalue is first raised to ``CLAMP_RTOL * lambda_max``.
    """
    a = check_symmetric(a)
    power = float(power)
    if power == 1.0:
        return psd_project(a)
    eig = sym_eig(a)
    lam = eig.eigenvalues
    lam_max = lam[0] if lam.size else 0.0
    if power < 0:
        if lam_max <= 0:
            raise DegenerateMatrix("negative power of a matrix with no positive eigenvalue")
        lam = np.maximum(lam, CLAMP_RTOL * lam_max)
    else:
        lam = np.maximum(lam, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        powered = lam ** power
    return eig.reconstruct(powered)


def psd_project(a):
    """Clip negative eigenvalues to zero; PSD inputs are returned unchanged."""
    a = check_symmetric(a)
    eig = sym_eig(a)
    if eig.eigenvalues.size == 0 or eig.eigenvalues[-1] >= 0:
        return a.copy()
    return eig.reconstruct(np.maximum(eig.eigenvalues, 0.0))
