"""Contrastive density-ratio learning with factorized features ``h(z, x) = phi(z) . psi(x)``.

The trainer maximizes the U-statistic

    D_n(h) = 2/n sum_i h(z_i, x_i) - 1/(n(n-1)) sum_{i != j} h(z_i, x_j)^2,

whose population counterpart minus one is the chi-square lower bound
``D[h] = 2 E_P h - E_{Pz x Px} h^2 - 1``.
"""

import csv
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nnet
from .errors import InvalidInput, NumericalFailure
from .linalg import psd_project, symmetrize

log = logging.getLogger(__name__)

EIG_CAP = 1.2  # covariance eigenvalue threshold of the optional penalty


def _features(a):
    a = np.asarray(a, dtype=float)
    return a[:, None] if a.ndim == 1 else a


def empirical_risk(phi_z, psi_x):
    """U-statistic risk from paired feature rows ``phi_z[i]``, ``psi_x[i]``.

    Runs in O(n J^2) using sum_{i,j} h_ij^2 = <Phi^T Phi, Psi^T Psi>_F.
    """
    phi_z, psi_x = _features(phi_z), _features(psi_x)
    n = phi_z.shape[0]
    if n < 2:
        raise InvalidInput("empirical risk needs at least two samples")
    if psi_x.shape != phi_z.shape:
        raise InvalidInput(f"feature shapes differ: {phi_z.shape} vs {psi_x.shape}")
    diag = np.einsum("ij,ij->i", phi_z, psi_x)
    all_sq = np.sum((phi_z.T @ phi_z) * (psi_x.T @ psi_x))
    off_sq = all_sq - np.sum(diag ** 2)
    return float(2.0 * diag.mean() - off_sq / (n * (n - 1)))


def divergence_estimate(phi_z, psi_x):
    """Chi-square lower-bound estimate ``D_n - 1``."""
    return empirical_risk(phi_z, psi_x) - 1.0


def _check_pmf(pmf):
    pmf = np.asarray(pmf, dtype=float)
    if pmf.ndim != 2 or np.any(pmf < 0) or not np.all(np.isfinite(pmf)):
        raise InvalidInput("pmf must be a non-negative finite 2-d table")
    if abs(pmf.sum() - 1.0) > 1e-12:
        raise InvalidInput(f"pmf sums to {pmf.sum()!r}, not 1")
    return pmf


def population_risk_discrete(h, pmf):
    """Exact ``D[h]`` (including the -1) for a joint pmf over a finite grid Z x X."""
    pmf = _check_pmf(pmf)
    h = np.asarray(h, dtype=float)
    if h.shape != pmf.shape:
        raise InvalidInput("h table and pmf differ in shape")
    prod = np.outer(pmf.sum(axis=1), pmf.sum(axis=0))
    return float(2.0 * np.sum(pmf * h) - np.sum(prod * h ** 2) - 1.0)


def _top_eig(cov):
    lam, vec = np.linalg.eigh(symmetrize(cov))
    return lam[-1], vec[:, -1]


def loss_and_feature_grads(phi_z, psi_x, penalty=0.0):
    """Negative batch U-statistic (plus penalty) and its gradient w.r.t. both feature blocks."""
    b = phi_z.shape[0]
    if b < 2:
        raise InvalidInput("batch size must be at least 2")
    diag = np.einsum("ij,ij->i", phi_z, psi_x)
    gram_phi = phi_z.T @ phi_z
    gram_psi = psi_x.T @ psi_x
    off_sq = np.sum(gram_phi * gram_psi) - np.sum(diag ** 2)
    c = 1.0 / (b * (b - 1))
    risk = 2.0 * diag.mean() - c * off_sq
    loss = -risk
    g_phi = -(2.0 / b) * psi_x + c * 2.0 * (phi_z @ gram_psi - diag[:, None] * psi_x)
    g_psi = -(2.0 / b) * phi_z + c * 2.0 * (psi_x @ gram_phi - diag[:, None] * phi_z)
    lam_x, vec_x = _top_eig(gram_psi / b)
    lam_z, vec_z = _top_eig(gram_phi / b)
    if penalty > 0:
        ex = max(lam_x - EIG_CAP, 0.0)
        ez = max(lam_z - EIG_CAP, 0.0)
        loss += penalty * (ex ** 2 + ez ** 2)
        # d lambda_max / d F = (2/B) F v v^T for a simple top eigenvalue
        if ex > 0:
            g_psi = g_psi + penalty * 2.0 * ex * (2.0 / b) * np.outer(psi_x @ vec_x, vec_x)
        if ez > 0:
            g_phi = g_phi + penalty * 2.0 * ez * (2.0 / b) * np.outer(phi_z @ vec_z, vec_z)
    info = {"risk": float(risk), "lambda_max_x": float(lam_x), "lambda_max_z": float(lam_z)}
    return float(loss), g_phi, g_psi, info


def minibatch_loss_and_grads(phi_net, psi_net, z_batch, x_batch, penalty=0.0,
                             mode="train", rng=None):
    """Loss on one batch and parameter gradients for both networks."""
    if len(z_batch) < 2:
        raise InvalidInput("batch size must be at least 2")
    fz, tape_z = nnet.forward(phi_net, z_batch, mode, rng)
    fx, tape_x = nnet.forward(psi_net, x_batch, mode, rng)
    loss, g_phi, g_psi, info = loss_and_feature_grads(fz, fx, penalty)
    grads_phi = nnet.backward(phi_net, tape_z, g_phi)
    grads_psi = nnet.backward(psi_net, tape_x, g_psi)
    return loss, (grads_phi, grads_psi), info


def estimate_covariance(features):
    """Uncentered second-moment matrix ``F^T F / n``, PSD-projected."""
    f = _features(features)
    if f.shape[0] < 1:
        raise InvalidInput("need at least one feature row")
    return psd_project(symmetrize(f.T @ f / f.shape[0]))


@dataclass
class TrainConfig:
    J_grid: tuple = (10, 20, 30)
    hidden: tuple = (50, 50, 50)
    dropout: float = 0.2
    lr: float = 1e-3
    weight_decay: float = 1e-2
    batch_size: int = 512
    max_epochs: int = 200
    patience: int = 20
    cov_penalty: float = 0.0
    seed: int = 0
    cov_split: float = 0.0

    def validate(self):
        if not self.J_grid or min(self.J_grid) < 1:
            raise InvalidInput("J grid must be non-empty with positive entries")
        if self.batch_size < 2:
            raise InvalidInput("batch size must be at least 2")
        if self.cov_penalty < 0:
            raise InvalidInput("covariance penalty weight must be non-negative")
        if not 0.0 <= self.cov_split < 1.0:
            raise InvalidInput("cov_split must lie in [0, 1)")
        if self.max_epochs < 1 or self.patience < 1:
            raise InvalidInput("max_epochs and patience must be positive")
        return self


@dataclass
class SpectralModel:
    phi: nnet.FeatureNet  # instrument side
    psi: nnet.FeatureNet  # treatment side
    sigma_z: np.ndarray
    sigma_x: np.ndarray
    report: dict = field(default_factory=dict)
    curve: list = field(default_factory=list)

    @property
    def J(self):
        return self.psi.out_dim

    def features_z(self, z):
        return self.phi(z)

    def features_x(self, x):
        return self.psi(x)

    def h(self, z, x):
        """Pointwise ``phi(z_i) . psi(x_i)``."""
        return np.einsum("ij,ij->i", self.phi(z), self.psi(x))

    def risk(self, z, x):
        return empirical_risk(self.phi(z), self.psi(x))

    def with_covariances(self, z, x):
        return SpectralModel(self.phi, self.psi, estimate_covariance(self.phi(z)),
                             estimate_covariance(self.psi(x)), dict(self.report), list(self.curve))

    def swapped(self):
        """The same model with the roles of z and x exchanged."""
        return SpectralModel(self.psi, self.phi, self.sigma_x, self.sigma_z,
                             dict(self.report), list(self.curve))

    def to_dict(self):
        return {
            "J": self.J,
            "phi": self.phi.to_dict(),
            "psi": self.psi.to_dict(),
            "sigma_z": self.sigma_z.tolist(),
            "sigma_x": self.sigma_x.tolist(),
            "report": self.report,
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(nnet.FeatureNet.from_dict(doc["phi"]), nnet.FeatureNet.from_dict(doc["psi"]),
                   np.array(doc["sigma_z"], dtype=float), np.array(doc["sigma_x"], dtype=float),
                   doc.get("report", {}))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


CURVE_COLUMNS = ("epoch", "train_risk", "val_risk", "lambda_max_x", "lambda_max_z")


def write_curve(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=("J",) + CURVE_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


def _train_one(z, x, z_val, x_val, J, config, seed_seq):
    rng = np.random.default_rng(seed_seq)
    phi = nnet.FeatureNet.init([z.shape[1], *config.hidden, J], rng, config.dropout)
    psi = nnet.FeatureNet.init([x.shape[1], *config.hidden, J], rng, config.dropout)
    opt = dict(lr=config.lr, weight_decay=config.weight_decay)
    st_phi = nnet.OptimizerState.for_params(phi.params(), **opt)
    st_psi = nnet.OptimizerState.for_params(psi.params(), **opt)
    n = z.shape[0]
    bs = min(config.batch_size, n)
    best = (-np.inf, 0, None)
    curve = []
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            if idx.size < 2:
                continue
            loss, (g_phi, g_psi), _ = minibatch_loss_and_grads(
                phi, psi, z[idx], x[idx], config.cov_penalty, "train", rng)
            if not np.isfinite(loss):
                raise NumericalFailure(f"non-finite training loss at epoch {epoch}", epoch=epoch)
            try:
                nnet.adamw_step(phi, g_phi, st_phi)
                nnet.adamw_step(psi, g_psi, st_psi)
            except NumericalFailure as exc:
                raise NumericalFailure(f"{exc} (epoch {epoch})", epoch=epoch) from exc
        fz, fx = phi(z), psi(x)
        train_risk = empirical_risk(fz, fx)
        val_risk = empirical_risk(phi(z_val), psi(x_val))
        if not (np.isfinite(train_risk) and np.isfinite(val_risk)):
            raise NumericalFailure(f"risk diverged at epoch {epoch}", epoch=epoch)
        curve.append({
            "J": J, "epoch": epoch, "train_risk": train_risk, "val_risk": val_risk,
            "lambda_max_x": float(np.linalg.eigvalsh(fx.T @ fx / n)[-1]),
            "lambda_max_z": float(np.linalg.eigvalsh(fz.T @ fz / n)[-1]),
        })
        if val_risk > best[0]:
            best = (val_risk, epoch, (phi.copy(), psi.copy()))
        elif epoch - best[1] >= config.patience:
            break
    val_risk, best_epoch, (phi, psi) = best
    return phi, psi, val_risk, best_epoch, curve


def train_spectral(data, config):
    """Fit ``phi``, ``psi`` on the ``train`` split, early-stop and pick J on ``validation``.

    ``data`` must provide ``split(name) -> (z, x, y)``. With ``config.cov_split > 0``
    a seeded fraction of the training rows is held aside for the covariance
    estimates; otherwise the training rows are reused.
    """
    config.validate()
    z, x, _ = data.split("train")
    z_val, x_val, _ = data.split("validation")
    if len(z) < 2 or len(z_val) < 2:
        raise InvalidInput("train and validation splits need at least two rows each")
    z_cov, x_cov = z, x
    if config.cov_split > 0:
        perm = np.random.default_rng([config.seed, 7919]).permutation(len(z))
        n_cov = int(round(config.cov_split * len(z)))
        if n_cov < 1 or len(z) - n_cov < 2:
            raise InvalidInput("cov_split leaves an empty covariance or training split")
        cov_idx, fit_idx = np.sort(perm[:n_cov]), np.sort(perm[n_cov:])
        z_cov, x_cov = z[cov_idx], x[cov_idx]
        z, x = z[fit_idx], x[fit_idx]
    seeds = np.random.SeedSequence(config.seed).spawn(len(config.J_grid))
    best = None
    scores = {}
    curves = []
    for J, ss in zip(config.J_grid, seeds):
        phi, psi, val_risk, best_epoch, curve = _train_one(z, x, z_val, x_val, int(J), config, ss)
        log.info("J=%d: held-out risk %.4f at epoch %d", J, val_risk, best_epoch)
        scores[int(J)] = val_risk
        curves.extend(curve)
        if best is None or val_risk > best[2]:
            best = (phi, psi, val_risk, best_epoch, int(J), len(curve))
    phi, psi, val_risk, best_epoch, J, epochs = best
    train_risk = empirical_risk(phi(z), psi(x))
    sub = slice(0, min(len(z), 500))
    sup_h_sq = float(np.max((phi(z[sub]) @ psi(x[sub]).T) ** 2))
    report = {
        "J": J,
        "val_risk": val_risk,
        "val_divergence": val_risk - 1.0,
        "train_risk": train_risk,
        "risk_gap": max(train_risk - val_risk, 0.0),
        "sup_h_sq": sup_h_sq,
        "best_epoch": best_epoch,
        "epochs": epochs,
        "J_scores": scores,
        "cov_split": config.cov_split,
        "config": asdict(config),
    }
    model = SpectralModel(phi, psi, estimate_covariance(phi(z_cov)), estimate_covariance(psi(x_cov)),
                          report, curves)
    return model
