"""End-to-end experiments: generate data, learn features, select and evaluate estimators."""

import csv
import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import datagen
from .cmm import FamilySpec, base_scale, predict, select_hparams, test_mse
from .contrastive import train_spectral
from .datagen import Dataset, gen_npiv, gen_proxy
from .errors import InvalidInput
from .oracles import chi2_plugin, gaussian_oracle

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ResultRow:
    experiment: str
    method: str
    n: int
    dim: int  # d for npiv, D_ex for proxy
    metric: str
    value: float
    seed: int


RESULT_FIELDS = tuple(ResultRow.__dataclass_fields__)


def write_rows(rows, path, append=False):
    with open(path, "a" if append else "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_FIELDS)
        if not append or fh.tell() == 0:
            writer.writeheader()
        for row in rows:
            writer.writerow(asdict(row))


def read_rows(path):
    with open(path, newline="") as fh:
        return [ResultRow(r["experiment"], r["method"], int(r["n"]), int(r["dim"]), r["metric"],
                          float(r["value"]), int(r["seed"])) for r in csv.DictReader(fh)]


def split_fractions(train_fraction):
    half = 0.5
    return {"train": half * train_fraction, "validation": half * (1 - train_fraction),
            "estimation": half * train_fraction, "est_validation": half * (1 - train_fraction)}


def make_dataset(cfg):
    d = cfg.data
    if d.path:
        return Dataset.load(d.path)
    total = d.n
    fractions = split_fractions(d.train_fraction)
    n_test = int(round(d.test_factor * d.n / 2))
    if d.dgp == "npiv":
        return gen_npiv(d.rho, d.d, total, cfg.seed, fractions, n_test)
    return gen_proxy(d.d_ex, total, cfg.seed, fractions=fractions, n_test=n_test)


class ColumnView:
    """A dataset whose ``split`` exposes only some treatment columns."""

    def __init__(self, data, x_cols):
        self.data, self.x_cols = data, list(x_cols)

    def split(self, name):
        z, x, y = self.data.split(name)
        return z, x[:, self.x_cols], y


def overlap_layout(data, cfg):
    """``(x_overlap, x_rest, z_overlap)`` column indices for product kernels, else None."""
    mode = cfg.kernel.overlap
    cols = data.meta.get("layout", {}).get("overlap_cols", [])
    if mode == "none" or (mode == "auto" and not cols):
        return None
    if not cols:
        raise InvalidInput("product kernels need a dataset with declared overlap columns")
    rest = [c for c in range(data.x.shape[1]) if c not in cols]
    # overlap columns lead both z and x
    return tuple(cols), tuple(rest), tuple(cols)


def train_model(data, cfg):
    layout = overlap_layout(data, cfg)
    view = data if layout is None else ColumnView(data, layout[1])
    return train_spectral(view, cfg.spectral.train_config(cfg.seed))


def _base(cfg, model, n_est):
    est = cfg.estimator
    if est.base_rule == "fixed":
        return base_scale(n_est, rule="fixed", value=est.base_value)
    report = model.report if model is not None else {}
    sup_h_sq = float(report.get("sup_h_sq", 1.0))
    gap = float(report.get("risk_gap", 0.0))
    return est.base_value * base_scale(n_est, report.get("J", 1), sup_h_sq, gap, rule="rate")


def dose_response(fit, t_grid, w_sample):
    """``t -> mean_i f((t, w_i))`` for a treatment laid out in column 0."""
    w_sample = np.asarray(w_sample, dtype=float)
    m = len(w_sample)
    query = np.column_stack([np.repeat(t_grid, m), np.tile(w_sample, (len(t_grid), 1))])
    return predict(fit, query).reshape(len(t_grid), m).mean(axis=1)


def fit_family(data, cfg, method, model=None):
    """Hyperparameter search for one estimator family; returns the selection."""
    est, val = data.split("estimation"), data.split("est_validation")
    spec = FamilySpec(family="rbf") if method == "rbf" else FamilySpec(
        family="learned", recipe=cfg.kernel.recipe, alpha_prime=cfg.kernel.alpha_prime)
    if method != "rbf":
        layout = overlap_layout(data, cfg)
        if layout is not None:
            spec = FamilySpec("product", cfg.kernel.recipe, cfg.kernel.alpha_prime, *layout)
    test = None
    if data.kind == "npiv" and "test" in data.splits:
        zt, xt, _ = data.split("test")
        test = (zt, xt, data.f0("test"))
    grid = cfg.estimator.grid(_base(cfg, model, len(est[2])))
    return select_hparams(est, val, grid, spec, model, test=test)


def experiment_id(kind, n, dim, rho=None):
    parts = [kind] + ([f"rho{rho:g}"] if rho is not None else []) + [f"n{n}", f"dim{dim}"]
    return "-".join(parts)


def evaluate(data, cfg, model=None, methods=None, dose_rows=500, grid_size=50):
    """Fit, select and score each method; returns a list of ResultRow."""
    methods = list(cfg.methods if methods is None else methods)
    dim = cfg.data.d if data.kind == "npiv" else cfg.data.d_ex
    n = len(data.rows("estimation")) + len(data.rows("est_validation"))
    exp_id = experiment_id(data.kind, n, dim, cfg.data.rho if data.kind == "npiv" else None)
    out = []

    def row(method, metric, value):
        out.append(ResultRow(exp_id, method, n, dim, metric, float(value), cfg.seed))

    if model is not None:
        row("learned", "val_divergence", model.report.get("val_divergence", np.nan))
        row("learned", "J", model.report.get("J", np.nan))
    if data.kind == "npiv" and "test" in data.splits:
        oracle = gaussian_oracle(cfg.data.rho, 1) if cfg.data.rho > 0 else None
        if oracle is not None:
            row("oracle", "chi2_plugin", chi2_plugin(oracle, data.latent("zbar", "test"),
                                                     data.latent("xbar", "test")))
    for method in methods:
        if method == "learned" and model is None:
            raise InvalidInput("the learned kernel needs a trained spectral model")
        sel = fit_family(data, cfg, method, model)
        row(method, "heldout_violation", sel.config["heldout_violation"])
        if data.kind == "npiv":
            if sel.config.get("test_mse") is not None:
                row(method, "test_mse", sel.config["test_mse"])
        else:
            t_grid = datagen.treatment_grid(data, grid_size)
            _, x_test, _ = data.split("test") if "test" in data.splits else data.split("est_validation")
            w_sample = x_test[:dose_rows, 1:]
            est_curve = datagen.unstandardize(dose_response(sel.fit, t_grid, w_sample), data)
            truth = data.dose_response(t_grid)
            row(method, "ate_mae", np.mean(np.abs(est_curve - truth)))
    if data.kind == "proxy":
        t_grid = datagen.treatment_grid(data, grid_size)
        truth = data.dose_response(t_grid)
        # the baselines see every non-test row, like the two-stage methods
        rows = np.concatenate([data.rows(s) for s in data.splits if s != "test"])
        t = data.latents["t"][rows]
        y = datagen.unstandardize(data.y[rows], data)
        naive = datagen.naive_dose_response(t, y, t_grid)
        row("naive", "ate_mae", np.mean(np.abs(naive - truth)))
        lat = datagen.latent_oracle_dose_response(
            t, data.latents["vbar"][rows], data.latents["wbar"][rows], y, t_grid)
        row("latent_oracle", "ate_mae", np.mean(np.abs(lat - truth)))
    return out


def run_experiment(cfg, data=None):
    """Generate (or reuse) data, train features when needed and evaluate all methods."""
    cfg.validate()
    data = make_dataset(cfg) if data is None else data
    model = train_model(data, cfg) if "learned" in cfg.methods else None
    return evaluate(data, cfg, model), model, data


__all__ = ["ResultRow", "run_experiment", "evaluate", "train_model", "make_dataset",
           "write_rows", "read_rows", "dose_response", "test_mse", "fit_family"]
