"""Seeded synthetic data: the nonparametric IV process and a proxy-control process.

Observed covariates are produced by random two-hidden-layer tanh decoders
applied to (informative latent, independent nuisance) inputs.
"""

import csv
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidInput

SPLIT_NAMES = ("train", "validation", "estimation", "est_validation", "test")
DEFAULT_FRACTIONS = {"train": 0.4, "validation": 0.1, "estimation": 0.4, "est_validation": 0.1}


@dataclass(frozen=True)
class DecoderSpec:
    in_dim: int
    out_dim: int
    seed: int
    activation: str = "tanh"

    @property
    def hidden(self):
        return 2 * self.out_dim

    def layers(self):
        rng = np.random.default_rng([self.seed, 104729])
        widths = [self.in_dim, self.hidden, self.hidden, self.out_dim]
        return [(rng.standard_normal((a, b)) / np.sqrt(a), 0.1 * rng.standard_normal(b))
                for a, b in zip(widths[:-1], widths[1:])]

    def __call__(self, inputs):
        h = np.asarray(inputs, dtype=float)
        layers = self.layers()
        for i, (w, b) in enumerate(layers):
            h = h @ w + b
            if i < len(layers) - 1:
                h = np.tanh(h)
        return h


@dataclass(frozen=True)
class Dataset:
    z: np.ndarray
    x: np.ndarray
    y: np.ndarray
    splits: dict  # name -> row indices
    seed: int
    meta: dict = field(default_factory=dict)
    latents: dict = field(default_factory=dict)  # name -> per-row array

    @property
    def n(self):
        return len(self.y)

    def rows(self, name):
        if name not in self.splits:
            raise InvalidInput(f"dataset has no split {name!r}")
        return self.splits[name]

    def split(self, name):
        idx = self.rows(name)
        return self.z[idx], self.x[idx], self.y[idx]

    def latent(self, key, name):
        return self.latents[key][self.rows(name)]

    @property
    def kind(self):
        return self.meta["dgp"]

    def f0(self, name):
        """True structural function (standardized units) on the rows of a split."""
        if self.kind != "npiv":
            raise InvalidInput("structural function values are only tabulated for npiv data")
        m, s = self.meta["m_y"], self.meta["s_y"]
        return (np.abs(self.latent("xbar", name)) - m) / s

    def dose_response(self, t):
        """Closed-form E[y | do(t)] in original units for proxy data."""
        if self.kind != "proxy":
            raise InvalidInput("dose response is only defined for proxy data")
        return proxy_truth(t, self.meta["params"])

    def save(self, directory, force=False):
        from .errors import Refused
        if os.path.exists(directory) and os.listdir(directory) and not force:
            raise Refused(f"{directory} exists; pass force to overwrite")
        os.makedirs(directory, exist_ok=True)
        meta = dict(self.meta)
        meta.update(seed=self.seed, dz=self.z.shape[1], dx=self.x.shape[1],
                    split_sizes={k: int(len(v)) for k, v in self.splits.items()},
                    latent_keys=sorted(self.latents))
        with open(os.path.join(directory, "metadata.json"), "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
        header = ([f"z_{i}" for i in range(self.z.shape[1])]
                  + [f"x_{i}" for i in range(self.x.shape[1])] + ["y"])
        keys = sorted(self.latents)
        for name, idx in self.splits.items():
            table = np.column_stack([self.z[idx], self.x[idx], self.y[idx]])
            _write_csv(os.path.join(directory, f"{name}.csv"), header, table)
            if keys:
                lat = np.column_stack([self.latents[k][idx] for k in keys])
                _write_csv(os.path.join(directory, f"{name}_latent.csv"), keys, lat)

    @classmethod
    def load(cls, directory):
        with open(os.path.join(directory, "metadata.json")) as fh:
            meta = json.load(fh)
        dz, dx = meta["dz"], meta["dx"]
        order = [s for s in SPLIT_NAMES if s in meta["split_sizes"]]
        order += [s for s in meta["split_sizes"] if s not in order]
        blocks, lat_blocks, splits, start = [], [], {}, 0
        keys = meta.get("latent_keys", [])
        for name in order:
            table = _read_csv(os.path.join(directory, f"{name}.csv"), dz + dx + 1)
            blocks.append(table)
            if keys:
                lat_blocks.append(_read_csv(os.path.join(directory, f"{name}_latent.csv"), len(keys)))
            splits[name] = np.arange(start, start + len(table))
            start += len(table)
        data = np.vstack(blocks)
        latents = {}
        if keys:
            lat = np.vstack(lat_blocks)
            latents = {k: lat[:, i] for i, k in enumerate(keys)}
        seed = meta.pop("seed")
        for k in ("dz", "dx", "split_sizes", "latent_keys"):
            meta.pop(k, None)
        return cls(data[:, :dz], data[:, dz:dz + dx], data[:, -1], splits, seed, meta, latents)


def _write_csv(path, header, table):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in table:
            writer.writerow([repr(float(v)) for v in row])


def _read_csv(path, width):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        rows = [[float(v) for v in row] for row in reader]
    return np.array(rows, dtype=float).reshape(-1, width)


def make_splits(n, fractions=None, n_test=0):
    """Contiguous row blocks per split; the last fractional split absorbs rounding."""
    fractions = dict(DEFAULT_FRACTIONS if fractions is None else fractions)
    total = sum(fractions.values())
    if fractions and abs(total - 1.0) > 1e-9:
        raise InvalidInput(f"split fractions sum to {total}, not 1")
    splits, start = {}, 0
    names = list(fractions)
    for i, name in enumerate(names):
        size = n - start if i == len(names) - 1 else int(round(fractions[name] * n))
        splits[name] = np.arange(start, start + size)
        start += size
    if n_test:
        splits["test"] = np.arange(n, n + n_test)
    return splits


def _standardize(ybar, splits):
    ref = ybar[splits["train"]] if "train" in splits and len(splits["train"]) > 1 else ybar
    m, s = float(ref.mean()), float(ref.std())
    return (ybar - m) / s, m, s


def gen_npiv(rho, d, n, seed, fractions=None, n_test=0):
    """Nonparametric IV data with latent Gaussian pair correlation ``rho``.

    Latents: zbar, ubar ~ N(0, 1), xbar = rho zbar + sqrt(1 - rho^2) ubar,
    ybar ~ N(|xbar| + 2 ubar, 0.01). Observed z, x are 2d-dimensional decoder
    outputs of (zbar, z_perp) and (xbar, x_perp) with d - 1 nuisance dims each.
    """
    if not 0.0 <= rho < 1.0:
        raise InvalidInput("rho must lie in [0, 1)")
    if d < 1 or n < 1:
        raise InvalidInput("need d >= 1 and n >= 1")
    total = n + n_test
    ss = np.random.SeedSequence(seed)
    data_seed, dec_x_seed, dec_z_seed = ss.spawn(3)
    rng = np.random.default_rng(data_seed)
    zbar = rng.standard_normal(total)
    ubar = rng.standard_normal(total)
    perp = rng.standard_normal((total, 2 * (d - 1)))
    z_perp, x_perp = perp[:, :d - 1], perp[:, d - 1:]
    noise = rng.standard_normal(total)
    xbar = rho * zbar + np.sqrt(1.0 - rho ** 2) * ubar
    ybar = np.abs(xbar) + 2.0 * ubar + 0.1 * noise
    dec_x = DecoderSpec(d, 2 * d, int(dec_x_seed.generate_state(1)[0]))
    dec_z = DecoderSpec(d, 2 * d, int(dec_z_seed.generate_state(1)[0]))
    x = dec_x(np.column_stack([xbar, x_perp]))
    z = dec_z(np.column_stack([zbar, z_perp]))
    splits = make_splits(n, fractions, n_test)
    y, m_y, s_y = _standardize(ybar, splits)
    meta = {
        "dgp": "npiv", "rho": rho, "d": d, "n": n, "n_test": n_test,
        "m_y": m_y, "s_y": s_y,
        "decoders": {"x": asdict(dec_x), "z": asdict(dec_z)},
        "decoder_hidden": "2 x output dim, tanh",
    }
    latents = {"xbar": xbar, "zbar": zbar, "ubar": ubar}
    return Dataset(z, x, y, splits, seed, meta, latents)


@dataclass(frozen=True)
class ProxyParams:
    a_v: float = 1.0  # v_bar = a_v u + sigma_v e_v
    a_w: float = 1.0  # w_bar = a_w u + sigma_w e_w
    sigma_v: float = 0.5
    sigma_w: float = 0.5
    b_u: float = 1.0  # confounding strength in the treatment
    sigma_t: float = 1.0
    link_scale: float = 3.0  # t = link_scale * tanh(s / link_scale)
    c_lin: float = 1.2
    c_quad: float = 1.0
    c_tu: float = 0.5
    c_u: float = 2.0
    sigma_y: float = 0.5
    expansion: int = 4  # decoder output dim = expansion * input dim


def proxy_truth(t, params):
    p = params if isinstance(params, ProxyParams) else ProxyParams(**params)
    t = np.asarray(t, dtype=float)
    return p.c_lin * t + p.c_quad * t ** 2


def gen_proxy(d_ex, n, seed, params=None, fractions=None, n_test=0):
    """Proxy-control data with z = (t, v) and x = (t, w).

    Latent linear-Gaussian confounding: u ~ N(0, 1); the proxies are noisy
    linear images of u, the treatment is a smooth monotone link of
    ``b_u u + noise`` and y = c_lin t + c_quad t^2 + c_tu t u + c_u u + noise,
    so that E[y | do(t)] = c_lin t + c_quad t^2.
    """
    if d_ex < 0 or n < 1:
        raise InvalidInput("need d_ex >= 0 and n >= 1")
    p = ProxyParams() if params is None else params
    total = n + n_test
    ss = np.random.SeedSequence(seed)
    data_seed, dec_v_seed, dec_w_seed = ss.spawn(3)
    rng = np.random.default_rng(data_seed)
    u = rng.standard_normal(total)
    vbar = p.a_v * u + p.sigma_v * rng.standard_normal(total)
    wbar = p.a_w * u + p.sigma_w * rng.standard_normal(total)
    s = p.b_u * u + p.sigma_t * rng.standard_normal(total)
    t = p.link_scale * np.tanh(s / p.link_scale)
    v_perp = rng.standard_normal((total, d_ex))
    w_perp = rng.standard_normal((total, d_ex))
    ybar = (p.c_lin * t + p.c_quad * t ** 2 + p.c_tu * t * u + p.c_u * u
            + p.sigma_y * rng.standard_normal(total))
    out_dim = p.expansion * (1 + d_ex)
    dec_v = DecoderSpec(1 + d_ex, out_dim, int(dec_v_seed.generate_state(1)[0]))
    dec_w = DecoderSpec(1 + d_ex, out_dim, int(dec_w_seed.generate_state(1)[0]))
    v = dec_v(np.column_stack([vbar, v_perp]))
    w = dec_w(np.column_stack([wbar, w_perp]))
    splits = make_splits(n, fractions, n_test)
    y, m_y, s_y = _standardize(ybar, splits)
    meta = {
        "dgp": "proxy", "d_ex": d_ex, "n": n, "n_test": n_test,
        "m_y": m_y, "s_y": s_y, "params": asdict(p),
        "decoders": {"v": asdict(dec_v), "w": asdict(dec_w)},
        "decoder_hidden": "2 x output dim, tanh",
        "layout": {"z": "t, v", "x": "t, w", "overlap_cols": [0]},
    }
    latents = {"u": u, "vbar": vbar, "wbar": wbar, "t": t}
    z = np.column_stack([t, v])
    x = np.column_stack([t, w])
    return Dataset(z, x, y, splits, seed, meta, latents)


def treatment_grid(data, size=50, q=(0.05, 0.95)):
    """Fixed evaluation grid over the central treatment range of the training rows."""
    t = data.latent("t", "train") if "train" in data.splits else data.latents["t"]
    lo, hi = np.quantile(t, q)
    return np.linspace(lo, hi, size)


def naive_dose_response(t, y, grid, degree=3):
    """Polynomial least squares of outcome on treatment alone (ignores confounding)."""
    design = np.vander(np.asarray(t, dtype=float), degree + 1)
    coef, *_ = np.linalg.lstsq(design, np.asarray(y, dtype=float), rcond=None)
    return np.vander(np.asarray(grid, dtype=float), degree + 1) @ coef


def latent_oracle_dose_response(t, vbar, wbar, y, grid):
    """Two-stage least squares on the latent proxies, averaged over the sample of ``wbar``.

    Bridge features ``[1, t, t^2, w, t w]`` are instrumented by ``[1, t, t^2, v, t v]``;
    this family contains the true bridge of the linear-Gaussian latent model.
    """
    t, vbar, wbar, y = (np.asarray(a, dtype=float) for a in (t, vbar, wbar, y))
    feats = np.column_stack([np.ones_like(t), t, t ** 2, wbar, t * wbar])
    inst = np.column_stack([np.ones_like(t), t, t ** 2, vbar, t * vbar])
    proj = inst @ np.linalg.lstsq(inst, feats, rcond=None)[0]
    coef, *_ = np.linalg.lstsq(proj, y, rcond=None)
    g = np.asarray(grid, dtype=float)
    w_mean = wbar.mean()
    return coef[0] + coef[1] * g + coef[2] * g ** 2 + (coef[3] + coef[4] * g) * w_mean


def unstandardize(values, data):
    return np.asarray(values, dtype=float) * data.meta["s_y"] + data.meta["m_y"]
