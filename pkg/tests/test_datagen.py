import numpy as np
import pytest

from spectral_cmm import datagen as G
from spectral_cmm.errors import InvalidInput, Refused
from spectral_cmm.oracles import chi2_plugin, gaussian_oracle


@pytest.mark.parametrize("rho", [0.0, 0.7])
def test_latent_correlation(rho):
    data = G.gen_npiv(rho, 1, 100_000, 3)
    r = np.corrcoef(data.latents["xbar"], data.latents["zbar"])[0, 1]
    assert abs(r - rho) <= 0.01


def test_npiv_shapes_and_standardization():
    data = G.gen_npiv(0.5, 3, 5000, 0, n_test=1000)
    assert data.z.shape == (6000, 6) and data.x.shape == (6000, 6)
    _, _, y = data.split("train")
    assert abs(y.mean()) <= 0.05 and abs(y.std() - 1) <= 0.05
    rows = np.concatenate([data.rows(s) for s in data.splits])
    assert np.array_equal(np.sort(rows), np.arange(6000))
    assert len(data.rows("test")) == 1000


def test_npiv_structural_function():
    data = G.gen_npiv(0.5, 1, 2000, 1)
    xbar = data.latent("xbar", "train")
    assert np.allclose(data.f0("train"), (np.abs(xbar) - data.meta["m_y"]) / data.meta["s_y"])


def test_npiv_determinism():
    a, b = G.gen_npiv(0.7, 2, 300, 5), G.gen_npiv(0.7, 2, 300, 5)
    assert np.array_equal(a.z, b.z) and np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
    c = G.gen_npiv(0.7, 2, 300, 6)
    assert not np.array_equal(a.z[0], c.z[0])


def test_npiv_rejects_bad_input():
    with pytest.raises(InvalidInput):
        G.gen_npiv(1.0, 1, 10, 0)
    with pytest.raises(InvalidInput):
        G.gen_npiv(0.5, 0, 10, 0)


def test_decoder_deterministic():
    spec = G.DecoderSpec(3, 6, 1234)
    inputs = np.random.default_rng(0).standard_normal((10, 3))
    assert np.array_equal(spec(inputs), G.DecoderSpec(3, 6, 1234)(inputs))
    assert spec.hidden == 12


def test_split_fractions_must_sum_to_one():
    with pytest.raises(InvalidInput):
        G.make_splits(10, {"train": 0.5, "validation": 0.2})


def test_latent_plugin_divergence_converges():
    o = gaussian_oracle(0.5, 3)
    est = []
    for n in (2_000, 200_000):
        data = G.gen_npiv(0.5, 1, n, 2)
        est.append(chi2_plugin(o, data.latents["zbar"], data.latents["xbar"]))
    assert all(e > 0 for e in est)
    assert abs(est[1] - 1 / 3) < 0.03


def test_proxy_layout():
    data = G.gen_proxy(32, 200, 0)
    out_dim = G.ProxyParams().expansion * 33
    assert data.z.shape[1] == 1 + out_dim and data.x.shape[1] == 1 + out_dim
    assert np.array_equal(data.z[:, 0], data.latents["t"]) and np.array_equal(data.x[:, 0], data.z[:, 0])
    assert data.meta["layout"]["overlap_cols"] == [0]


def test_proxy_without_extra_noise_dims():
    data = G.gen_proxy(0, 100, 0)
    p = G.ProxyParams()
    dec = G.DecoderSpec(**data.meta["decoders"]["v"])
    assert np.allclose(data.z[:, 1:], dec(data.latents["vbar"][:, None]))
    assert data.z.shape[1] == 1 + p.expansion


def _mae(t, y, data, f):
    grid = G.treatment_grid(data)
    return np.mean(np.abs(f(grid) - data.dose_response(grid)))


def test_no_confounding_naive_regression_recovers_truth():
    params = G.ProxyParams(b_u=0.0)
    data = G.gen_proxy(0, 20_000, 1, params=params)
    t, y = data.latents["t"], G.unstandardize(data.y, data)
    grid = G.treatment_grid(data)
    naive = G.naive_dose_response(t, y, grid)
    assert np.mean(np.abs(naive - data.dose_response(grid))) < 0.1


def test_confounding_hurts_naive_not_latent_oracle():
    data = G.gen_proxy(0, 10_000, 2)
    t, y = data.latents["t"], G.unstandardize(data.y, data)
    grid = G.treatment_grid(data)
    truth = data.dose_response(grid)
    naive = G.naive_dose_response(t, y, grid)
    oracle = G.latent_oracle_dose_response(t, data.latents["vbar"], data.latents["wbar"], y, grid)
    assert np.mean(np.abs(naive - truth)) > np.mean(np.abs(oracle - truth))


def test_save_load_round_trip(tmp_path):
    data = G.gen_proxy(2, 60, 3, n_test=20)
    data.save(tmp_path / "d")
    back = G.Dataset.load(tmp_path / "d")
    assert np.allclose(back.z, data.z, rtol=0, atol=0) and np.array_equal(back.y, data.y)
    assert {k: list(v) for k, v in back.splits.items()} == {k: list(v) for k, v in data.splits.items()}
    assert np.array_equal(back.latents["t"], data.latents["t"])
    assert back.meta["params"] == data.meta["params"]
    header = (tmp_path / "d" / "train.csv").read_text().splitlines()[0].split(",")
    assert header[0] == "z_0" and header[-1] == "y" and f"x_{data.x.shape[1] - 1}" in header


def test_save_refuses_existing(tmp_path):
    data = G.gen_npiv(0.5, 1, 30, 0)
    data.save(tmp_path / "d")
    with pytest.raises(Refused):
        data.save(tmp_path / "d")
    data.save(tmp_path / "d", force=True)


def test_dose_response_only_for_proxy():
    with pytest.raises(InvalidInput):
        G.gen_npiv(0.5, 1, 10, 0).dose_response(np.zeros(3))
