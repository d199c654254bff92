import json

import numpy as np
import pytest

import outliertune as ot


def test_version():
    assert ot.__version__.count(".") == 2


def test_round_trip_within_half_step():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(32, 16)) * rng.uniform(0.1, 10, size=16)
    for axis in ("per_tensor", "per_token", "per_channel"):
        for sym in (True, False):
            q = ot.quantize(x, bits=8, symmetric=sym, axis=axis)
            assert q["codes"].dtype == np.int8
            err = np.abs(ot.fake_quantize(x, 8, sym, axis) - x)
            s = np.asarray(q["scales"])
            half = {"per_tensor": s[0], "per_token": s[:, None], "per_channel": s[None, :]}[axis] / 2
            assert np.all(err <= half * (1 + 1e-12))


def test_per_channel_wins_on_outlier_channel():
    x = ot.gen_activations(2048, 64, [5], 12.0, -80.0, seed=1)
    ch = ot.quant_mse(x, 8, True, "per_channel")
    tok = ot.quant_mse(x, 8, True, "per_token")
    ten = ot.quant_mse(x, 8, True, "per_tensor")
    assert ch <= 0.1 * tok <= 0.1 * ten


def test_fold_identity():
    rng = np.random.default_rng(1)
    x, w = rng.normal(size=(8, 12)), rng.normal(size=(5, 12))
    s = 10 ** rng.uniform(-3, 3, size=12)
    np.testing.assert_allclose((x / s) @ ot.fold_weights(w, s).T, x @ w.T, rtol=1e-12, atol=1e-12)


def test_op_count_law():
    n = ot.expected_op_count("channel_naive", 8, 16, 4)
    f = ot.expected_op_count("channel_folded", 8, 16, 4)
    assert n["scale_mults"] - f["scale_mults"] == 8 * 16 * 4


def test_transform_preserves_and_quantizes(tmp_path):
    m = ot.BlockModel.random(seed=3)
    m.inject_outliers([5], 12.0, -75.0)
    ln1, ln2 = m.calibrate(ot.gen_inputs(512, seed=3))
    t = ot.transform(m, ln1, ln2, bits=8)
    x = ot.gen_inputs(16, seed=4)
    y_fp = m.forward(x)
    y_bypass, _ = t.forward(x, quantized=False)
    assert np.linalg.norm(y_bypass - y_fp) <= 1e-9 * np.linalg.norm(y_fp)
    y_q, ops = t.forward(x, quantized=True)
    assert np.linalg.norm(y_q - y_fp) <= 0.05 * np.linalg.norm(y_fp)
    assert ops["int_mults"] > 0
    assert abs(t.ln1_z[5] + 75.0) < 20.0

    t.save(str(tmp_path / "t.otun"))
    y_loaded, _ = ot.TransformedBlock.load(str(tmp_path / "t.otun")).forward(x)
    np.testing.assert_array_equal(y_loaded, y_q)


def test_errors_map_to_python_exceptions(tmp_path):
    bad = tmp_path / "bad.otun"
    bad.write_bytes(b"nope")
    with pytest.raises(ot.FormatError):
        ot.BlockModel.load(str(bad))
    with pytest.raises(ot.OutlierTuneError):
        ot.quantize(np.ones((2, 2)), bits=5)


def test_cli_in_process(tmp_path):
    code, out, _ = ot.cli(["gen-model", "--seed", "1", "--out", str(tmp_path / "m.otun")])
    assert code == 0
    assert json.loads(out)["schema"] == 1
    assert ot.cli(["gen-model"])[0] == 1


def test_ablation_report():
    r = ot.run_experiment("ablation", seed=0)
    assert r["schema"] == 1
    assert "ablation" in r["results"]
