import json

import numpy as np
import pytest

from netcarve import infer_shapes, load_model, save_model
from netcarve.cli import main
from netcarve.train import HrnetLiteSpec, build_hrnet_lite

SAMPLE_LOG = "\n".join(f"RAM 1/2MB VDD_GPU_SOC {p}mW/{p}mW" for p in [1000] * 10)


@pytest.fixture
def toy_model_file(tmp_path):
    model = build_hrnet_lite(HrnetLiteSpec(width=4), seed=2)
    # spread the BN scales so global selection has distinct scores to rank
    rng = np.random.default_rng(9)
    for name, arr in model.params.items():
        if name.endswith(".bn.gamma"):
            model.params[name] = rng.uniform(0.05, 1.5, arr.shape).astype(np.float32)
    model = infer_shapes(model, (2, 3, 16, 16))
    path = tmp_path / "model.onnx"
    save_model(model, path)
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out.strip()
    return code, json.loads(out.splitlines()[-1]) if out else {}


def train_config(tmp_path, **extra):
    config = {
        "model": {"width": 4},
        "dataset": {"image_size": 16, "train_samples": 8, "val_samples": 4, "seed": 1},
        "train": {"epochs": 1, "batch_size": 4},
    }
    config.update(extra)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config))
    return path


def test_build_writes_artifacts(tmp_path, capsys):
    out = tmp_path / "out"
    code, doc = run(capsys, "build", "--width", 4, "--image-size", 16, "--output-dir", out)
    assert code == 0
    assert (out / "model.onnx").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "build"
    assert doc["params"] > 0 and doc["macs"] > 0


def test_train_default_toy_config(tmp_path, capsys):
    cfg = train_config(tmp_path)
    out = tmp_path / "run"
    code, doc = run(capsys, "train", "--config", cfg, "--output-dir", out)
    assert code == 0
    assert (out / "model.onnx").exists()
    history = [json.loads(line) for line in (out / "history.jsonl").read_text().splitlines()]
    assert len(history) == 1
    assert {"epoch", "lr", "loss", "miou"} <= set(history[0])
    assert (out / "manifest.json").exists()


def test_train_rejects_negative_lr(tmp_path, capsys):
    cfg = train_config(tmp_path, train={"epochs": 1, "batch_size": 4, "base_lr": -0.5})
    code = main(["train", "--config", str(cfg), "--output-dir", str(tmp_path / "x")])
    assert code == 2
    err = capsys.readouterr().err
    assert "base_lr" in err


def test_train_rejects_unknown_field(tmp_path, capsys):
    cfg = train_config(tmp_path, train={"epochs": 1, "batch_size": 4, "learning_rate": 0.1})
    code = main(["train", "--config", str(cfg), "--output-dir", str(tmp_path / "x")])
    assert code == 2
    assert "learning_rate" in capsys.readouterr().err


def test_train_swd_history_has_a_t(tmp_path, capsys):
    cfg = train_config(tmp_path)
    out = tmp_path / "swd"
    code, _ = run(capsys, "train", "--config", cfg, "--regularizer", "swd",
                  "--final-rate", 0.5, "--output-dir", out)
    assert code == 0
    history = [json.loads(line) for line in (out / "history.jsonl").read_text().splitlines()]
    assert all("a_t" in record for record in history)


def test_prune_shrink_target_zero(toy_model_file, tmp_path, capsys):
    out = tmp_path / "p0"
    code, doc = run(capsys, "prune-shrink", toy_model_file, "--target", 0, "--output-dir", out)
    assert code == 0
    assert doc["scatter_nodes"] == 0
    assert doc["params_after"] == doc["params_before"]
    shrunk = load_model(out / "shrunk.onnx")
    assert not any(n.op == "ScatterND" for n in shrunk.nodes)


def test_prune_shrink_channels_budget(toy_model_file, tmp_path, capsys):
    out = tmp_path / "p5"
    code, doc = run(capsys, "prune-shrink", toy_model_file, "--target", 0.5,
                    "--budget", "channels", "--output-dir", out)
    assert code == 0
    assert doc["max_rel_err"] <= 1e-5
    assert doc["params_after"] < doc["params_before"]
    mask = json.loads((out / "mask.json").read_text())
    assert mask["budget_kind"] == "channel-fraction"
    assert all(len(v) >= 1 for v in mask["keep"].values())


def test_prune_shrink_extreme_target_min_keep(toy_model_file, tmp_path, capsys):
    out = tmp_path / "p99"
    code, doc = run(capsys, "prune-shrink", toy_model_file, "--target", 0.99,
                    "--budget", "channels", "--output-dir", out)
    assert code in (0, 3)
    mask = json.loads((out / "mask.json").read_text())
    assert all(len(v) >= 1 for v in mask["keep"].values())
    assert doc["max_rel_err"] <= 1e-5


def test_prune_shrink_unachievable_params_budget(tmp_path, capsys):
    # untrained model: all BN scales tie at 1.0, so a single threshold exists
    # and a 0.5 parameter budget is unreachable
    model = infer_shapes(build_hrnet_lite(HrnetLiteSpec(width=4), seed=2), (2, 3, 16, 16))
    path = tmp_path / "untrained.onnx"
    save_model(model, path)
    out = tmp_path / "p50"
    code, doc = run(capsys, "prune-shrink", path, "--target", 0.5,
                    "--budget", "params", "--output-dir", out)
    assert code == 3
    assert doc["exact"] is False


def test_verify_pass_and_corrupted_fail(toy_model_file, tmp_path, capsys):
    out = tmp_path / "v"
    code, _ = run(capsys, "prune-shrink", toy_model_file, "--target", 0.4,
                  "--budget", "channels", "--output-dir", out)
    assert code == 0
    code, doc = run(capsys, "verify", toy_model_file, out / "mask.json", out / "shrunk.onnx",
                    "--n", 5)
    assert code == 0 and doc["pass"] is True

    shrunk = load_model(out / "shrunk.onnx")
    shrunk.params["head.classifier.w"][0, 0, 0, 0] += 1.0
    save_model(shrunk, out / "bad.onnx")
    code, doc = run(capsys, "verify", toy_model_file, out / "mask.json", out / "bad.onnx",
                    "--n", 5)
    assert code == 1 and doc["pass"] is False


def test_cost_outputs_totals(toy_model_file, capsys):
    code, doc = run(capsys, "cost", toy_model_file)
    assert code == 0
    assert doc["params"] == sum(doc["per_node_params"].values())
    assert doc["macs"] == sum(doc["per_node_macs"].values())


def test_cost_with_baseline_fraction(toy_model_file, tmp_path, capsys):
    out = tmp_path / "c"
    run(capsys, "prune-shrink", toy_model_file, "--target", 0.5,
        "--budget", "channels", "--output-dir", out)
    code, doc = run(capsys, "cost", out / "shrunk.onnx", "--baseline", toy_model_file)
    assert code == 0
    assert 0 < doc["mac_fraction"] < 1
    assert 0 < doc["param_fraction"] < 1


def test_energy_calibrate_shipped_series(capsys):
    code, doc = run(capsys, "energy", "--series", "swd", "--resolution", "512x1024")
    assert code == 0
    assert doc["r_squared"] >= 0.95
    assert doc["slope_j"] > 0 and doc["intercept_j"] > 0


def test_energy_estimate_model(toy_model_file, tmp_path, capsys):
    out = tmp_path / "e"
    run(capsys, "prune-shrink", toy_model_file, "--target", 0.5,
        "--budget", "channels", "--output-dir", out)
    code, doc = run(capsys, "energy", "--estimate", out / "shrunk.onnx",
                    "--baseline", toy_model_file)
    assert code == 0
    assert np.isfinite(doc["estimated_joules"])
    assert 0 < doc["mac_fraction"] < 1
    assert doc["series"] == "swd"


def test_power_constant_log(tmp_path, capsys):
    log = tmp_path / "power.log"
    log.write_text(SAMPLE_LOG)
    code, doc = run(capsys, "power", "--log", log, "--inferences", 10)
    assert code == 0
    assert doc["total_j"] == pytest.approx(10.0)
    assert doc["per_inference_j"] == pytest.approx(1.0)


def test_power_missing_file_is_io_error(tmp_path, capsys):
    code = main(["power", "--log", str(tmp_path / "nope.log")])
    assert code == 4


def test_unparseable_model_is_io_error(tmp_path, capsys):
    bad = tmp_path / "bad.onnx"
    bad.write_bytes(b"\x99" * 64)
    code = main(["cost", str(bad)])
    assert code == 4


def test_reruns_identical_outputs(toy_model_file, tmp_path, capsys):
    outs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        code, _ = run(capsys, "prune-shrink", toy_model_file, "--target", 0.4,
                      "--budget", "channels", "--seed", 3, "--output-dir", out)
        assert code == 0
        outs.append((out / "shrunk.onnx").read_bytes())
        assert (out / "mask.json").exists()
    assert outs[0] == outs[1]


def test_prune_shrink_params_budget_accuracy(tmp_path, capsys):
    # wide graph: the parameter quantum is fine enough to land within 0.5pp
    from netcarve.corpus import random_graph

    model = random_graph(seed=2, family="residual", widths=(24, 49))
    path = tmp_path / "wide.onnx"
    save_model(model, path)
    out = tmp_path / "p"
    code, doc = run(capsys, "prune-shrink", path, "--target", 0.5,
                    "--budget", "params", "--output-dir", out)
    assert code == 0
    assert doc["exact"] is True
    assert abs(doc["achieved_fraction"] - 0.5) <= 0.005
    loaded = load_model(out / "shrunk.onnx")
    recount = sum(v.size for k, v in loaded.params.items()
                  if not (k.endswith(".mean") or k.endswith(".var")
                          or v.dtype == np.int64))
    assert abs(1 - recount / doc["params_before"] - 0.5) <= 0.005


def test_energy_calibrate_explicit_csv(tmp_path, capsys):
    csv_path = tmp_path / "cal.csv"
    csv_path.write_text(
        "mac_fraction,energy_joules,series,resolution\n"
        "1.0,3.0,custom,any\n0.5,2.0,custom,any\n0.0,1.0,custom,any\n"
    )
    code, doc = run(capsys, "energy", "--calibrate", csv_path,
                    "--series", "custom", "--resolution", "any")
    assert code == 0
    assert doc["slope_j"] == pytest.approx(2.0)
    assert doc["intercept_j"] == pytest.approx(1.0)
    assert doc["r_squared"] == pytest.approx(1.0)
