import numpy as np
import pytest

from netcarve import GraphBuilder, GraphModel, Node, execute, miou, validate
from netcarve.executor import (
    ExecutionError,
    confusion_matrix,
    maxpool2d,
    resize_bilinear,
    scatter_nd,
    softmax,
)


def run_single(op, attrs, x, params=None, extra_inputs=()):
    params = params or {}
    node = Node("n", op, ["x", *extra_inputs], ["y"], attrs)
    model = GraphModel(nodes=[node], inputs=["x"], outputs=["y"], params=params)
    validate(model)
    return execute(model, {"x": x}).outputs["y"]


def test_identity_1x1_conv():
    x = np.random.default_rng(0).standard_normal((1, 3, 5, 5)).astype(np.float32)
    w = np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1)
    y = run_single("Conv", {"kernel": (1, 1)}, x, params={"w": w}, extra_inputs=["w"])
    assert np.array_equal(y, x)


def test_hand_computed_3x3_conv():
    # single channel 4x4, valid padding: each output is the window dot kernel
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    w = np.asarray([[1, 0, -1], [2, 0, -2], [1, 0, -1]], dtype=np.float32).reshape(1, 1, 3, 3)
    y = run_single("Conv", {"kernel": (3, 3), "padding": (0, 0)}, x,
                   params={"w": w}, extra_inputs=["w"])
    expected = np.empty((2, 2), dtype=np.float32)
    for i in range(2):
        for j in range(2):
            expected[i, j] = float((x[0, 0, i:i + 3, j:j + 3] * w[0, 0]).sum())
    assert np.allclose(y[0, 0], expected, atol=0, rtol=0)
    assert np.array_equal(expected, np.asarray([[-8, -8], [-8, -8]], dtype=np.float32))


def test_conv_linearity_no_bias():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    y1 = run_single("Conv", {"kernel": (3, 3), "padding": (1, 1)}, x, {"w": w}, ["w"])
    y2 = run_single("Conv", {"kernel": (3, 3), "padding": (1, 1)}, 3.0 * x, {"w": w}, ["w"])
    assert np.max(np.abs(y2 - 3.0 * y1)) / np.max(np.abs(y2)) < 1e-6


def test_batchnorm_eval_formula():
    x = np.ones((1, 2, 2, 2), dtype=np.float32)
    params = {
        "g": np.asarray([2.0, 0.5], dtype=np.float32),
        "b": np.asarray([1.0, -1.0], dtype=np.float32),
        "m": np.asarray([0.5, 0.0], dtype=np.float32),
        "v": np.asarray([4.0, 1.0], dtype=np.float32),
    }
    node = Node("bn", "BatchNorm", ["x", "g", "b", "m", "v"], ["y"], {"epsilon": 0.0})
    conv_w = np.eye(2, dtype=np.float32).reshape(2, 2, 1, 1)
    pre = Node("c", "Conv", ["inp", "w"], ["x"], {"kernel": (1, 1)})
    model = GraphModel(nodes=[pre, node], inputs=["inp"], outputs=["y"],
                       params=params | {"w": conv_w})
    with pytest.raises(Exception):
        validate(model)  # epsilon must be > 0
    node.attrs["epsilon"] = 1e-12
    validate(model)
    y = execute(model, {"inp": x}).outputs["y"]
    expect0 = 2.0 * (1.0 - 0.5) / np.sqrt(4.0 + 1e-12) + 1.0
    expect1 = 0.5 * (1.0 - 0.0) / np.sqrt(1.0 + 1e-12) - 1.0
    assert np.allclose(y[0, 0], expect0) and np.allclose(y[0, 1], expect1)


def test_scatter_pattern_zero_fills_missing_channels():
    # survivors {0, 2} of 4: reconstructed channels 1 and 3 are exactly zero
    data = np.zeros((4, 1, 2, 2), dtype=np.float32)
    updates = np.ones((2, 1, 2, 2), dtype=np.float32)
    indices = np.asarray([[0], [2]], dtype=np.int64)
    out = scatter_nd(data, indices, updates)
    assert np.array_equal(out[0], np.ones((1, 2, 2)))
    assert np.array_equal(out[2], np.ones((1, 2, 2)))
    assert np.array_equal(out[1], np.zeros((1, 2, 2)))
    assert np.array_equal(out[3], np.zeros((1, 2, 2)))


def test_resize_constant_preserved():
    x = np.full((1, 3, 4, 4), 2.5, dtype=np.float32)
    y = resize_bilinear(x, 2.0, 2.0)
    assert y.shape == (1, 3, 8, 8)
    assert np.allclose(y, 2.5)


def test_resize_half_pixel_values():
    # upscale x2 of [0, 1]: half-pixel coordinates give [0, 0.25, 0.75, 1]
    x = np.asarray([0.0, 1.0], dtype=np.float32).reshape(1, 1, 1, 2)
    y = resize_bilinear(x, 1.0, 2.0)
    assert np.allclose(y.reshape(-1), [0.0, 0.25, 0.75, 1.0])


def test_maxpool_windows():
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    y = maxpool2d(x, (2, 2), (2, 2), (0, 0))
    assert np.array_equal(y.reshape(2, 2), np.asarray([[5, 7], [13, 15]], dtype=np.float32))


def test_softmax_and_argmax_axis1():
    x = np.zeros((1, 3, 2, 2), dtype=np.float32)
    x[0, 1] = 5.0
    s = softmax(x, axis=1)
    assert np.allclose(s.sum(axis=1), 1.0)
    assert s[0, 1].min() > 0.9
    y = run_single("ArgMax", {}, x)
    assert y.dtype == np.int64
    assert np.all(y == 1)


def test_missing_input_reported():
    b = GraphBuilder(input_name="x")
    t = b.conv("x", 3, 4, "c", k=1, pad=0)
    model = validate(b.finish(t))
    with pytest.raises(ExecutionError, match="missing graph input"):
        execute(model, {})


def test_nonfinite_parameter_flagged():
    b = GraphBuilder(input_name="x")
    t = b.conv("x", 3, 4, "c", k=1, pad=0)
    model = validate(b.finish(t))
    model.params["c.w"][0, 0, 0, 0] = np.nan
    with pytest.raises(ExecutionError, match="non-finite"):
        execute(model, {"x": np.zeros((1, 3, 4, 4), dtype=np.float32)})


def test_execute_deterministic(residual_model):
    x = np.random.default_rng(3).standard_normal((1, 3, 8, 8)).astype(np.float32)
    a = execute(residual_model, {"img": x}).outputs["head.out"]
    b = execute(residual_model, {"img": x}).outputs["head.out"]
    assert a.tobytes() == b.tobytes()


# ----------------------------------------------------------------- metrics

def test_miou_perfect_prediction():
    labels = np.random.default_rng(0).integers(0, 3, (2, 8, 8))
    iou, mean = miou(labels, labels, 3)
    assert mean == 1.0
    assert np.allclose(iou[np.isfinite(iou)], 1.0)


def test_miou_inverted_binary():
    labels = np.zeros((4, 4), dtype=np.int64)
    labels[:2] = 1
    iou, mean = miou(1 - labels, labels, 2)
    assert mean == 0.0


def test_miou_matches_bruteforce_tally():
    rng = np.random.default_rng(11)
    pred = rng.integers(0, 3, (1, 8, 8))
    truth = rng.integers(0, 3, (1, 8, 8))
    iou, mean = miou(pred, truth, 3)
    for k in range(3):
        tp = int(np.sum((pred == k) & (truth == k)))
        fp = int(np.sum((pred == k) & (truth != k)))
        fn = int(np.sum((pred != k) & (truth == k)))
        if tp + fp + fn:
            assert iou[k] == pytest.approx(tp / (tp + fp + fn))
    finite = iou[np.isfinite(iou)]
    assert mean == pytest.approx(float(finite.mean()))


def test_miou_ignore_label_and_empty():
    labels = np.full((2, 2), 255, dtype=np.int64)
    with pytest.raises(ValueError, match="empty"):
        miou(np.zeros((2, 2), dtype=np.int64), labels, 2, ignore_label=255)
    labels[0, 0] = 1
    iou, mean = miou(np.ones((2, 2), dtype=np.int64), labels, 2, ignore_label=255)
    assert mean == 1.0


def test_miou_permutation_equivariant():
    rng = np.random.default_rng(2)
    pred = rng.integers(0, 4, (64,))
    truth = rng.integers(0, 4, (64,))
    iou, mean = miou(pred, truth, 4)
    perm = np.asarray([2, 3, 1, 0])
    iou_p, mean_p = miou(perm[pred], perm[truth], 4)
    assert mean_p == pytest.approx(mean)
    inv = np.argsort(perm)
    assert np.allclose(iou_p[perm], iou, equal_nan=True)


def test_confusion_matrix_totals():
    pred = np.asarray([0, 1, 2, 1])
    truth = np.asarray([0, 1, 1, 2])
    cm = confusion_matrix(pred, truth, 3)
    assert cm.sum() == 4
    assert cm[1, 1] == 1 and cm[1, 2] == 1 and cm[2, 1] == 1


def test_raw_tensor_dump_round_trip(tmp_path):
    from netcarve.executor import dump_tensor, load_tensor

    rng = np.random.default_rng(0)
    for arr in (rng.standard_normal((2, 3, 4, 5)).astype(np.float32),
                rng.integers(-5, 5, (7, 1)).astype(np.int64),
                rng.standard_normal(6)):
        path = tmp_path / "t.bin"
        dump_tensor(arr, path)
        back = load_tensor(path)
        assert back.dtype == arr.dtype and back.shape == arr.shape
        assert np.array_equal(back, arr)
    # header is fixed and documented: magic + dtype code + rank + dims
    raw = path.read_bytes()
    assert raw[:4] == b"NCRT"


def test_raw_tensor_dump_rejects_garbage(tmp_path):
    from netcarve.executor import load_tensor

    path = tmp_path / "junk.bin"
    path.write_bytes(b"not a tensor")
    with pytest.raises(ExecutionError, match="raw tensor"):
        load_tensor(path)
