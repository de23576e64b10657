"""Reference interpreter for the IR (inference mode) and segmentation metrics.

This is the ground truth for every equivalence claim, so semantics are kept
as plain as possible: direct convolution (realized with im2col + matmul,
which is the same arithmetic), BatchNorm on running statistics, bilinear
Resize with half-pixel coordinates.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .graph import GraphModel, GraphError, topological_order


class ExecutionError(GraphError):
    pass


@dataclass
class ExecutionResult:
    outputs: dict[str, np.ndarray]
    elapsed_s: float


def im2col(x: np.ndarray, kh: int, kw: int, stride: tuple[int, int], padding: tuple[int, int],
           fill: float = 0.0) -> np.ndarray:
    """Unfold (N, C, H, W) into (N, C*kh*kw, Hout*Wout) patches."""
    n, c, h, w = x.shape
    sh, sw = stride
    ph, pw = padding
    hout = (h + 2 * ph - kh) // sh + 1
    wout = (w + 2 * pw - kw) // sw + 1
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=fill)
    # Strided view over the padded tensor, then gather the strided windows.
    shape = (n, c, hout, wout, kh, kw)
    strides = (
        x.strides[0],
        x.strides[1],
        x.strides[2] * sh,
        x.strides[3] * sw,
        x.strides[2],
        x.strides[3],
    )
    windows = np.lib.stride_tricks.as_strided(x, shape=shape, strides=strides)
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, hout * wout)
    return np.ascontiguousarray(cols)


def conv2d(x, w, b, stride, padding):
    n = x.shape[0]
    cout, cin, kh, kw = w.shape
    hout = (x.shape[2] + 2 * padding[0] - kh) // stride[0] + 1
    wout = (x.shape[3] + 2 * padding[1] - kw) // stride[1] + 1
    cols = im2col(x, kh, kw, stride, padding)
    y = np.matmul(w.reshape(cout, cin * kh * kw), cols)
    if b is not None:
        y = y + b.reshape(1, cout, 1)
    return y.reshape(n, cout, hout, wout)


def batchnorm_eval(x, gamma, beta, mean, var, eps):
    scale = gamma / np.sqrt(var + eps)
    shift = beta - mean * scale
    return x * scale.reshape(1, -1, 1, 1) + shift.reshape(1, -1, 1, 1)


def resize_coords(out_dim: int, scale: float, in_dim: int):
    """Half-pixel source coordinates: per output index, two input indices + weight."""
    x = (np.arange(out_dim, dtype=np.float64) + 0.5) / scale - 0.5
    x0 = np.floor(x).astype(np.int64)
    frac = x - x0
    lo = np.clip(x0, 0, in_dim - 1)
    hi = np.clip(x0 + 1, 0, in_dim - 1)
    return lo, hi, frac


def resize_bilinear(x, scale_h, scale_w):
    n, c, h, w = x.shape
    hout = int(np.floor(h * scale_h))
    wout = int(np.floor(w * scale_w))
    ylo, yhi, fy = resize_coords(hout, scale_h, h)
    xlo, xhi, fx = resize_coords(wout, scale_w, w)
    fy = fy.reshape(1, 1, -1, 1)
    fx = fx.reshape(1, 1, 1, -1)
    top = x[:, :, ylo, :][:, :, :, xlo] * (1 - fx) + x[:, :, ylo, :][:, :, :, xhi] * fx
    bot = x[:, :, yhi, :][:, :, :, xlo] * (1 - fx) + x[:, :, yhi, :][:, :, :, xhi] * fx
    out = top * (1 - fy) + bot * fy
    return out.astype(x.dtype, copy=False)


def maxpool2d(x, kernel, stride, padding):
    n, c, h, w = x.shape
    kh, kw = kernel
    cols = im2col(x, kh, kw, stride, padding, fill=-np.inf)
    hout = (h + 2 * padding[0] - kh) // stride[0] + 1
    wout = (w + 2 * padding[1] - kw) // stride[1] + 1
    cols = cols.reshape(n, c, kh * kw, hout * wout)
    return cols.max(axis=2).reshape(n, c, hout, wout)


def scatter_nd(data, indices, updates):
    """Copy data, then overwrite rows of the leading dimension per index tuple."""
    idx = indices.reshape(indices.shape[0], -1)
    if idx.shape[1] != 1:
        raise ExecutionError(f"ScatterND supports index tuples of length 1, got {idx.shape[1]}")
    if updates.shape != (idx.shape[0],) + data.shape[1:]:
        # shrunk graphs pin the batch dimension; never broadcast silently
        raise ExecutionError(
            f"ScatterND updates shape {updates.shape} does not match "
            f"{(idx.shape[0],) + data.shape[1:]} (batch-pinned graph?)"
        )
    out = data.copy()
    out[idx[:, 0]] = updates
    return out


def softmax(x, axis=1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def execute(model: GraphModel, inputs: dict[str, np.ndarray]) -> ExecutionResult:
    """Run the model in inference mode on the given inputs."""
    t0 = time.perf_counter()
    values: dict[str, np.ndarray] = {}
    for name in model.inputs:
        if name not in inputs:
            raise ExecutionError(f"missing graph input {name!r}")
        values[name] = np.asarray(inputs[name])
    compute_dtype = values[model.inputs[0]].dtype
    for name, arr in model.params.items():
        if arr.dtype == np.float32 and not np.all(np.isfinite(arr)):
            raise ExecutionError(f"parameter {name!r} contains non-finite values")

    for node in topological_order(model):
        x = values.get(node.inputs[0])
        if x is None:
            x = model.params[node.inputs[0]]
        if node.op == "Conv":
            w = model.params[node.inputs[1]]
            b = model.params[node.inputs[2]] if len(node.inputs) == 3 else None
            y = conv2d(x, w, b, node.attrs.get("stride", (1, 1)), node.attrs.get("padding", (0, 0)))
        elif node.op == "BatchNorm":
            g, bta, mean, var = (model.params[p] for p in node.inputs[1:])
            y = batchnorm_eval(x, g, bta, mean, var, node.attrs.get("epsilon", 1e-5))
        elif node.op == "Relu":
            y = np.maximum(x, 0)
        elif node.op == "Add":
            y = x + values[node.inputs[1]]
        elif node.op == "Concat":
            y = np.concatenate([values[t] for t in node.inputs], axis=1)
        elif node.op == "Resize":
            _, _, sh, sw = node.attrs["scales"]
            y = resize_bilinear(x, sh, sw)
        elif node.op == "MaxPool":
            kh, kw = node.attrs["kernel"]
            y = maxpool2d(x, (kh, kw), node.attrs.get("stride", (kh, kw)), node.attrs.get("padding", (0, 0)))
        elif node.op == "ScatterND":
            data = values.get(node.inputs[0], model.params.get(node.inputs[0]))
            updates = values[node.inputs[2]]
            y = scatter_nd(data, model.params[node.inputs[1]], updates)
        elif node.op == "Transpose":
            y = np.transpose(x, node.attrs["perm"])
        elif node.op == "ConstantOfShape":
            shape = tuple(int(v) for v in model.params[node.inputs[0]])
            y = np.full(shape, node.attrs.get("value", 0.0), dtype=compute_dtype)
        elif node.op == "Softmax":
            y = softmax(x, axis=1)
        elif node.op == "ArgMax":
            y = np.argmax(x, axis=1, keepdims=True).astype(np.int64)
        else:  # pragma: no cover
            raise ExecutionError(f"no executor for op {node.op}")
        for t in node.outputs:
            values[t] = y

    outputs = {name: values[name] for name in model.outputs}
    return ExecutionResult(outputs, time.perf_counter() - t0)


def confusion_matrix(predictions, labels, n_classes, ignore_label=None):
    """K x K counts; rows are ground truth, columns are predictions."""
    p = np.asarray(predictions).reshape(-1)
    t = np.asarray(labels).reshape(-1)
    if p.shape != t.shape:
        raise ValueError(f"prediction/label shapes differ: {p.shape} vs {t.shape}")
    if ignore_label is not None:
        keep = t != ignore_label
        p, t = p[keep], t[keep]
    if p.size == 0:
        raise ValueError("empty evaluation set")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


RAW_DUMP_MAGIC = b"NCRT"  # header: magic, dtype code, rank, dims (all little-endian)
_RAW_DTYPES = {1: np.float32, 2: np.int64, 3: np.float64}
_RAW_CODES = {np.dtype(v): k for k, v in _RAW_DTYPES.items()}


def dump_tensor(arr: np.ndarray, path) -> None:
    """Raw tensor file for cross-checking against external runtimes.

    Layout: 4-byte magic "NCRT", uint32 dtype code (1=float32, 2=int64,
    3=float64), uint32 rank, rank x uint64 dims, then the payload
    little-endian in C order.
    """
    arr = np.ascontiguousarray(arr)
    code = _RAW_CODES.get(arr.dtype)
    if code is None:
        raise ExecutionError(f"no raw dump encoding for dtype {arr.dtype}")
    with open(path, "wb") as f:
        f.write(RAW_DUMP_MAGIC)
        f.write(np.asarray([code, arr.ndim], dtype="<u4").tobytes())
        f.write(np.asarray(arr.shape, dtype="<u8").tobytes())
        f.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != RAW_DUMP_MAGIC:
        raise ExecutionError(f"{path}: not a raw tensor dump")
    code, rank = np.frombuffer(data, dtype="<u4", count=2, offset=4)
    dims = np.frombuffer(data, dtype="<u8", count=int(rank), offset=12)
    dtype = _RAW_DTYPES.get(int(code))
    if dtype is None:
        raise ExecutionError(f"{path}: unknown dtype code {code}")
    offset = 12 + 8 * int(rank)
    arr = np.frombuffer(data, dtype=np.dtype(dtype).newbyteorder("<"), offset=offset)
    return arr.reshape(dims.astype(int)).astype(dtype)


def miou(predictions, labels, n_classes, ignore_label=None):
    """Per-class IoU and mean; classes absent from both sides are excluded."""
    cm = confusion_matrix(predictions, labels, n_classes, ignore_label)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = tp + fp + fn
    present = denom > 0
    iou = np.full(n_classes, np.nan)
    iou[present] = tp[present] / denom[present]
    mean = float(np.mean(iou[present])) if present.any() else float("nan")
    return iou, mean
