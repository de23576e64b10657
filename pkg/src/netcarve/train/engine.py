"""Toy-scale training engine: manual backprop over the supported op set.

Training mode uses batch statistics for BatchNorm (running stats updated with
momentum 0.1); evaluation goes through the reference executor. Runs are
bitwise reproducible for a fixed seed and config.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..dependency import build_dependency_partition
from ..executor import execute, miou
from ..graph import GraphModel, infer_shapes, topological_order, validate
from ..pruning import (
    SlimmingConfig,
    SwdConfig,
    score_channels,
    select_mask,
    slimming_penalty,
    swd_apply,
    swd_coefficient,
    targeted_channels,
)
from . import ops
from .data import augment_batch

BN_STAT_MOMENTUM = 0.1


class TrainingError(Exception):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []


@dataclass
class TrainConfig:
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 40
    batch_size: int = 8
    poly_power: int = 2
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be > 0, got {self.base_lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")

    @classmethod
    def paper_preset(cls, **overrides):
        """The full-scale schedule: 200 epochs, batch 10."""
        kw = dict(epochs=200, batch_size=10)
        kw.update(overrides)
        return cls(**kw)


@dataclass
class TrainResult:
    model: GraphModel
    history: list[dict] = field(default_factory=list)


def poly_lr(epoch: int, total_epochs: int, base_lr: float, power: int = 2) -> float:
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return base_lr * (1 - epoch / total_epochs) ** power


def trainable_parameters(model: GraphModel) -> list[str]:
    """Conv weights/biases and BN scale/shift, in topological order."""
    names = []
    for node in topological_order(model):
        if node.op == "Conv":
            names.extend(node.inputs[1:])
        elif node.op == "BatchNorm":
            names.extend(node.inputs[1:3])
    return names


def _forward_train(model, params, x, channel_masks):
    values = {model.inputs[0]: x}
    tape = []
    stat_updates = {}
    for node in topological_order(model):
        inp = [values.get(t, params.get(t)) for t in node.inputs]
        if node.op == "Conv":
            b = inp[2] if len(inp) == 3 else None
            y, cache = ops.conv_forward(inp[0], inp[1], b, node.attrs["stride"], node.attrs["padding"])
        elif node.op == "BatchNorm":
            y, cache, (mean, var) = ops.batchnorm_forward_train(inp[0], inp[1], inp[2], node.attrs["epsilon"])
            stat_updates[node.inputs[3]] = mean
            stat_updates[node.inputs[4]] = var
        elif node.op == "Relu":
            y, cache = ops.relu_forward(inp[0])
        elif node.op == "Add":
            y, cache = inp[0] + inp[1], None
        elif node.op == "Concat":
            y, cache = np.concatenate(inp, axis=1), [v.shape[1] for v in inp]
        elif node.op == "Resize":
            _, _, sh, sw = node.attrs["scales"]
            y, cache = ops.resize_forward(inp[0], sh, sw)
        elif node.op == "MaxPool":
            y, cache = ops.maxpool_forward(inp[0], node.attrs["kernel"], node.attrs["stride"],
                                           node.attrs["padding"])
        elif node.op == "Softmax":
            y, cache = ops.softmax_forward(inp[0], axis=1)
        elif node.op == "Transpose":
            y, cache = ops.transpose_forward(inp[0], node.attrs["perm"])
        elif node.op == "ScatterND":
            y, cache = ops.scatter_nd_forward(inp[0], inp[1], inp[2])
        elif node.op == "ConstantOfShape":
            shape = tuple(int(v) for v in inp[0])
            y, cache = np.full(shape, node.attrs["value"], dtype=x.dtype), None
        else:
            raise TrainingError(f"op {node.op} (node {node.id}) is not differentiable/trainable")
        mask = channel_masks.get(node.outputs[0]) if channel_masks else None
        if mask is not None:
            y = y * np.asarray(mask, dtype=y.dtype).reshape(1, -1, 1, 1)
        for t in node.outputs:
            values[t] = y
        tape.append((node, cache))
    return values, tape, stat_updates


def _backward(model, params, values, tape, dout, channel_masks):
    tensor_grads = {model.outputs[0]: dout}
    param_grads = {}

    def add_grad(store, key, g):
        if key in store:
            store[key] = store[key] + g
        else:
            store[key] = g

    for node, cache in reversed(tape):
        dy = tensor_grads.pop(node.outputs[0], None)
        if dy is None:
            continue
        mask = channel_masks.get(node.outputs[0]) if channel_masks else None
        if mask is not None:
            dy = dy * np.asarray(mask, dtype=dy.dtype).reshape(1, -1, 1, 1)
        if node.op == "Conv":
            dx, dw, db = ops.conv_backward(dy, cache)
            add_grad(tensor_grads, node.inputs[0], dx)
            add_grad(param_grads, node.inputs[1], dw)
            if db is not None:
                add_grad(param_grads, node.inputs[2], db)
        elif node.op == "BatchNorm":
            dx, dgamma, dbeta = ops.batchnorm_backward(dy, cache)
            add_grad(tensor_grads, node.inputs[0], dx)
            add_grad(param_grads, node.inputs[1], dgamma)
            add_grad(param_grads, node.inputs[2], dbeta)
        elif node.op == "Relu":
            add_grad(tensor_grads, node.inputs[0], ops.relu_backward(dy, cache))
        elif node.op == "Add":
            add_grad(tensor_grads, node.inputs[0], dy)
            add_grad(tensor_grads, node.inputs[1], dy)
        elif node.op == "Concat":
            offset = 0
            for t, width in zip(node.inputs, cache):
                add_grad(tensor_grads, t, dy[:, offset:offset + width])
                offset += width
        elif node.op == "Resize":
            add_grad(tensor_grads, node.inputs[0], ops.resize_backward(dy, cache))
        elif node.op == "MaxPool":
            add_grad(tensor_grads, node.inputs[0], ops.maxpool_backward(dy, cache))
        elif node.op == "Softmax":
            add_grad(tensor_grads, node.inputs[0], ops.softmax_backward(dy, cache))
        elif node.op == "Transpose":
            add_grad(tensor_grads, node.inputs[0], ops.transpose_backward(dy, cache))
        elif node.op == "ScatterND":
            ddata, dupdates = ops.scatter_nd_backward(dy, cache)
            add_grad(tensor_grads, node.inputs[0], ddata)
            add_grad(tensor_grads, node.inputs[2], dupdates)
        # ConstantOfShape: nothing flows upstream
    return param_grads


def forward_backward(model, batch, params=None, update_stats=True, channel_masks=None):
    """Loss and parameter gradients for one (images, labels) batch.

    Training-mode BatchNorm; running statistics are folded into `params`
    (momentum 0.1) unless update_stats is False. Raises TrainingError naming
    the first node whose output went non-finite if the loss diverges.
    """
    images, labels = batch
    if params is None:
        params = model.params
    values, tape, stat_updates = _forward_train(model, params, images, channel_masks)
    loss, dlogits = ops.cross_entropy_forward(values[model.outputs[0]], labels)
    if not np.isfinite(loss):
        for node, _ in tape:
            if not np.all(np.isfinite(values[node.outputs[0]])):
                raise TrainingError(f"non-finite values at node {node.id}")
        raise TrainingError("non-finite loss")
    grads = _backward(model, params, values, tape, dlogits, channel_masks)
    if update_stats:
        for node, _ in tape:
            if node.op != "BatchNorm":
                continue
            mean_name, var_name = node.inputs[3], node.inputs[4]
            batch_mean = stat_updates[mean_name]
            batch_var = stat_updates[var_name]
            n = images.shape[0] * images.shape[2] * images.shape[3]
            unbiased = batch_var * (n / max(n - 1, 1))
            params[mean_name] = ((1 - BN_STAT_MOMENTUM) * params[mean_name]
                                 + BN_STAT_MOMENTUM * batch_mean).astype(params[mean_name].dtype)
            params[var_name] = ((1 - BN_STAT_MOMENTUM) * params[var_name]
                                + BN_STAT_MOMENTUM * unbiased).astype(params[var_name].dtype)
    return loss, grads


def sgd_step(params, grads, velocity, lr, momentum, weight_decay):
    """v <- momentum*v + grad + wd*param; param <- param - lr*v."""
    for name, g in grads.items():
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(params[name])
        v = momentum * v + g + weight_decay * params[name]
        velocity[name] = v
        params[name] = (params[name] - lr * v).astype(params[name].dtype)
    return params, velocity


def model_with_params(model: GraphModel, params: dict) -> GraphModel:
    out = model.copy()
    out.params = {k: np.asarray(v) for k, v in params.items()}
    return out


def save_checkpoint(directory, model: GraphModel, velocity: dict, epoch: int) -> None:
    """Checkpoint = saved ONNX model + optimizer sidecar.

    The sidecar is an .npz archive holding every momentum buffer keyed by its
    parameter name, plus the integer epoch counter under "__epoch__".
    """
    from ..onnx_io import save_model

    path = Path(directory)
    path.mkdir(parents=True, exist_ok=True)
    save_model(validate(model), path / "model.onnx")
    np.savez(path / "optimizer.npz", __epoch__=np.asarray(epoch), **velocity)


def load_checkpoint(directory):
    """Returns (model, velocity, epoch) written by save_checkpoint."""
    from ..onnx_io import load_model

    path = Path(directory)
    model = load_model(path / "model.onnx")
    with np.load(path / "optimizer.npz") as data:
        epoch = int(data["__epoch__"])
        velocity = {k: data[k] for k in data.files if k != "__epoch__"}
    return model, velocity, epoch


def evaluate_miou(model: GraphModel, params: dict, images, labels, n_classes: int,
                  batch_size: int = 16) -> float:
    """mIoU of argmax predictions over the channel axis, eval-mode forward.

    Shrunk graphs pin the batch dimension inside their scatter constants, so
    ragged tail chunks are zero-padded up to batch_size and the padded
    predictions discarded.
    """
    eval_model = model_with_params(model, params)
    preds = []
    for i in range(0, images.shape[0], batch_size):
        chunk = images[i:i + batch_size]
        actual = chunk.shape[0]
        if actual < batch_size:
            pad = np.zeros((batch_size - actual,) + chunk.shape[1:], dtype=chunk.dtype)
            chunk = np.concatenate([chunk, pad])
        out = execute(eval_model, {eval_model.inputs[0]: chunk})
        logits = out.outputs[eval_model.outputs[0]]
        preds.append(np.argmax(logits[:actual], axis=1))
    _, mean = miou(np.concatenate(preds), labels, n_classes)
    return mean


def train(model: GraphModel, dataset, config: TrainConfig, regularizer=None,
          checkpoint_dir=None) -> TrainResult:
    """Run the full training loop; deterministic given config.seed.

    regularizer: None, a SlimmingConfig (smooth-L1 penalty on BN scales) or a
    SwdConfig (growing selective decay of currently-targeted filters).
    checkpoint_dir, when given, receives a model + optimizer-state checkpoint
    at the end of every epoch (overwritten in place).
    """
    validate(model)
    input_shape = (config.batch_size,) + dataset.train_images.shape[1:]
    inferred = infer_shapes(model, input_shape)

    partition = None
    if isinstance(regularizer, (SlimmingConfig, SwdConfig)):
        partition = build_dependency_partition(inferred)

    rng = np.random.default_rng(config.seed)
    params = {k: v.copy() for k, v in model.params.items()}
    velocity: dict[str, np.ndarray] = {}
    n_train = dataset.train_images.shape[0]
    if n_train < config.batch_size:
        raise TrainingError(f"batch_size {config.batch_size} exceeds dataset size {n_train}")
    # incomplete trailing batches are dropped: shrunk graphs pin the batch dim
    steps_per_epoch = n_train // config.batch_size
    n_used = steps_per_epoch * config.batch_size
    total_steps = config.epochs * steps_per_epoch
    swd_period = None
    targeted = []
    if isinstance(regularizer, SwdConfig):
        swd_period = regularizer.target_recompute_period or steps_per_epoch

    history: list[dict] = []
    step = 0
    for epoch in range(config.epochs):
        lr = poly_lr(epoch, config.epochs, config.base_lr, config.poly_power)
        order = rng.permutation(n_train)
        losses = []
        a_t = None
        for start in range(0, n_used, config.batch_size):
            idx = order[start:start + config.batch_size]
            images = dataset.train_images[idx]
            labels = dataset.train_labels[idx]
            if config.augment:
                images, labels = augment_batch(images, labels, rng)
            if isinstance(regularizer, SwdConfig) and step % swd_period == 0:
                targeted = _swd_targets(inferred, params, partition, regularizer)
            try:
                loss, grads = forward_backward(model, (images, labels), params=params)
            except TrainingError as e:
                raise TrainingError(str(e), history) from e
            if isinstance(regularizer, SlimmingConfig):
                for g in partition.prunable_groups():
                    _, pen_grad = slimming_penalty(params[g.gamma_param],
                                                   regularizer.penalty, regularizer.beta_smooth)
                    grads[g.gamma_param] = grads[g.gamma_param] + pen_grad
            sgd_step(params, grads, velocity, lr, config.momentum, config.weight_decay)
            if isinstance(regularizer, SwdConfig):
                a_t = swd_coefficient(step, total_steps, regularizer.a_min, regularizer.a_max)
                swd_apply(params, partition, targeted, a_t, config.weight_decay, lr)
            losses.append(loss)
            step += 1
        record = {
            "epoch": epoch,
            "lr": lr,
            "loss": float(np.mean(losses)),
            "miou": evaluate_miou(model, params, dataset.val_images, dataset.val_labels,
                                  dataset.n_classes, batch_size=config.batch_size),
        }
        if a_t is not None:
            record["a_t"] = a_t
        history.append(record)
        if checkpoint_dir is not None:
            save_checkpoint(checkpoint_dir, model_with_params(model, params), velocity, epoch)

    return TrainResult(model_with_params(model, params), history)


def _swd_targets(inferred, params, partition, cfg: SwdConfig):
    current = model_with_params(inferred, params)
    scores = score_channels(current, partition)
    mask = select_mask(scores, partition, cfg.final_rate, cfg.budget_kind, model=current)
    return targeted_channels(mask, partition)
