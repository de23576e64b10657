"""Graph IR for convolutional networks: typed nodes, parameter store, validation,
shape inference, and a debug JSON dump.

Models are treated as immutable values once validated; every transformation
returns a new model. Layout is NCHW, activations are float32, and the channel
axis is always axis 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

OP_KINDS = (
    "Conv",
    "BatchNorm",
    "Relu",
    "Add",
    "Concat",
    "Resize",
    "MaxPool",
    "ScatterND",
    "Transpose",
    "ConstantOfShape",
    "Softmax",
    "ArgMax",
)

TENSOR_KINDS = ("graph-input", "graph-output", "intermediate", "parameter")

# Attribute keys accepted per op kind. Anything else is rejected at validation.
_ATTR_SCHEMA = {
    "Conv": {"kernel", "stride", "padding", "groups"},
    "BatchNorm": {"epsilon"},
    "Relu": set(),
    "Add": set(),
    "Concat": {"axis"},
    "Resize": {"scales", "mode"},
    "MaxPool": {"kernel", "stride", "padding"},
    "ScatterND": set(),
    "Transpose": {"perm"},
    "ConstantOfShape": {"value"},
    "Softmax": {"axis"},
    "ArgMax": {"axis", "keepdims"},
}


class GraphError(Exception):
    """Base error for IR construction, validation and inference problems."""


class ValidationError(GraphError):
    pass


class UnsupportedOpError(ValidationError):
    pass


class ShapeError(GraphError):
    """Raised when shape inference hits inconsistent dimensions; carries node id."""

    def __init__(self, message, node_id=None):
        super().__init__(message if node_id is None else f"{message} (node {node_id})")
        self.node_id = node_id


def _f32(x: float) -> float:
    # Float attributes are stored at float32 precision so that save/load
    # round-trips are exact (ONNX attribute floats are 32-bit).
    return float(np.float32(x))


@dataclass(frozen=True)
class TensorSpec:
    name: str
    dtype: str = "float32"
    shape: tuple[int, ...] | None = None
    kind: str = "intermediate"


@dataclass
class Node:
    id: str
    op: str
    inputs: list[str]
    outputs: list[str]
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        for key in ("epsilon", "value"):
            if key in self.attrs:
                self.attrs[key] = _f32(self.attrs[key])
        if "scales" in self.attrs:
            self.attrs["scales"] = tuple(_f32(s) for s in self.attrs["scales"])
        for key in ("kernel", "stride", "padding", "perm"):
            if key in self.attrs:
                self.attrs[key] = tuple(int(v) for v in self.attrs[key])


@dataclass
class GraphModel:
    """Directed acyclic graph of typed nodes plus a dense parameter store."""

    nodes: list[Node]
    inputs: list[str]
    outputs: list[str]
    params: dict[str, np.ndarray]
    tensors: dict[str, TensorSpec] = field(default_factory=dict)
    opset: int = 13

    def param(self, name: str) -> np.ndarray:
        return self.params[name]

    def node_by_output(self, tensor: str) -> Node | None:
        for node in self.nodes:
            if tensor in node.outputs:
                return node
        return None

    def consumers(self, tensor: str) -> list[Node]:
        return [n for n in self.nodes if tensor in n.inputs]

    def copy(self) -> "GraphModel":
        return GraphModel(
            nodes=[Node(n.id, n.op, list(n.inputs), list(n.outputs), dict(n.attrs)) for n in self.nodes],
            inputs=list(self.inputs),
            outputs=list(self.outputs),
            params={k: v.copy() for k, v in self.params.items()},
            tensors=dict(self.tensors),
            opset=self.opset,
        )


def topological_order(model: GraphModel) -> list[Node]:
    """Kahn topological sort over tensor dependencies; raises on cycles."""
    available = set(model.inputs) | set(model.params)
    pending = list(model.nodes)
    order = []
    while pending:
        progressed = False
        remaining = []
        for node in pending:
            if all(t in available for t in node.inputs):
                order.append(node)
                available.update(node.outputs)
                progressed = True
            else:
                remaining.append(node)
        if not progressed:
            bad = ", ".join(n.id for n in remaining)
            raise ValidationError(f"graph is cyclic or has unresolvable inputs: {bad}")
        pending = remaining
    return order


def _canonicalize_attrs(model, node):
    """Fill default attributes in place so equality and round-trips are stable."""
    a = node.attrs
    if node.op == "Conv":
        w = model.params.get(node.inputs[1]) if len(node.inputs) >= 2 else None
        if "kernel" not in a and w is not None and w.ndim == 4:
            a["kernel"] = (int(w.shape[2]), int(w.shape[3]))
        a.setdefault("stride", (1, 1))
        a.setdefault("padding", (0, 0))
        a.setdefault("groups", 1)
    elif node.op == "BatchNorm":
        a.setdefault("epsilon", _f32(1e-5))
    elif node.op == "Concat":
        a.setdefault("axis", 1)
    elif node.op == "Resize":
        a.setdefault("mode", "linear")
    elif node.op == "MaxPool":
        if "kernel" in a:
            a.setdefault("stride", a["kernel"])
        a.setdefault("padding", (0, 0))
    elif node.op == "ConstantOfShape":
        a.setdefault("value", _f32(0.0))
    elif node.op == "Softmax":
        a.setdefault("axis", 1)
    elif node.op == "ArgMax":
        a.setdefault("axis", 1)
        a.setdefault("keepdims", 1)


def _check_conv(model, node):
    attrs = node.attrs
    if attrs.get("groups", 1) != 1:
        raise UnsupportedOpError(f"node {node.id}: grouped convolution (groups={attrs['groups']}) is not supported")
    if len(node.inputs) not in (2, 3):
        raise ValidationError(f"node {node.id}: Conv takes X, W and optional bias")
    w = model.params.get(node.inputs[1])
    if w is None:
        raise ValidationError(f"node {node.id}: missing weight parameter {node.inputs[1]!r}")
    if w.ndim != 4:
        raise ValidationError(f"node {node.id}: Conv weight must be 4-D, got {w.shape}")
    kh, kw = attrs.get("kernel", w.shape[2:])
    if (kh, kw) != w.shape[2:]:
        raise ValidationError(f"node {node.id}: kernel attribute {attrs['kernel']} does not match weight {w.shape}")
    if len(node.inputs) == 3:
        b = model.params.get(node.inputs[2])
        if b is None or b.shape != (w.shape[0],):
            raise ValidationError(f"node {node.id}: Conv bias must have shape ({w.shape[0]},)")


def _check_batchnorm(model, node):
    if node.attrs.get("epsilon", 1e-5) <= 0:
        raise ValidationError(f"node {node.id}: BatchNorm epsilon must be > 0")
    if len(node.inputs) != 5:
        raise ValidationError(f"node {node.id}: BatchNorm takes X, gamma, beta, mean, var")
    shapes = []
    for name in node.inputs[1:]:
        p = model.params.get(name)
        if p is None:
            raise ValidationError(f"node {node.id}: missing BatchNorm parameter {name!r}")
        if p.ndim != 1:
            raise ValidationError(f"node {node.id}: BatchNorm parameter {name!r} must be 1-D")
        shapes.append(p.shape)
    if len(set(shapes)) != 1:
        raise ValidationError(f"node {node.id}: BatchNorm parameter shapes disagree: {shapes}")
    var = model.params[node.inputs[4]]
    if not np.all(var > 0):
        raise ValidationError(f"node {node.id}: BatchNorm running variance must be strictly positive")
    producer = model.node_by_output(node.inputs[0])
    if producer is None or producer.op != "Conv":
        raise ValidationError(
            f"node {node.id}: BatchNorm input must be produced by a Conv node in this subset"
        )


def validate(model: GraphModel) -> GraphModel:
    """Check the model against the documented subset.

    Returns the model (with tensor specs for parameters refreshed) on success;
    raises ValidationError / UnsupportedOpError otherwise.
    """
    names = [t for n in model.nodes for t in n.outputs]
    seen = set(model.inputs) | set(model.params)
    for name in model.inputs:
        if name in model.params:
            raise ValidationError(f"graph input {name!r} collides with a parameter")
    for t in names:
        if t in seen:
            raise ValidationError(f"tensor name {t!r} produced more than once or shadows an input")
        seen.add(t)
    for out in model.outputs:
        if out not in seen:
            raise ValidationError(f"graph output {out!r} is never produced")

    for node in model.nodes:
        if node.op not in OP_KINDS:
            raise UnsupportedOpError(f"unsupported op kind {node.op!r} (node {node.id})")
        extra = set(node.attrs) - _ATTR_SCHEMA[node.op]
        if extra:
            raise UnsupportedOpError(f"node {node.id}: unsupported attributes {sorted(extra)} for {node.op}")
        _canonicalize_attrs(model, node)
        for t in node.inputs:
            if t not in seen:
                raise ValidationError(f"node {node.id}: input {t!r} is not produced by any node")
        # parameters may only appear in the dedicated weight/constant slots
        if node.op in ("Conv", "BatchNorm"):
            activation_slots = node.inputs[:1]
        elif node.op == "ScatterND":
            activation_slots = [node.inputs[0], node.inputs[2]]
        elif node.op == "ConstantOfShape":
            activation_slots = []
        else:
            activation_slots = node.inputs
        for t in activation_slots:
            if t in model.params:
                raise ValidationError(f"node {node.id}: parameter {t!r} used as an activation input")
        if node.op == "Conv":
            _check_conv(model, node)
        elif node.op == "BatchNorm":
            _check_batchnorm(model, node)
        elif node.op == "Concat":
            if node.attrs.get("axis", 1) != 1:
                raise UnsupportedOpError(f"node {node.id}: Concat axis must be 1")
        elif node.op == "Resize":
            if node.attrs.get("mode", "linear") != "linear":
                raise UnsupportedOpError(f"node {node.id}: Resize mode must be 'linear'")
            scales = node.attrs.get("scales")
            if scales is None or len(scales) != 4 or scales[0] != 1.0 or scales[1] != 1.0:
                raise ValidationError(f"node {node.id}: Resize scales must be (1, 1, sh, sw)")
        elif node.op == "MaxPool":
            if "kernel" not in node.attrs:
                raise ValidationError(f"node {node.id}: MaxPool needs a kernel attribute")
        elif node.op == "Softmax":
            if node.attrs.get("axis", 1) != 1:
                raise UnsupportedOpError(f"node {node.id}: Softmax axis must be 1")
        elif node.op == "ArgMax":
            if node.attrs.get("axis", 1) != 1 or node.attrs.get("keepdims", 1) != 1:
                raise UnsupportedOpError(f"node {node.id}: ArgMax must use axis=1, keepdims=1")
        elif node.op == "Transpose":
            perm = node.attrs.get("perm")
            if perm is None or sorted(perm) != list(range(len(perm))):
                raise ValidationError(f"node {node.id}: Transpose perm must be a permutation")
        elif node.op == "ScatterND":
            if len(node.inputs) != 3:
                raise ValidationError(f"node {node.id}: ScatterND takes data, indices, updates")
            idx = model.params.get(node.inputs[1])
            if idx is None or idx.dtype != np.int64:
                raise ValidationError(f"node {node.id}: ScatterND indices must be an int64 constant")
        elif node.op == "ConstantOfShape":
            shape = model.params.get(node.inputs[0])
            if shape is None or shape.dtype != np.int64 or shape.ndim != 1:
                raise ValidationError(f"node {node.id}: ConstantOfShape input must be a 1-D int64 constant")

    for name, arr in model.params.items():
        if arr.dtype not in (np.float32, np.int64):
            raise UnsupportedOpError(f"parameter {name!r} has unsupported dtype {arr.dtype}; only float32/int64")

    topological_order(model)  # raises on cycles

    for name, arr in model.params.items():
        model.tensors[name] = TensorSpec(
            name, "int64" if arr.dtype == np.int64 else "float32", tuple(arr.shape), "parameter"
        )
    return model


def _conv_spatial(in_dim, k, pad, stride):
    out = (in_dim + 2 * pad - k) // stride + 1
    if out <= 0:
        return None
    return out


def infer_shapes(model: GraphModel, input_shape: tuple[int, ...]) -> GraphModel:
    """Fill every tensor spec with a concrete shape for the given graph input shape.

    Returns a new model; the input model is untouched. input_shape applies to
    every graph input (v1 graphs have a single input).
    """
    if len(input_shape) != 4:
        raise ShapeError(f"input shape must be rank 4, got {input_shape}")
    out = model.copy()
    shapes: dict[str, tuple[int, ...]] = {}
    dtypes: dict[str, str] = {}
    for name in out.inputs:
        shapes[name] = tuple(int(d) for d in input_shape)
        dtypes[name] = "float32"
    for name, arr in out.params.items():
        shapes[name] = tuple(arr.shape)

    for node in topological_order(out):
        x = shapes[node.inputs[0]]
        if node.op == "Conv":
            w = out.params[node.inputs[1]]
            kh, kw = w.shape[2], w.shape[3]
            sh, sw = node.attrs.get("stride", (1, 1))
            ph, pw = node.attrs.get("padding", (0, 0))
            if x[1] != w.shape[1]:
                raise ShapeError(f"Conv input has {x[1]} channels but weight expects {w.shape[1]}", node.id)
            h = _conv_spatial(x[2], kh, ph, sh)
            wdim = _conv_spatial(x[3], kw, pw, sw)
            if h is None or wdim is None:
                raise ShapeError(f"Conv output would be empty for input {x}", node.id)
            shape = (x[0], w.shape[0], h, wdim)
        elif node.op in ("BatchNorm", "Relu", "Softmax"):
            if node.op == "BatchNorm" and out.params[node.inputs[1]].shape[0] != x[1]:
                raise ShapeError(
                    f"BatchNorm parameters sized {out.params[node.inputs[1]].shape[0]} "
                    f"but input has {x[1]} channels",
                    node.id,
                )
            shape = x
        elif node.op == "Add":
            y = shapes[node.inputs[1]]
            if x != y:
                raise ShapeError(f"Add inputs differ: {x} vs {y}", node.id)
            shape = x
        elif node.op == "Concat":
            chans = 0
            for t in node.inputs:
                s = shapes[t]
                if (s[0], s[2], s[3]) != (x[0], x[2], x[3]):
                    raise ShapeError(f"Concat inputs disagree outside the channel axis: {x} vs {s}", node.id)
                chans += s[1]
            shape = (x[0], chans, x[2], x[3])
        elif node.op == "Resize":
            _, _, sh, sw = node.attrs["scales"]
            shape = (x[0], x[1], int(np.floor(x[2] * sh)), int(np.floor(x[3] * sw)))
        elif node.op == "MaxPool":
            kh, kw = node.attrs["kernel"]
            sh, sw = node.attrs.get("stride", (kh, kw))
            ph, pw = node.attrs.get("padding", (0, 0))
            h = _conv_spatial(x[2], kh, ph, sh)
            wdim = _conv_spatial(x[3], kw, pw, sw)
            if h is None or wdim is None:
                raise ShapeError(f"MaxPool output would be empty for input {x}", node.id)
            shape = (x[0], x[1], h, wdim)
        elif node.op == "ScatterND":
            shape = shapes[node.inputs[0]]
            updates = shapes[node.inputs[2]]
            n_idx = out.params[node.inputs[1]].shape[0]
            if updates != (n_idx,) + tuple(shape[1:]):
                raise ShapeError(
                    f"ScatterND updates {updates} incompatible with data {shape} "
                    f"and {n_idx} indices",
                    node.id,
                )
        elif node.op == "Transpose":
            perm = node.attrs["perm"]
            if len(perm) != len(x):
                raise ShapeError(f"Transpose perm rank {len(perm)} vs input rank {len(x)}", node.id)
            shape = tuple(x[p] for p in perm)
        elif node.op == "ConstantOfShape":
            shape = tuple(int(v) for v in out.params[node.inputs[0]])
        elif node.op == "ArgMax":
            shape = (x[0], 1, x[2], x[3])
        else:  # pragma: no cover - op set is closed
            raise UnsupportedOpError(f"no shape rule for {node.op}")
        for t in node.outputs:
            shapes[t] = shape
            dtypes[t] = "int64" if node.op == "ArgMax" else "float32"

    specs: dict[str, TensorSpec] = {}
    for name, shape in shapes.items():
        if name in out.params:
            kind = "parameter"
            dtype = "int64" if out.params[name].dtype == np.int64 else "float32"
        elif name in out.outputs:
            kind, dtype = "graph-output", dtypes[name]
        elif name in out.inputs:
            kind, dtype = "graph-input", dtypes[name]
        else:
            kind, dtype = "intermediate", dtypes[name]
        if any(d <= 0 for d in shape):
            raise ShapeError(f"tensor {name!r} has a non-positive dim: {shape}")
        specs[name] = TensorSpec(name, dtype, shape, kind)
    out.tensors = specs
    return out


def structural_equal(a: GraphModel, b: GraphModel) -> bool:
    """Equality up to node ids: topology, attributes, and parameter bytes."""
    if list(a.inputs) != list(b.inputs) or list(a.outputs) != list(b.outputs):
        return False
    if a.opset != b.opset:
        return False

    def signature(model):
        return sorted(
            (n.op, tuple(n.inputs), tuple(n.outputs), tuple(sorted(n.attrs.items())))
            for n in model.nodes
        )

    if signature(a) != signature(b):
        return False
    if set(a.params) != set(b.params):
        return False
    for name in a.params:
        pa, pb = a.params[name], b.params[name]
        if pa.dtype != pb.dtype or pa.shape != pb.shape or pa.tobytes() != pb.tobytes():
            return False
    return True


def to_debug_json(model: GraphModel, include_values: bool = False, partition=None) -> str:
    """Human-readable JSON dump of nodes, shapes and parameter shapes.

    Pass a DependencyPartition to append the group table, membership and
    reconciliation records.
    """
    doc = {
        "format_version": 1,
        "opset": model.opset,
        "inputs": list(model.inputs),
        "outputs": list(model.outputs),
        "nodes": [
            {
                "id": n.id,
                "op": n.op,
                "inputs": list(n.inputs),
                "outputs": list(n.outputs),
                "attrs": {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(n.attrs.items())},
            }
            for n in model.nodes
        ],
        "tensors": {
            name: {"dtype": s.dtype, "shape": list(s.shape) if s.shape else None, "kind": s.kind}
            for name, s in sorted(model.tensors.items())
            if s.kind != "parameter"
        },
        "parameters": {
            name: (
                {"dtype": str(arr.dtype), "shape": list(arr.shape), "values": arr.tolist()}
                if include_values
                else {"dtype": str(arr.dtype), "shape": list(arr.shape)}
            )
            for name, arr in sorted(model.params.items())
        },
    }
    if partition is not None:
        from .dependency import partition_debug_dict

        doc["partition"] = partition_debug_dict(partition)
    return json.dumps(doc, indent=2)


def shape_of(model: GraphModel, tensor: str) -> tuple[int, ...]:
    spec = model.tensors.get(tensor)
    if spec is None or spec.shape is None:
        raise ShapeError(f"tensor {tensor!r} has no inferred shape; run infer_shapes first")
    return spec.shape
