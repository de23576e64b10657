"""Load and save models in a documented ONNX subset (opset >= 13).

The subset covers exactly the IR's node kinds. Loading rejects anything
else by name. Saving is canonical and bit-stable: nodes in topological
order, initializers sorted by name, all attributes written explicitly,
tensor payloads as little-endian raw data.

A few benign attributes emitted by common exporters are accepted and
dropped on load (BatchNormalization momentum); anything that would change
semantics (training_mode, ceil_mode, non-default coordinate transforms,
grouped conv) is rejected.
"""

from __future__ import annotations

import numpy as np

from . import onnx_wire as wire
from .graph import GraphModel, GraphError, Node, validate

IR_VERSION = 8
MIN_OPSET = 13

_TO_ONNX = {"BatchNorm": "BatchNormalization"}
_FROM_ONNX = {"BatchNormalization": "BatchNorm"}
_PLAIN_OPS = {"Conv", "Relu", "Add", "Concat", "Resize", "MaxPool",
              "ScatterND", "Transpose", "ConstantOfShape", "Softmax", "ArgMax"}


class ParseError(GraphError):
    pass


# ---------------------------------------------------------------- writing

def _attr_int(name, value):
    return wire.field_bytes(5, wire.field_string(1, name)
                            + wire.field_varint(3, int(value))
                            + wire.field_varint(20, wire.AT_INT))


def _attr_ints(name, values):
    body = wire.field_string(1, name)
    for v in values:
        body += wire.field_varint(8, int(v))
    return wire.field_bytes(5, body + wire.field_varint(20, wire.AT_INTS))


def _attr_float(name, value):
    return wire.field_bytes(5, wire.field_string(1, name)
                            + wire.field_float(2, float(value))
                            + wire.field_varint(20, wire.AT_FLOAT))


def _attr_string(name, value):
    return wire.field_bytes(5, wire.field_string(1, name)
                            + wire.field_bytes(4, value.encode("utf-8"))
                            + wire.field_varint(20, wire.AT_STRING))


def _tensor_proto(name: str, arr: np.ndarray) -> bytes:
    body = b""
    for d in arr.shape:
        body += wire.field_varint(1, int(d))
    if arr.dtype == np.float32:
        body += wire.field_varint(2, wire.DT_FLOAT)
        raw = arr.astype("<f4").tobytes()
    elif arr.dtype == np.int64:
        body += wire.field_varint(2, wire.DT_INT64)
        raw = arr.astype("<i8").tobytes()
    else:
        raise ParseError(f"initializer {name!r}: unsupported dtype {arr.dtype}")
    if name:
        body += wire.field_string(8, name)
    body += wire.field_bytes(9, raw)
    return body


def _value_info(name: str, dtype: str, shape) -> bytes:
    dims = b""
    if shape is not None:
        for d in shape:
            dims += wire.field_bytes(1, wire.field_varint(1, int(d)))
    else:
        for sym in ("N", "C", "H", "W"):
            dims += wire.field_bytes(1, wire.field_string(2, sym))
    tensor_type = (wire.field_varint(1, wire.DT_INT64 if dtype == "int64" else wire.DT_FLOAT)
                   + wire.field_bytes(2, dims))
    type_proto = wire.field_bytes(1, tensor_type)
    return wire.field_string(1, name) + wire.field_bytes(2, type_proto)


def _node_attrs(node: Node, model: GraphModel) -> tuple[bytes, list[str]]:
    """Attribute bytes plus the node's ONNX input list (Resize gains a scales input)."""
    a = node.attrs
    inputs = list(node.inputs)
    out = b""
    if node.op == "Conv":
        out += _attr_ints("dilations", (1, 1))
        out += _attr_int("group", a.get("groups", 1))
        out += _attr_ints("kernel_shape", a["kernel"])
        ph, pw = a.get("padding", (0, 0))
        out += _attr_ints("pads", (ph, pw, ph, pw))
        out += _attr_ints("strides", a.get("stride", (1, 1)))
    elif node.op == "BatchNorm":
        out += _attr_float("epsilon", a.get("epsilon", 1e-5))
    elif node.op == "Concat":
        out += _attr_int("axis", a.get("axis", 1))
    elif node.op == "Resize":
        out += _attr_string("coordinate_transformation_mode", "half_pixel")
        out += _attr_string("mode", "linear")
        scales_name = f"{node.id}.scales"
        inputs = [node.inputs[0], "", scales_name]
    elif node.op == "MaxPool":
        out += _attr_ints("kernel_shape", a["kernel"])
        ph, pw = a.get("padding", (0, 0))
        out += _attr_ints("pads", (ph, pw, ph, pw))
        out += _attr_ints("strides", a.get("stride", a["kernel"]))
    elif node.op == "Transpose":
        out += _attr_ints("perm", a["perm"])
    elif node.op == "ConstantOfShape":
        value = np.asarray([a.get("value", 0.0)], dtype=np.float32)
        body = wire.field_string(1, "value") + wire.field_bytes(5, _tensor_proto("", value))
        out += wire.field_bytes(5, body + wire.field_varint(20, wire.AT_TENSOR))
    elif node.op == "Softmax":
        out += _attr_int("axis", a.get("axis", 1))
    elif node.op == "ArgMax":
        out += _attr_int("axis", a.get("axis", 1))
        out += _attr_int("keepdims", a.get("keepdims", 1))
    return out, inputs


def model_to_bytes(model: GraphModel) -> bytes:
    from .graph import topological_order

    validate(model)
    graph = b""
    extra_inits: list[tuple[str, np.ndarray]] = []
    for node in topological_order(model):
        attrs, inputs = _node_attrs(node, model)
        if node.op == "Resize":
            extra_inits.append((inputs[2], np.asarray(node.attrs["scales"], dtype=np.float32)))
        body = b""
        for t in inputs:
            body += wire.field_string(1, t)
        for t in node.outputs:
            body += wire.field_string(2, t)
        body += wire.field_string(3, node.id)
        body += wire.field_string(4, _TO_ONNX.get(node.op, node.op))
        body += attrs
        graph += wire.field_bytes(1, body)
    graph += wire.field_string(2, "netcarve-graph")
    for name in sorted(model.params):
        graph += wire.field_bytes(5, _tensor_proto(name, model.params[name]))
    for name, arr in extra_inits:
        graph += wire.field_bytes(5, _tensor_proto(name, arr))
    for name in model.inputs:
        spec = model.tensors.get(name)
        shape = spec.shape if spec is not None else None
        graph += wire.field_bytes(11, _value_info(name, "float32", shape))
    for name in model.outputs:
        spec = model.tensors.get(name)
        graph += wire.field_bytes(
            12, _value_info(name, spec.dtype if spec else "float32", spec.shape if spec else None)
        )

    out = wire.field_varint(1, IR_VERSION)
    out += wire.field_string(2, "netcarve")
    out += wire.field_string(3, "0.1.0")
    out += wire.field_bytes(7, graph)
    out += wire.field_bytes(8, wire.field_string(1, "") + wire.field_varint(2, model.opset))
    return out


def save_model(model: GraphModel, path) -> None:
    """Serialize to ONNX; re-loadable, bit-stable for the same model."""
    data = model_to_bytes(model)
    with open(path, "wb") as f:
        f.write(data)


# ---------------------------------------------------------------- reading

def _read_tensor(buf: bytes) -> tuple[str, np.ndarray]:
    view = wire.FieldView(buf)
    dims = view.int_list(1)
    dtype = view.varint(2, 0)
    name = view.string(8)
    raw = view.first(9)
    if dtype == wire.DT_FLOAT:
        if raw is not None:
            arr = np.frombuffer(raw, dtype="<f4")
        else:
            arr = np.asarray(view.float_list(4), dtype=np.float32)
        arr = arr.astype(np.float32)
    elif dtype == wire.DT_INT64:
        if raw is not None:
            arr = np.frombuffer(raw, dtype="<i8")
        else:
            arr = np.asarray(view.int_list(7), dtype=np.int64)
        arr = arr.astype(np.int64)
    else:
        raise ParseError(f"initializer {name!r}: unsupported data type {dtype} (only float32/int64)")
    try:
        return name, arr.reshape(dims).copy()
    except ValueError as e:
        raise ParseError(f"initializer {name!r}: payload does not match dims {dims}") from e


def _read_attrs(bufs: list[bytes], node_name: str, op: str) -> dict:
    attrs = {}
    for buf in bufs:
        view = wire.FieldView(buf)
        name = view.string(1)
        atype = view.varint(20, 0)
        if atype == wire.AT_FLOAT:
            attrs[name] = view.float32(2)
        elif atype == wire.AT_INT:
            attrs[name] = view.varint(3)
        elif atype == wire.AT_INTS:
            attrs[name] = tuple(view.int_list(8))
        elif atype == wire.AT_STRING:
            attrs[name] = view.first(4, b"").decode("utf-8")
        elif atype == wire.AT_TENSOR:
            attrs[name] = _read_tensor(view.first(5))[1]
        else:
            raise ParseError(f"node {node_name!r} ({op}): attribute {name!r} has unsupported type {atype}")
    return attrs


def _reject(cond, msg):
    if cond:
        raise ParseError(msg)


def _convert_node(idx, view, params) -> Node:
    op_type = view.string(4)
    name = view.string(3) or f"node{idx}"
    inputs = [b.decode("utf-8") for b in view.all(1)]
    outputs = [b.decode("utf-8") for b in view.all(2)]
    raw_attrs = _read_attrs(view.all(5), name, op_type)
    op = _FROM_ONNX.get(op_type, op_type)
    if op not in _PLAIN_OPS and op != "BatchNorm":
        from .graph import UnsupportedOpError

        raise UnsupportedOpError(f"unsupported op kind {op_type!r} (node {name!r})")

    attrs = {}
    if op == "Conv":
        _reject(raw_attrs.get("auto_pad", "NOTSET") != "NOTSET", f"node {name!r}: auto_pad is unsupported")
        _reject(any(d != 1 for d in raw_attrs.get("dilations", (1, 1))),
                f"node {name!r}: dilated convolution is unsupported")
        group = raw_attrs.get("group", 1)
        _reject(group != 1, f"node {name!r}: unsupported attribute value group={group}")
        pads = raw_attrs.get("pads", (0, 0, 0, 0))
        _reject(len(pads) != 4 or pads[0] != pads[2] or pads[1] != pads[3],
                f"node {name!r}: only symmetric pads are supported, got {pads}")
        attrs = {"stride": tuple(raw_attrs.get("strides", (1, 1))),
                 "padding": (pads[0], pads[1]), "groups": 1}
        if "kernel_shape" in raw_attrs:
            attrs["kernel"] = tuple(raw_attrs["kernel_shape"])
    elif op == "BatchNorm":
        _reject(raw_attrs.get("training_mode", 0) != 0, f"node {name!r}: training-mode BatchNorm is unsupported")
        _reject(raw_attrs.get("spatial", 1) != 1, f"node {name!r}: non-spatial BatchNorm is unsupported")
        attrs = {"epsilon": raw_attrs.get("epsilon", 1e-5)}
    elif op == "Concat":
        attrs = {"axis": raw_attrs.get("axis", 1)}
    elif op == "Resize":
        mode = raw_attrs.get("mode", "nearest")
        _reject(mode != "linear", f"node {name!r}: Resize mode {mode!r} is unsupported")
        ctm = raw_attrs.get("coordinate_transformation_mode", "half_pixel")
        _reject(ctm != "half_pixel", f"node {name!r}: coordinate transform {ctm!r} is unsupported")
        _reject(len(inputs) < 3 or not inputs[2], f"node {name!r}: Resize must carry an explicit scales input")
        _reject(inputs[1] not in ("",) and inputs[1] in params and params[inputs[1]].size > 0,
                f"node {name!r}: Resize roi is unsupported")
        scales = params.pop(inputs[2], None)
        _reject(scales is None, f"node {name!r}: Resize scales initializer {inputs[2]!r} missing")
        _reject(len(inputs) > 3 and inputs[3] != "", f"node {name!r}: Resize sizes input is unsupported")
        attrs = {"scales": tuple(float(s) for s in np.asarray(scales, dtype=np.float32)),
                 "mode": "linear"}
        inputs = [inputs[0]]
    elif op == "MaxPool":
        _reject(raw_attrs.get("auto_pad", "NOTSET") != "NOTSET", f"node {name!r}: auto_pad is unsupported")
        _reject(raw_attrs.get("ceil_mode", 0) != 0, f"node {name!r}: ceil_mode is unsupported")
        _reject(any(d != 1 for d in raw_attrs.get("dilations", (1, 1))),
                f"node {name!r}: dilated pooling is unsupported")
        _reject(raw_attrs.get("storage_order", 0) != 0, f"node {name!r}: storage_order is unsupported")
        pads = raw_attrs.get("pads", (0, 0, 0, 0))
        _reject(len(pads) != 4 or pads[0] != pads[2] or pads[1] != pads[3],
                f"node {name!r}: only symmetric pads are supported, got {pads}")
        kernel = tuple(raw_attrs["kernel_shape"])
        attrs = {"kernel": kernel, "stride": tuple(raw_attrs.get("strides", kernel)),
                 "padding": (pads[0], pads[1])}
        outputs = outputs[:1]  # optional Indices output is never produced here
    elif op == "Transpose":
        attrs = {"perm": tuple(raw_attrs["perm"])}
    elif op == "ConstantOfShape":
        value = raw_attrs.get("value")
        if value is None:
            attrs = {"value": 0.0}
        else:
            _reject(value.dtype != np.float32 or value.size != 1,
                    f"node {name!r}: ConstantOfShape value must be a float32 scalar")
            attrs = {"value": float(value.reshape(-1)[0])}
    elif op == "Softmax":
        axis = raw_attrs.get("axis", -1)
        _reject(axis != 1, f"node {name!r}: Softmax axis must be 1, got {axis}")
        attrs = {"axis": 1}
    elif op == "ArgMax":
        _reject(raw_attrs.get("axis", 0) != 1, f"node {name!r}: ArgMax axis must be 1")
        _reject(raw_attrs.get("select_last_index", 0) != 0, f"node {name!r}: select_last_index is unsupported")
        attrs = {"axis": 1, "keepdims": raw_attrs.get("keepdims", 1)}
    elif op == "ScatterND":
        reduction = raw_attrs.get("reduction", "none")
        _reject(reduction != "none", f"node {name!r}: ScatterND reduction {reduction!r} is unsupported")

    return Node(name, op, inputs, outputs, attrs)


def model_from_bytes(data: bytes) -> GraphModel:
    try:
        top = wire.FieldView(data)
    except wire.WireError as e:
        raise ParseError(f"not a parseable ONNX file: {e}") from e

    opset = None
    for entry in top.all(8):
        v = wire.FieldView(entry)
        if v.string(1) == "":
            opset = v.varint(2)
    if opset is None:
        raise ParseError("model declares no default-domain opset")
    if opset < MIN_OPSET:
        raise ParseError(f"opset {opset} is below the supported minimum {MIN_OPSET}")

    graph_buf = top.first(7)
    if graph_buf is None:
        raise ParseError("model has no graph")
    graph = wire.FieldView(graph_buf)

    params: dict[str, np.ndarray] = {}
    for buf in graph.all(5):
        name, arr = _read_tensor(buf)
        params[name] = arr

    input_shapes: dict[str, tuple[int, ...]] = {}

    def io_names(field):
        names = []
        for buf in graph.all(field):
            v = wire.FieldView(buf)
            vi_name = v.string(1)
            type_buf = v.first(2)
            if type_buf is not None and field == 11 and vi_name not in params:
                tt = wire.FieldView(type_buf).first(1)
                if tt is not None:
                    tensor_type = wire.FieldView(tt)
                    elem = tensor_type.varint(1, wire.DT_FLOAT)
                    if elem != wire.DT_FLOAT:
                        raise ParseError(f"graph input {vi_name!r} is not float32")
                    shape_buf = tensor_type.first(2)
                    if shape_buf is not None:
                        dims = []
                        for dim_buf in wire.FieldView(shape_buf).all(1):
                            dims.append(wire.FieldView(dim_buf).varint(1, 0))
                        if dims and all(d > 0 for d in dims):
                            input_shapes[vi_name] = tuple(dims)
            names.append(vi_name)
        return names

    inputs = [n for n in io_names(11) if n not in params]
    outputs = io_names(12)

    nodes = []
    for idx, buf in enumerate(graph.all(1)):
        try:
            view = wire.FieldView(buf)
        except wire.WireError as e:
            raise ParseError(f"malformed node #{idx}: {e}") from e
        nodes.append(_convert_node(idx, view, params))

    model = GraphModel(nodes=nodes, inputs=inputs, outputs=outputs, params=params, opset=int(opset))
    validate(model)
    from .graph import TensorSpec

    for name, shape in input_shapes.items():
        model.tensors[name] = TensorSpec(name, "float32", shape, "graph-input")
    return model


def load_model(path) -> GraphModel:
    """Read and validate a model in the documented ONNX subset."""
    with open(path, "rb") as f:
        data = f.read()
    try:
        return model_from_bytes(data)
    except wire.WireError as e:
        raise ParseError(f"not a parseable ONNX file: {e}") from e
