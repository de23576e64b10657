"""Small helper for constructing IR graphs programmatically."""

from __future__ import annotations

import numpy as np

from .graph import GraphModel, Node


class GraphBuilder:
    """Accumulates nodes/parameters and hands back a GraphModel.

    Conv weights are He-initialized from the builder's rng; BatchNorm can be
    either neutral (gamma=1, stats 0/1) for training from scratch, or
    randomized to exercise eval-mode arithmetic in generated test graphs.
    """

    def __init__(self, input_name="input", rng=None, random_bn=False):
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.random_bn = random_bn
        self.nodes: list[Node] = []
        self.params: dict[str, np.ndarray] = {}
        self.input_name = input_name

    def conv(self, x, cin, cout, name, k=3, stride=1, bias=False, pad=None):
        if pad is None:
            pad = k // 2
        std = float(np.sqrt(2.0 / (cin * k * k)))
        self.params[f"{name}.w"] = (self.rng.standard_normal((cout, cin, k, k)) * std).astype(np.float32)
        inputs = [x, f"{name}.w"]
        if bias:
            self.params[f"{name}.b"] = np.zeros(cout, dtype=np.float32)
            inputs.append(f"{name}.b")
        out = f"{name}.out"
        self.nodes.append(Node(name, "Conv", inputs, [out],
                               {"kernel": (k, k), "stride": (stride, stride),
                                "padding": (pad, pad), "groups": 1}))
        return out

    def bn(self, x, c, name):
        if self.random_bn:
            gamma = self.rng.uniform(0.2, 1.5, c)
            beta = self.rng.standard_normal(c) * 0.2
            mean = self.rng.standard_normal(c) * 0.2
            var = self.rng.uniform(0.5, 2.0, c)
        else:
            gamma, beta = np.ones(c), np.zeros(c)
            mean, var = np.zeros(c), np.ones(c)
        for suffix, val in (("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)):
            self.params[f"{name}.{suffix}"] = np.asarray(val, dtype=np.float32)
        out = f"{name}.out"
        self.nodes.append(Node(name, "BatchNorm",
                               [x] + [f"{name}.{s}" for s in ("gamma", "beta", "mean", "var")],
                               [out], {"epsilon": 1e-5}))
        return out

    def conv_bn(self, x, cin, cout, name, k=3, stride=1, relu=True):
        t = self.conv(x, cin, cout, f"{name}.conv", k=k, stride=stride)
        t = self.bn(t, cout, f"{name}.bn")
        if relu:
            t = self.relu(t, f"{name}.relu")
        return t

    def relu(self, x, name):
        out = f"{name}.out"
        self.nodes.append(Node(name, "Relu", [x], [out]))
        return out

    def add(self, a, b, name):
        out = f"{name}.out"
        self.nodes.append(Node(name, "Add", [a, b], [out]))
        return out

    def concat(self, xs, name):
        out = f"{name}.out"
        self.nodes.append(Node(name, "Concat", list(xs), [out], {"axis": 1}))
        return out

    def resize(self, x, scale, name):
        out = f"{name}.out"
        self.nodes.append(Node(name, "Resize", [x], [out],
                               {"scales": (1.0, 1.0, float(scale), float(scale)), "mode": "linear"}))
        return out

    def maxpool(self, x, name, k=2, stride=2):
        out = f"{name}.out"
        self.nodes.append(Node(name, "MaxPool", [x], [out],
                               {"kernel": (k, k), "stride": (stride, stride), "padding": (0, 0)}))
        return out

    def softmax(self, x, name):
        out = f"{name}.out"
        self.nodes.append(Node(name, "Softmax", [x], [out], {"axis": 1}))
        return out

    def argmax(self, x, name):
        out = f"{name}.out"
        self.nodes.append(Node(name, "ArgMax", [x], [out], {"axis": 1, "keepdims": 1}))
        return out

    def finish(self, outputs, opset=13) -> GraphModel:
        outs = [outputs] if isinstance(outputs, str) else list(outputs)
        return GraphModel(nodes=self.nodes, inputs=[self.input_name], outputs=outs,
                          params=self.params, opset=opset)
