"""Parameter and MAC accounting.

The headline parameter count covers learnable weights only: Conv weights and
biases plus BatchNorm scale/shift. BN running statistics and the int64
bookkeeping constants introduced by scatter reconciliation are tallied
separately. MACs count convolutions only; reconciliation operators are free
by convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .graph import GraphModel, infer_shapes, shape_of


@dataclass
class CostReport:
    params: int
    macs: int | None = None
    param_breakdown: dict[str, int] = field(default_factory=dict)
    mac_breakdown: dict[str, int] = field(default_factory=dict)
    running_stat_params: int = 0
    bookkeeping_params: int = 0
    param_fraction: float | None = None
    mac_fraction: float | None = None


def count_params(model: GraphModel) -> CostReport:
    """Headline learnable parameter count plus per-node breakdown."""
    breakdown: dict[str, int] = {}
    running = 0
    bookkeeping = 0
    counted: set[str] = set()
    for node in model.nodes:
        total = 0
        if node.op == "Conv":
            total += model.params[node.inputs[1]].size
            if len(node.inputs) == 3:
                total += model.params[node.inputs[2]].size
            counted.update(node.inputs[1:])
        elif node.op == "BatchNorm":
            gamma, beta, mean, var = node.inputs[1:]
            total += model.params[gamma].size + model.params[beta].size
            running += model.params[mean].size + model.params[var].size
            counted.update(node.inputs[1:])
        elif node.op in ("ScatterND", "ConstantOfShape"):
            name = node.inputs[1] if node.op == "ScatterND" else node.inputs[0]
            if name in model.params:
                bookkeeping += model.params[name].size
                counted.add(name)
        if total:
            breakdown[node.id] = total
    # Stray parameters not referenced by any node are bookkeeping by definition.
    for name, arr in model.params.items():
        if name not in counted:
            bookkeeping += arr.size
    return CostReport(
        params=sum(breakdown.values()),
        param_breakdown=breakdown,
        running_stat_params=running,
        bookkeeping_params=bookkeeping,
    )


def count_macs(model: GraphModel, input_shape: tuple[int, ...]) -> CostReport:
    """Convolution multiply-accumulates for the given input shape; other ops are 0."""
    inferred = infer_shapes(model, input_shape)
    breakdown: dict[str, int] = {}
    for node in inferred.nodes:
        if node.op != "Conv":
            continue
        w = inferred.params[node.inputs[1]]
        cout, cin, kh, kw = w.shape
        n, _, hout, wout = shape_of(inferred, node.outputs[0])
        breakdown[node.id] = n * cout * hout * wout * cin * kh * kw
    report = count_params(model)
    report.macs = sum(breakdown.values())
    report.mac_breakdown = breakdown
    return report


def cost_report(model: GraphModel, input_shape: tuple[int, ...],
                baseline: GraphModel | None = None) -> CostReport:
    """Full cost report, with fraction-of-baseline fields when a baseline is given."""
    report = count_macs(model, input_shape)
    if baseline is not None:
        base = count_macs(baseline, input_shape)
        report.param_fraction = report.params / base.params if base.params else None
        report.mac_fraction = report.macs / base.macs if base.macs else None
    return report
