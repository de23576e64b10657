"""Physically apply a prune mask: slice filters and BN parameters, reconcile
differently-pruned Add branches by scattering survivors into a shared zero
tensor, and emit a smaller graph functionally equal to the masked original.

The reference channel space of an Add is the union of its inputs' survivor
sets (ordered by original index), not the original full dimension: excluded
channels are zero in every branch, so dropping them preserves the function
while keeping scatter targets as small as possible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cost import count_params
from .dependency import DependencyPartition
from .executor import execute
from .graph import GraphModel, GraphError, Node, infer_shapes, shape_of, validate


class ShrinkError(GraphError):
    pass


@dataclass
class BranchAction:
    tensor: str
    group_id: str
    survivors: tuple[int, ...]
    action: str  # "passthrough" | "scatter"
    scatter_indices: tuple[int, ...] = ()  # positions of survivors within m_out


@dataclass
class AddReconciliation:
    node_id: str
    m_out: tuple[int, ...]
    branches: list[BranchAction]


@dataclass
class ReconciliationPlan:
    survivors: dict[str, tuple[int, ...]]  # group id -> kept original indices
    adds: dict[str, AddReconciliation] = field(default_factory=dict)


@dataclass
class ShrinkReport:
    params_before: int
    params_after: int
    kept_per_group: dict[str, int]
    scatter_nodes: int
    max_rel_err: float | None = None


def compute_survivors(partition: DependencyPartition, mask) -> dict[str, tuple[int, ...]]:
    """Propagate kept-channel sets through the partition in topological order."""
    for gid in mask.keep:
        g = partition.groups.get(gid)
        if g is None:
            raise ShrinkError(f"mask references unknown group {gid!r}")
        if g.kind != "prunable":
            raise ShrinkError(f"mask names {g.kind} group {gid!r}; only prunable groups can be masked")

    add_inputs = {r.output_group: r.input_groups for r in partition.adds}
    concat_inputs = {r.output_group: (r.input_groups, r.offsets) for r in partition.concats}
    surv: dict[str, tuple[int, ...]] = {}
    for gid, g in partition.groups.items():  # insertion order is topological
        if g.kind == "prunable":
            kept = mask.keep.get(gid, tuple(range(g.channels)))
            kept = tuple(int(c) for c in kept)
            if len(kept) == 0:
                raise ShrinkError(f"group {gid}: mask keeps no channels")
            if list(kept) != sorted(set(kept)) or kept[0] < 0 or kept[-1] >= g.channels:
                raise ShrinkError(f"group {gid}: kept indices must be strictly increasing in [0, {g.channels})")
            surv[gid] = kept
        elif g.kind == "frozen":
            surv[gid] = tuple(range(g.channels))
        elif g.origin == "add":
            if g.pinned_full:
                surv[gid] = tuple(range(g.channels))
            else:
                union = set()
                for in_gid in add_inputs[gid]:
                    union.update(surv[in_gid])
                surv[gid] = tuple(sorted(union))
        else:  # concat
            in_gids, offsets = concat_inputs[gid]
            out = []
            for in_gid, off in zip(in_gids, offsets):
                out.extend(off + c for c in surv[in_gid])
            surv[gid] = tuple(out)
    return surv


def plan_reconciliation(partition: DependencyPartition, mask) -> ReconciliationPlan:
    """Decide, per Add input, whether a scatter is needed and with which indices."""
    surv = compute_survivors(partition, mask)
    plan = ReconciliationPlan(survivors=surv)
    for record in partition.adds:
        m_out = surv[record.output_group]
        position = {c: i for i, c in enumerate(m_out)}
        branches = []
        for in_gid in record.input_groups:
            s = surv[in_gid]
            if s == m_out:
                branches.append(BranchAction("", in_gid, s, "passthrough"))
            else:
                branches.append(
                    BranchAction("", in_gid, s, "scatter", tuple(position[c] for c in s))
                )
        plan.adds[record.node_id] = AddReconciliation(record.node_id, m_out, branches)
    return plan


def _conv_slices(model, partition, surv, node):
    out_keep = surv[partition.tensor_group[node.outputs[0]]]
    in_keep = surv[partition.tensor_group[node.inputs[0]]]
    return np.asarray(out_keep), np.asarray(in_keep)


def shrink(model: GraphModel, partition: DependencyPartition, mask) -> tuple[GraphModel, ShrinkReport]:
    """Produce the physically smaller graph plus an accounting report.

    The model must be validated and shape-inferred. Scatter reconciliation is
    emitted as Transpose -> ScatterND(zeros, indices, updates) -> Transpose in
    channel-leading layout, only where a branch's survivor set differs from
    the Add's reference space.
    """
    plan = plan_reconciliation(partition, mask)
    surv = plan.survivors
    nodes: list[Node] = []
    params: dict[str, np.ndarray] = {
        name: arr.copy() for name, arr in model.params.items()
    }
    scatter_count = 0

    for node in model.nodes:
        if node.op == "Conv":
            out_keep, in_keep = _conv_slices(model, partition, surv, node)
            w = model.params[node.inputs[1]]
            params[node.inputs[1]] = np.ascontiguousarray(w[np.ix_(out_keep, in_keep)])
            if len(node.inputs) == 3:
                params[node.inputs[2]] = model.params[node.inputs[2]][out_keep].copy()
            nodes.append(Node(node.id, node.op, list(node.inputs), list(node.outputs), dict(node.attrs)))
        elif node.op == "BatchNorm":
            keep = np.asarray(surv[partition.tensor_group[node.inputs[0]]])
            for pname in node.inputs[1:]:
                params[pname] = model.params[pname][keep].copy()
            nodes.append(Node(node.id, node.op, list(node.inputs), list(node.outputs), dict(node.attrs)))
        elif node.op == "Add":
            rec = plan.adds[node.id]
            n, _, h, w_dim = shape_of(model, node.outputs[0])
            new_inputs = []
            for i, (tensor, branch) in enumerate(zip(node.inputs, rec.branches)):
                if branch.action == "passthrough":
                    new_inputs.append(tensor)
                    continue
                scatter_count += 1
                base = f"{node.id}.b{i}"
                chw, scat, recon = f"{base}.chw", f"{base}.scat", f"{base}.recon"
                zeros = f"{base}.zeros"
                params[f"{base}.zeros_shape"] = np.asarray(
                    [len(rec.m_out), n, h, w_dim], dtype=np.int64
                )
                params[f"{base}.idx"] = np.asarray(
                    branch.scatter_indices, dtype=np.int64
                ).reshape(-1, 1)
                nodes.append(Node(f"{base}.to_chw", "Transpose", [tensor], [chw], {"perm": (1, 0, 2, 3)}))
                nodes.append(Node(f"{base}.fill", "ConstantOfShape", [f"{base}.zeros_shape"], [zeros],
                                  {"value": 0.0}))
                nodes.append(Node(f"{base}.scatter", "ScatterND", [zeros, f"{base}.idx", chw], [scat]))
                nodes.append(Node(f"{base}.to_nchw", "Transpose", [scat], [recon], {"perm": (1, 0, 2, 3)}))
                new_inputs.append(recon)
            nodes.append(Node(node.id, "Add", new_inputs, list(node.outputs), dict(node.attrs)))
        else:
            nodes.append(Node(node.id, node.op, list(node.inputs), list(node.outputs), dict(node.attrs)))

    shrunk = GraphModel(
        nodes=nodes,
        inputs=list(model.inputs),
        outputs=list(model.outputs),
        params=params,
        opset=model.opset,
    )
    validate(shrunk)
    shrunk = infer_shapes(shrunk, shape_of(model, model.inputs[0]))

    report = ShrinkReport(
        params_before=count_params(model).params,
        params_after=count_params(shrunk).params,
        kept_per_group={gid: len(s) for gid, s in surv.items()},
        scatter_nodes=scatter_count,
    )
    return shrunk, report


def masked_oracle(model: GraphModel, partition: DependencyPartition, mask) -> GraphModel:
    """Original topology with pruned channels multiplied by zero.

    The multiplier sits immediately after each prunable group's BatchNorm,
    which inside this op subset is realized exactly by zeroing the BN scale
    and shift entries of the pruned channels.
    """
    surv = compute_survivors(partition, mask)
    oracle = model.copy()
    for g in partition.prunable_groups():
        kept = set(surv[g.id])
        dead = np.asarray([c for c in range(g.channels) if c not in kept], dtype=np.int64)
        if dead.size == 0:
            continue
        oracle.params[g.gamma_param][dead] = 0.0
        oracle.params[g.beta_param][dead] = 0.0
    return oracle


def expand_to_original(
    original: GraphModel,
    partition: DependencyPartition,
    mask,
    shrunk: GraphModel,
) -> GraphModel:
    """Write a shrunk model's parameters back into the original topology.

    Pruned coordinates become zero (pruned running variances become one so the
    result still validates). The expanded model is the masked oracle of the
    shrunk one: functionally equal, but with the pristine graph structure, so
    it can be scored and shrunk again. Used by the iterative pipelines.
    """
    surv = compute_survivors(partition, mask)
    out = original.copy()
    for node in original.nodes:
        if node.op == "Conv":
            out_keep, in_keep = _conv_slices(original, partition, surv, node)
            w = np.zeros_like(original.params[node.inputs[1]])
            w[np.ix_(out_keep, in_keep)] = shrunk.params[node.inputs[1]]
            out.params[node.inputs[1]] = w
            if len(node.inputs) == 3:
                b = np.zeros_like(original.params[node.inputs[2]])
                b[out_keep] = shrunk.params[node.inputs[2]]
                out.params[node.inputs[2]] = b
        elif node.op == "BatchNorm":
            keep = np.asarray(surv[partition.tensor_group[node.inputs[0]]])
            for slot, pname in enumerate(node.inputs[1:]):
                fill = 1.0 if slot == 3 else 0.0  # running variance stays positive
                p = np.full_like(original.params[pname], fill)
                p[keep] = shrunk.params[pname]
                out.params[pname] = p
    return out


def verify_equivalence(
    original: GraphModel,
    partition: DependencyPartition,
    mask,
    shrunk: GraphModel,
    n_inputs: int = 10,
    tol: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max relative error between the shrunk model and the masked oracle.

    Runs both models on n_inputs seeded random inputs and returns
    max |shrunk - oracle| / (|oracle| + 1e-8) over all graph outputs; the
    caller compares against tol (exposed here only for error messages).

    The comparison runs at double precision: the claim is algebraic
    equivalence of the two graphs, and float32 reduction-order noise would
    otherwise swamp the metric wherever an output value crosses zero.
    """
    oracle = masked_oracle(original, partition, mask)
    rng = np.random.default_rng(seed)
    max_err = 0.0
    for _ in range(n_inputs):
        feeds = {
            name: rng.standard_normal(shape_of(original, name)).astype(np.float64)
            for name in original.inputs
        }
        got = execute(shrunk, feeds).outputs
        want = execute(oracle, feeds).outputs
        for name in original.outputs:
            a, b = got[name], want[name]
            if a.shape != b.shape:
                raise ShrinkError(f"output {name!r} shape mismatch: {a.shape} vs {b.shape}")
            if a.dtype == np.int64 or b.dtype == np.int64:
                err = 0.0 if np.array_equal(a, b) else float("inf")
            else:
                err = float(
                    np.max(np.abs(a.astype(np.float64) - b.astype(np.float64)) / (np.abs(b.astype(np.float64)) + 1e-8))
                )
            max_err = max(max_err, err)
    return max_err
