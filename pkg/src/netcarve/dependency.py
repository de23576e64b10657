"""Partition every channel of every tensor into prunable, derived, and frozen
groups, capturing the long-range coupling that residual connections induce.

A prunable group is owned by a Conv whose sole consumer is a BatchNorm; its
channels can be removed. Derived groups sit behind Add/Concat and reconcile
their inputs' survivor sets. Everything else (graph inputs, classifier convs
without BN, anything feeding a channel-mixing consumer) is frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .graph import GraphModel, GraphError, shape_of, topological_order

PASS_THROUGH = ("BatchNorm", "Relu", "Resize", "MaxPool")
CHANNEL_MIXING = ("Softmax", "ArgMax")


class DependencyError(GraphError):
    pass


@dataclass
class ChannelGroup:
    id: str
    kind: str  # prunable | derived | frozen
    channels: int
    members: list[str] = field(default_factory=list)
    producer_conv: str | None = None  # node id
    producer_bn: str | None = None
    weight_param: str | None = None
    bias_param: str | None = None
    gamma_param: str | None = None
    beta_param: str | None = None
    origin: str | None = None  # for derived groups: "add" | "concat"
    pinned_full: bool = False  # derived group that must materialize every channel


@dataclass
class AddRecord:
    node_id: str
    input_groups: list[str]
    output_group: str


@dataclass
class ConcatRecord:
    node_id: str
    input_groups: list[str]
    offsets: list[int]  # channel offset of each input range in the output space
    output_group: str


@dataclass
class DependencyPartition:
    groups: dict[str, ChannelGroup]
    tensor_group: dict[str, str]
    adds: list[AddRecord]
    concats: list[ConcatRecord]

    def group_of(self, tensor: str) -> ChannelGroup:
        return self.groups[self.tensor_group[tensor]]

    def prunable_groups(self) -> list[ChannelGroup]:
        return [g for g in self.groups.values() if g.kind == "prunable"]


def build_dependency_partition(model: GraphModel) -> DependencyPartition:
    """Assign every (tensor, channel-axis) pair to exactly one group.

    The model must be validated and shape-inferred. Models that already carry
    scatter reconciliation (ScatterND/Transpose/ConstantOfShape) are rejected:
    pruning always starts from a pristine graph.
    """
    for node in model.nodes:
        if node.op in ("ScatterND", "Transpose", "ConstantOfShape"):
            raise DependencyError(
                f"node {node.id}: model already contains reconciliation operators; "
                "build the partition on the unshrunk graph"
            )

    groups: dict[str, ChannelGroup] = {}
    tensor_group: dict[str, str] = {}
    adds: list[AddRecord] = []
    concats: list[ConcatRecord] = []

    def new_group(tensor: str, kind: str, **kw) -> ChannelGroup:
        g = ChannelGroup(id=tensor, kind=kind, channels=shape_of(model, tensor)[1], **kw)
        g.members.append(tensor)
        groups[g.id] = g
        tensor_group[tensor] = g.id
        return g

    for name in model.inputs:
        new_group(name, "frozen")

    for node in topological_order(model):
        if node.op == "Conv":
            out = node.outputs[0]
            consumers = model.consumers(out)
            sole_bn = len(consumers) == 1 and consumers[0].op == "BatchNorm"
            if sole_bn and out not in model.outputs:
                bn = consumers[0]
                new_group(
                    out,
                    "prunable",
                    producer_conv=node.id,
                    producer_bn=bn.id,
                    weight_param=node.inputs[1],
                    bias_param=node.inputs[2] if len(node.inputs) == 3 else None,
                    gamma_param=bn.inputs[1],
                    beta_param=bn.inputs[2],
                )
            else:
                new_group(out, "frozen", producer_conv=node.id, weight_param=node.inputs[1],
                          bias_param=node.inputs[2] if len(node.inputs) == 3 else None)
        elif node.op in PASS_THROUGH or node.op == "Softmax":
            gid = tensor_group[node.inputs[0]]
            for out in node.outputs:
                groups[gid].members.append(out)
                tensor_group[out] = gid
        elif node.op == "ArgMax":
            new_group(node.outputs[0], "frozen")
        elif node.op == "Add":
            in_groups = [tensor_group[t] for t in node.inputs]
            g = new_group(node.outputs[0], "derived", origin="add")
            adds.append(AddRecord(node.id, in_groups, g.id))
        elif node.op == "Concat":
            in_groups = [tensor_group[t] for t in node.inputs]
            offsets = []
            off = 0
            for t in node.inputs:
                offsets.append(off)
                off += shape_of(model, t)[1]
            g = new_group(node.outputs[0], "derived", origin="concat")
            concats.append(ConcatRecord(node.id, in_groups, offsets, g.id))
        else:  # pragma: no cover - closed op set
            raise DependencyError(f"node {node.id}: no partition rule for {node.op}")

    part = DependencyPartition(groups, tensor_group, adds, concats)
    _apply_full_demands(model, part)
    return part


def _apply_full_demands(model: GraphModel, part: DependencyPartition) -> None:
    """Pin groups that must keep their full channel dimension.

    A group is pinned when a member tensor is a graph output or feeds a
    channel-mixing consumer. Pinned prunable groups become frozen; pinned
    derived Add groups scatter into the full dimension; pinned derived Concat
    groups propagate the demand to their inputs (a concat cannot re-inflate).
    """
    concat_inputs = {r.output_group: r.input_groups for r in part.concats}
    demanded: list[str] = []
    for g in part.groups.values():
        for t in g.members:
            if t in model.outputs or any(c.op in CHANNEL_MIXING for c in model.consumers(t)):
                demanded.append(g.id)
                break

    seen = set()
    while demanded:
        gid = demanded.pop()
        if gid in seen:
            continue
        seen.add(gid)
        g = part.groups[gid]
        if g.kind == "prunable":
            g.kind = "frozen"
        elif g.kind == "derived":
            g.pinned_full = True
            if g.origin == "concat":
                demanded.extend(concat_inputs[gid])


def prunable_channel_inventory(partition: DependencyPartition) -> list[tuple[str, int, str]]:
    """One (group id, channel index, BN scale parameter name) entry per prunable channel."""
    inventory = []
    for g in partition.prunable_groups():
        if g.gamma_param is None:
            raise DependencyError(f"group {g.id} is prunable but has no BN scale parameter")
        for c in range(g.channels):
            inventory.append((g.id, c, g.gamma_param))
    return inventory


def partition_debug_dict(partition: DependencyPartition) -> dict:
    """Partition summary for the debug JSON dump."""
    return {
        "groups": [
            {
                "id": g.id,
                "kind": g.kind,
                "channels": g.channels,
                "members": list(g.members),
                "producer_conv": g.producer_conv,
                "producer_bn": g.producer_bn,
                "origin": g.origin,
                "pinned_full": g.pinned_full,
            }
            for g in partition.groups.values()
        ],
        "adds": [
            {"node": r.node_id, "inputs": r.input_groups, "output": r.output_group}
            for r in partition.adds
        ],
        "concats": [
            {"node": r.node_id, "inputs": r.input_groups, "offsets": r.offsets, "output": r.output_group}
            for r in partition.concats
        ],
    }
