"""Random graph corpus for equivalence and regression testing.

Families cover the shapes that make shrinking hard: plain chains, residual
blocks, chained additions, and cross-resolution fusions mixing Resize,
MaxPool and Concat. All graphs end in a frozen 1x1 classifier conv and all
BatchNorms carry randomized statistics so eval-mode arithmetic is exercised.
"""

from __future__ import annotations

import numpy as np

from .build import GraphBuilder
from .dependency import DependencyPartition, build_dependency_partition
from .graph import GraphModel, infer_shapes, validate
from .pruning import PruneMask

FAMILIES = ("chain", "residual", "chained_adds", "concat_resize", "fusion_add", "same_group_add")


def _builder(rng):
    return GraphBuilder(input_name="x", rng=rng, random_bn=True)


def _classifier(b, x, cin, rng):
    return b.conv(x, cin, int(rng.integers(2, 5)), "head", k=1, bias=True)


def _chain(rng, widths=(3, 10)):
    b = _builder(rng)
    c_in = int(rng.integers(2, 4))
    t, c = "x", c_in
    for i in range(rng.integers(1, 4)):
        cout = int(rng.integers(*widths))
        t = b.conv_bn(t, c, cout, f"c{i}", k=int(rng.choice([1, 3])))
        c = cout
        if i == 0 and rng.random() < 0.3:
            t = b.maxpool(t, f"pool{i}")
    return b.finish(_classifier(b, t, c, rng)), c_in


def _residual(rng, widths=(4, 9)):
    b = _builder(rng)
    c_in = int(rng.integers(2, 4))
    c = int(rng.integers(*widths))
    t = b.conv_bn("x", c_in, c, "stem")
    for i in range(rng.integers(1, 3)):
        y = b.conv_bn(t, c, c, f"blk{i}.a")
        y = b.conv_bn(y, c, c, f"blk{i}.b", relu=False)
        t = b.relu(b.add(y, t, f"blk{i}.add"), f"blk{i}.relu")
    return b.finish(_classifier(b, t, c, rng)), c_in


def _chained_adds(rng, widths=(4, 9)):
    b = _builder(rng)
    c_in = int(rng.integers(2, 4))
    c = int(rng.integers(*widths))
    stem = b.conv_bn("x", c_in, c, "stem")
    branches = [b.conv_bn(stem, c, c, f"br{j}", relu=False) for j in range(3)]
    t = b.add(branches[0], branches[1], "add0")
    t = b.add(t, branches[2], "add1")
    t = b.relu(t, "relu")
    return b.finish(_classifier(b, t, c, rng)), c_in


def _concat_resize(rng, widths=(4, 8)):
    b = _builder(rng)
    c_in = int(rng.integers(2, 4))
    c = int(rng.integers(*widths))
    stem = b.conv_bn("x", c_in, c, "stem")
    if rng.random() < 0.5:
        low = b.conv_bn(stem, c, c, "down", stride=2)
    else:
        low = b.maxpool(stem, "down")
        low = b.conv_bn(low, c, c, "down.conv")
    low = b.conv_bn(low, c, c, "low", relu=False)
    up = b.resize(low, 2, "up")
    keep = b.conv_bn(stem, c, c, "keep", relu=False)
    t = b.relu(b.concat([keep, up], "cat"), "relu")
    return b.finish(_classifier(b, t, 2 * c, rng)), c_in


def _fusion_add(rng, widths=(4, 8)):
    # HRNet-style: downsample, process, upsample, then add across resolutions
    b = _builder(rng)
    c_in = int(rng.integers(2, 4))
    c = int(rng.integers(*widths))
    stem = b.conv_bn("x", c_in, c, "stem")
    low = b.conv_bn(stem, c, c, "down", stride=2)
    low = b.conv_bn(low, c, c, "low", k=1, relu=False)
    up = b.resize(low, 2, "up")
    t = b.relu(b.add(stem, up, "fuse"), "relu")
    return b.finish(_classifier(b, t, c, rng)), c_in


def _same_group_add(rng, widths=(4, 9)):
    # both Add inputs live in one channel group, so survivors always coincide
    b = _builder(rng)
    c_in = int(rng.integers(2, 4))
    c = int(rng.integers(*widths))
    stem = b.conv_bn("x", c_in, c, "stem")
    t = b.add(stem, b.relu(stem, "branch"), "add")
    return b.finish(_classifier(b, t, c, rng)), c_in


_BUILDERS = {
    "chain": _chain,
    "residual": _residual,
    "chained_adds": _chained_adds,
    "concat_resize": _concat_resize,
    "fusion_add": _fusion_add,
    "same_group_add": _same_group_add,
}


def random_graph(seed: int, family: str | None = None, spatial: int = 8,
                 widths: tuple[int, int] | None = None) -> GraphModel:
    """One validated, shape-inferred random graph with input (1, C, spatial, spatial).

    widths overrides the family's channel-count range; wide graphs give the
    parameter budget finer granularity.
    """
    rng = np.random.default_rng(seed)
    if family is None:
        family = FAMILIES[seed % len(FAMILIES)]
    if widths is None:
        model, c_in = _BUILDERS[family](rng)
    else:
        model, c_in = _BUILDERS[family](rng, widths=widths)
    validate(model)
    return infer_shapes(model, (1, c_in, spatial, spatial))


def random_mask(partition: DependencyPartition, seed: int, keep_all_prob: float = 0.1) -> PruneMask:
    """A valid random mask: every prunable group keeps a nonempty random subset."""
    rng = np.random.default_rng(seed)
    keep = {}
    for g in partition.prunable_groups():
        if rng.random() < keep_all_prob:
            keep[g.id] = tuple(range(g.channels))
            continue
        n_keep = int(rng.integers(1, g.channels + 1))
        keep[g.id] = tuple(sorted(rng.choice(g.channels, size=n_keep, replace=False).tolist()))
    return PruneMask(keep)


def generate_corpus(n: int, seed: int = 0):
    """Yields (model, partition, mask) triples cycling through all families."""
    for i in range(n):
        family = FAMILIES[i % len(FAMILIES)]
        model = random_graph(seed * 100003 + i, family=family)
        partition = build_dependency_partition(model)
        mask = random_mask(partition, seed * 7919 + i)
        yield model, partition, mask
