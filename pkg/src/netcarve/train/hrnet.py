"""HRNet-lite: a miniature two-branch high-resolution network generator.

Keeps, at toy widths, the topology ingredients that make pruning
interesting: parallel branches at two resolutions, residual blocks,
cross-resolution fusion by addition (1x1 conv + bilinear upsample going up,
stride-2 conv going down), and a concatenation head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..build import GraphBuilder
from ..graph import GraphModel, validate


@dataclass
class HrnetLiteSpec:
    width: int = 8           # channels of the full-resolution branch; half-res gets 2x
    blocks_per_stage: int = 2
    n_classes: int = 4

    def __post_init__(self):
        if self.width < 2:
            raise ValueError("width must be >= 2")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be >= 1")


def _residual_block(b: GraphBuilder, x, c, name):
    t = b.conv_bn(x, c, c, f"{name}.a", k=3)
    t = b.conv_bn(t, c, c, f"{name}.b", k=3, relu=False)
    t = b.add(t, x, f"{name}.add")
    return b.relu(t, f"{name}.relu")


def build_hrnet_lite(spec: HrnetLiteSpec, seed: int = 0) -> GraphModel:
    """Validated HRNet-lite graph; call infer_shapes with the input shape to use it."""
    w = spec.width
    b = GraphBuilder(input_name="image", rng=np.random.default_rng(seed))

    stem = b.conv_bn("image", 3, w, "stem", k=3)
    half = b.conv_bn(stem, w, 2 * w, "split", k=3, stride=2)

    b0, b1 = stem, half
    for i in range(spec.blocks_per_stage):
        b0 = _residual_block(b, b0, w, f"b0.blk{i}")
        b1 = _residual_block(b, b1, 2 * w, f"b1.blk{i}")

    # cross-resolution fusion: up = 1x1 conv + upsample, down = stride-2 conv
    up = b.conv_bn(b1, 2 * w, w, "fuse.up", k=1, relu=False)
    up = b.resize(up, 2, "fuse.up.resize")
    f0 = b.relu(b.add(b0, up, "fuse.add0"), "fuse.relu0")

    down = b.conv_bn(b0, w, 2 * w, "fuse.down", k=3, stride=2, relu=False)
    f1 = b.relu(b.add(b1, down, "fuse.add1"), "fuse.relu1")

    head_up = b.resize(f1, 2, "head.resize")
    merged = b.concat([f0, head_up], "head.concat")
    logits = b.conv(merged, 3 * w, spec.n_classes, "head.classifier", k=1, bias=True)

    model = b.finish(logits)
    return validate(model)
