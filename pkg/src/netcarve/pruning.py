"""Channel scoring, global mask selection, and the two sparsity schedules.

Channels are scored by the magnitude of their BatchNorm scale coefficient.
Selection is global: with a channel budget the smallest-scored channels are
removed across all prunable groups; with a parameter budget a score threshold
is bisected until the removed-parameter fraction of the would-be shrunk model
hits the target within half a percentage point.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .dependency import DependencyPartition
from .graph import GraphModel

PARAM_BUDGET_TOL = 0.005  # +/- 0.5 percentage points


class PruningError(Exception):
    pass


@dataclass(frozen=True)
class ChannelScore:
    group_id: str
    channel: int
    score: float


@dataclass
class PruneMask:
    """Per-group sorted kept channel indices, in original indexing.

    Only prunable groups appear; frozen groups implicitly keep everything.
    """

    keep: dict[str, tuple[int, ...]]
    budget_kind: str = "channel-fraction"
    target: float = 0.0
    achieved_fraction: float = 0.0
    exact: bool = True

    def kept_channels(self) -> int:
        return sum(len(v) for v in self.keep.values())


@dataclass
class SlimmingConfig:
    penalty: float = 1e-4  # coefficient on the smooth-L1 norm of BN scales
    beta_smooth: float = 1.0
    n_steps: int = 3
    finetune_epochs: int = 20
    final_rate: float = 0.5
    budget_kind: str = "parameter-fraction"

    def __post_init__(self):
        if not 0 <= self.final_rate < 1:
            raise PruningError(f"final_rate must be in [0, 1), got {self.final_rate}")
        if self.n_steps < 1:
            raise PruningError("n_steps must be >= 1")


@dataclass
class SwdConfig:
    a_min: float = 1e-1
    a_max: float = 1e10
    final_rate: float = 0.5
    target_recompute_period: int | None = None  # steps; None = once per epoch
    budget_kind: str = "parameter-fraction"

    def __post_init__(self):
        if not 0 <= self.final_rate < 1:
            raise PruningError(f"final_rate must be in [0, 1), got {self.final_rate}")
        trivial = self.a_min == 0 and self.a_max == 0
        if not trivial and not 0 < self.a_min <= self.a_max:
            raise PruningError(f"need 0 < a_min <= a_max, got {self.a_min}, {self.a_max}")


def score_channels(model: GraphModel, partition: DependencyPartition) -> list[ChannelScore]:
    """|gamma| of the producing BatchNorm, one score per prunable channel."""
    scores = []
    for g in partition.prunable_groups():
        gamma = model.params.get(g.gamma_param)
        if gamma is None:
            raise PruningError(f"group {g.id}: BN scale parameter {g.gamma_param!r} missing")
        if gamma.shape[0] != g.channels:
            raise PruningError(f"group {g.id}: BN scale has {gamma.shape[0]} entries, expected {g.channels}")
        for c in range(g.channels):
            scores.append(ChannelScore(g.id, c, float(abs(gamma[c]))))
    return scores


def _mask_from_removed(partition, removed: set[tuple[str, int]], scores, min_keep: int):
    """Kept sets per group, resurrecting top-scored channels where min-keep bites."""
    by_group: dict[str, list[ChannelScore]] = {}
    for s in scores:
        by_group.setdefault(s.group_id, []).append(s)
    keep: dict[str, tuple[int, ...]] = {}
    resurrected = 0
    for g in partition.prunable_groups():
        members = by_group.get(g.id, [])
        kept = [s.channel for s in members if (g.id, s.channel) not in removed]
        deficit = min_keep - len(kept)
        if deficit > 0:
            # Bring back the channels that would have been removed last under the
            # global (score, group, channel) ascending order.
            victims = sorted(
                (s for s in members if (g.id, s.channel) in removed),
                key=lambda s: (s.score, s.channel),
            )
            for s in victims[-deficit:]:
                kept.append(s.channel)
                resurrected += 1
        keep[g.id] = tuple(sorted(kept))
    return keep, resurrected


def select_mask(
    scores: list[ChannelScore],
    partition: DependencyPartition,
    target: float,
    budget_kind: str = "channel-fraction",
    min_keep: int = 1,
    model: GraphModel | None = None,
) -> PruneMask:
    """Select kept channels to meet a global channel- or parameter-fraction budget.

    With a parameter budget `model` is required: each candidate threshold is
    applied, the would-be shrunk model is counted, and the threshold is
    bisected until the removed fraction lands within PARAM_BUDGET_TOL of the
    target (or the nearest achievable mask is returned, flagged inexact).
    """
    if not 0 <= target <= 1:
        raise PruningError(f"target must be in [0, 1], got {target}")
    for g0 in partition.prunable_groups():
        if min_keep > g0.channels:
            raise PruningError(f"min_keep={min_keep} exceeds group {g0.id} width {g0.channels}")

    if budget_kind == "channel-fraction":
        order = sorted(scores, key=lambda s: (s.score, s.group_id, s.channel))
        n_remove = int(np.floor(target * len(scores) + 1e-9))
        removed = {(s.group_id, s.channel) for s in order[:n_remove]}
        keep, resurrected = _mask_from_removed(partition, removed, scores, min_keep)
        achieved = (n_remove - resurrected) / len(scores) if scores else 0.0
        return PruneMask(keep, "channel-fraction", target, achieved, exact=resurrected == 0)

    if budget_kind != "parameter-fraction":
        raise PruningError(f"unknown budget kind {budget_kind!r}")
    if model is None:
        raise PruningError("parameter-fraction selection needs the model to count parameters")

    from .cost import count_params
    from .shrink import shrink

    base = count_params(model).params

    def removed_fraction(threshold: float) -> tuple[float, PruneMask]:
        removed = {(s.group_id, s.channel) for s in scores if s.score <= threshold}
        keep, _ = _mask_from_removed(partition, removed, scores, min_keep)
        mask = PruneMask(keep, "parameter-fraction", target)
        shrunk, _ = shrink(model, partition, mask)
        achieved = 1.0 - count_params(shrunk).params / base
        mask.achieved_fraction = achieved
        return achieved, mask

    thresholds = sorted({s.score for s in scores})
    lo_frac, lo_mask = removed_fraction(-1.0)  # prune nothing
    if target <= lo_frac + PARAM_BUDGET_TOL:
        lo_mask.exact = abs(lo_frac - target) <= PARAM_BUDGET_TOL
        return lo_mask
    hi_frac, hi_mask = removed_fraction(thresholds[-1])
    if hi_frac < target - PARAM_BUDGET_TOL:
        # Min-keep caps how much can be removed; report the nearest achievable.
        hi_mask.exact = False
        return hi_mask

    lo, hi = -1, len(thresholds) - 1  # removed_fraction(thresholds[hi]) >= target - tol
    best = hi_mask if abs(hi_frac - target) < abs(lo_frac - target) else lo_mask
    while hi - lo > 1:
        mid = (lo + hi) // 2
        frac, mask = removed_fraction(thresholds[mid])
        if abs(frac - target) < abs(best.achieved_fraction - target):
            best = mask
        if abs(frac - target) <= PARAM_BUDGET_TOL:
            mask.exact = True
            return mask
        if frac < target:
            lo = mid
        else:
            hi = mid
    best.exact = abs(best.achieved_fraction - target) <= PARAM_BUDGET_TOL
    return best


def targeted_channels(mask: PruneMask, partition: DependencyPartition) -> list[tuple[str, int]]:
    """Channels the mask removes; the set SWD decays toward zero."""
    out = []
    for g in partition.prunable_groups():
        kept = set(mask.keep.get(g.id, range(g.channels)))
        out.extend((g.id, c) for c in range(g.channels) if c not in kept)
    return out


def slimming_penalty(gamma: np.ndarray, penalty: float, beta_smooth: float):
    """Smooth-L1 sparsity penalty on BN scales: (loss, gradient per entry)."""
    if beta_smooth <= 0:
        raise PruningError("beta_smooth must be > 0")
    x = np.asarray(gamma)
    quad = np.abs(x) < beta_smooth
    per = np.where(quad, x * x / (2 * beta_smooth), np.abs(x) - beta_smooth / 2)
    grad = penalty * np.clip(x / beta_smooth, -1.0, 1.0)
    return penalty * float(per.sum()), grad


def swd_coefficient(step: int, total_steps: int, a_min: float, a_max: float) -> float:
    """Exponential ramp from a_min to a_max over training progress."""
    if total_steps <= 0:
        raise PruningError("total_steps must be > 0")
    if not 0 <= step <= total_steps:
        raise PruningError(f"step {step} outside [0, {total_steps}]")
    if a_min == 0 and a_max == 0:
        return 0.0
    return float(a_min * (a_max / a_min) ** (step / total_steps))


def swd_apply(
    params: dict[str, np.ndarray],
    partition: DependencyPartition,
    targeted: list[tuple[str, int]],
    a: float,
    weight_decay: float,
    lr: float,
) -> dict[str, np.ndarray]:
    """Decay every targeted structured unit by (1 - lr*a*wd), clamped at zero.

    The unit is the whole filter: BN scale and shift, the producing Conv's
    weight rows, and its bias entries. Mutates and returns params.
    """
    factor = max(0.0, 1.0 - lr * a * weight_decay)
    by_group: dict[str, list[int]] = {}
    for gid, c in targeted:
        by_group.setdefault(gid, []).append(c)
    for gid, chans in by_group.items():
        g = partition.groups[gid]
        if g.kind != "prunable":
            raise PruningError(f"group {gid} is {g.kind}; only prunable channels can be targeted")
        idx = np.asarray(sorted(chans))
        params[g.weight_param][idx] *= factor
        if g.bias_param is not None:
            params[g.bias_param][idx] *= factor
        params[g.gamma_param][idx] *= factor
        params[g.beta_param][idx] *= factor
    return params


def save_mask(mask: PruneMask, path) -> None:
    doc = {
        "format_version": 1,
        "budget_kind": mask.budget_kind,
        "target": mask.target,
        "achieved_fraction": mask.achieved_fraction,
        "exact": mask.exact,
        "keep": {gid: list(v) for gid, v in sorted(mask.keep.items())},
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


def load_mask(path) -> PruneMask:
    with open(path) as f:
        doc = json.load(f)
    return PruneMask(
        keep={gid: tuple(v) for gid, v in doc["keep"].items()},
        budget_kind=doc.get("budget_kind", "channel-fraction"),
        target=doc.get("target", 0.0),
        achieved_fraction=doc.get("achieved_fraction", 0.0),
        exact=doc.get("exact", True),
    )
