"""The two end-to-end pruning procedures.

Slimming: train under a smooth-L1 penalty on BN scales, then prune in steps
with a linearly increasing rate, fine-tuning after each step, and finish with
an LR-rewind retrain. SWD: train under a growing selective decay on the
currently-targeted filters, prune once at the final rate, then LR-rewind.

Between Slimming steps the fine-tuned parameters are written back into a
zero-filled copy of the original topology (its masked oracle), so scoring and
shrinking always operate on a pristine graph and masks compose naturally:
already-pruned channels carry zero scores and stay pruned.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from ..cost import count_params
from ..dependency import build_dependency_partition
from ..graph import GraphModel, infer_shapes, validate
from ..pruning import PruneMask, SlimmingConfig, SwdConfig, score_channels, select_mask
from ..shrink import expand_to_original, shrink, verify_equivalence
from .engine import TrainConfig, evaluate_miou, train


@dataclass
class PipelineResult:
    model: GraphModel
    mask: PruneMask | None
    report: dict = field(default_factory=dict)


def _inferred(model: GraphModel, dataset, config: TrainConfig) -> GraphModel:
    shape = (config.batch_size,) + dataset.train_images.shape[1:]
    return infer_shapes(validate(model), shape)


def run_slimming_pipeline(
    model: GraphModel,
    dataset,
    train_cfg: TrainConfig,
    slim_cfg: SlimmingConfig,
    verify_tol: float = 1e-5,
) -> PipelineResult:
    inferred = _inferred(model, dataset, train_cfg)
    partition = build_dependency_partition(inferred)

    penalized = train(model, dataset, train_cfg, regularizer=slim_cfg)
    inflated = _inferred(penalized.model, dataset, train_cfg)
    baseline_params = count_params(inflated).params

    steps = []
    mask = None
    shrunk = None
    finetune_cfg = replace(train_cfg, epochs=slim_cfg.finetune_epochs)
    for k in range(1, slim_cfg.n_steps + 1):
        rate = slim_cfg.final_rate * k / slim_cfg.n_steps
        scores = score_channels(inflated, partition)
        mask = select_mask(scores, partition, rate, slim_cfg.budget_kind, model=inflated)
        shrunk, rep = shrink(inflated, partition, mask)
        err = verify_equivalence(inflated, partition, mask, shrunk)
        if err > verify_tol:
            raise RuntimeError(f"slimming step {k}: equivalence check failed ({err:.3e} > {verify_tol})")
        tuned = train(shrunk, dataset, finetune_cfg)
        steps.append({
            "step": k,
            "rate": rate,
            "achieved_fraction": mask.achieved_fraction,
            "exact": mask.exact,
            "params": rep.params_after,
            "scatter_nodes": rep.scatter_nodes,
            "max_rel_err": err,
            "miou": tuned.history[-1]["miou"],
        })
        shrunk = tuned.model
        inflated = _inferred(expand_to_original(inflated, partition, mask, tuned.model),
                             dataset, train_cfg)

    final = train(shrunk, dataset, train_cfg)  # LR-rewinding: original schedule from scratch
    report = {
        "method": "slimming",
        "baseline_params": baseline_params,
        "steps": steps,
        "penalized_history": penalized.history,
        "final_history": final.history,
        "final_params": count_params(final.model).params,
        "final_miou": final.history[-1]["miou"],
    }
    return PipelineResult(final.model, mask, report)


def run_swd_pipeline(
    model: GraphModel,
    dataset,
    train_cfg: TrainConfig,
    swd_cfg: SwdConfig,
    verify_tol: float = 1e-5,
) -> PipelineResult:
    inferred = _inferred(model, dataset, train_cfg)
    partition = build_dependency_partition(inferred)

    penalized = train(model, dataset, train_cfg, regularizer=swd_cfg)
    trained = _inferred(penalized.model, dataset, train_cfg)
    baseline_params = count_params(trained).params

    scores = score_channels(trained, partition)
    mask = select_mask(scores, partition, swd_cfg.final_rate, swd_cfg.budget_kind, model=trained)
    shrunk, rep = shrink(trained, partition, mask)
    err = verify_equivalence(trained, partition, mask, shrunk)
    if err > verify_tol:
        raise RuntimeError(f"swd prune: equivalence check failed ({err:.3e} > {verify_tol})")
    miou_post_prune = evaluate_miou(shrunk, shrunk.params, dataset.val_images,
                                    dataset.val_labels, dataset.n_classes,
                                    batch_size=train_cfg.batch_size)

    final = train(shrunk, dataset, train_cfg)
    report = {
        "method": "swd",
        "baseline_params": baseline_params,
        "achieved_fraction": mask.achieved_fraction,
        "exact": mask.exact,
        "params": rep.params_after,
        "scatter_nodes": rep.scatter_nodes,
        "max_rel_err": err,
        "miou_post_prune": miou_post_prune,
        "penalized_history": penalized.history,
        "final_history": final.history,
        "final_params": count_params(final.model).params,
        "final_miou": final.history[-1]["miou"],
    }
    return PipelineResult(final.model, mask, report)
