"""netcarve: dependency-aware structured channel pruning for conv-net graphs.

Scores channels by BatchNorm scale magnitude, selects global masks against a
channel or parameter budget, physically shrinks the graph (inserting scatter
reconciliation where residual branches survive differently), and accounts for
the result with exact parameter/MAC counts and a calibrated energy model.
Includes a toy-scale trainer that runs the Slimming and SWD procedures
end-to-end on a miniature high-resolution network.
"""

__version__ = "0.1.0"

from .build import GraphBuilder
from .cost import CostReport, cost_report, count_macs, count_params
from .dependency import (
    ChannelGroup,
    DependencyPartition,
    build_dependency_partition,
    prunable_channel_inventory,
)
from .energy import (
    EnergyModel,
    PowerTrace,
    estimate_energy,
    fit_energy_model,
    integrate_energy,
    load_calibration_points,
    parse_tegrastats,
)
from .executor import ExecutionResult, execute, miou
from .graph import (
    GraphError,
    GraphModel,
    Node,
    TensorSpec,
    infer_shapes,
    structural_equal,
    to_debug_json,
    validate,
)
from .onnx_io import load_model, save_model
from .pruning import (
    ChannelScore,
    PruneMask,
    SlimmingConfig,
    SwdConfig,
    load_mask,
    save_mask,
    score_channels,
    select_mask,
    slimming_penalty,
    swd_apply,
    swd_coefficient,
)
from .shrink import (
    ReconciliationPlan,
    ShrinkReport,
    expand_to_original,
    masked_oracle,
    plan_reconciliation,
    shrink,
    verify_equivalence,
)
