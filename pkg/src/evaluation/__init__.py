"""
Evaluation module initialization
"""

from ..simulation.prealign import prealign
from .metrics import EvalReport, error_heatmap, evaluate, radial_error_profile, success_threshold
from .adjustment import AdjustResult, adjust_iteratively, adjust_once, adjustment_examples, adjustment_summary
from .pipelines import (
    EvalConfig,
    PipelineInputs,
    PipelinePreset,
    ablation_presets,
    comparison_presets,
    find_preset,
    loss_weight_presets,
    run_pipeline,
    train_preset,
)
from .reports import read_audit_labels, write_evaluation_bundle, write_loss_weight_grid, write_metrics_csv
