"""Batch knowledge editing with a learned gradient editor.

A hyper-network turns per-token fine-tuning gradients of selected linear
layers into value differences; the shift of each layer is the regularized
least-squares fit of those differences, and the editor is meta-trained with
a gradient that is accumulated over cache sub-batches.
"""
from .aggregate import (AggregationResult, NormalEquation, ResidualReport, aggregate_normal_eq, aggregate_sum,
                        residual_report)
from .errors import NonFiniteLossError, ParseError, ShapeError, SingularMatrixError
from .evaluate import (EditMetrics, ResultTable, ablation_suite, compute_metrics, run_method, scaling_curve)
from .hypernet import HyperNetwork, generate_factors, init_hypernetwork, value_difference
from .lm import Batch, EditableModel, apply_shifts, forward_with_cache, init_model
from .metagrad import (accumulate_editor_gradient, grad_wrt_lambda, grad_wrt_value_diffs,
                       monolithic_editor_gradient)
from .pipeline import (EditorConfig, ExperimentConfig, editor_inference, finetune_edit_baseline, prepare_editor,
                       train_editor)
from .tasks import EditTask, EditTuple, generate_synthetic_task, load_dataset, sample_edit_batch

__version__ = "0.1.0"

__all__ = [
    "AggregationResult", "Batch", "EditMetrics", "EditTask", "EditTuple", "EditableModel", "EditorConfig",
    "ExperimentConfig", "HyperNetwork", "NonFiniteLossError", "NormalEquation", "ParseError", "ResidualReport",
    "ResultTable", "ShapeError", "SingularMatrixError", "ablation_suite", "accumulate_editor_gradient",
    "aggregate_normal_eq", "aggregate_sum", "apply_shifts", "compute_metrics", "editor_inference",
    "finetune_edit_baseline", "forward_with_cache", "generate_factors", "generate_synthetic_task",
    "grad_wrt_lambda", "grad_wrt_value_diffs", "init_hypernetwork", "init_model", "load_dataset",
    "monolithic_editor_gradient", "prepare_editor", "residual_report", "run_method", "sample_edit_batch",
    "scaling_curve", "train_editor", "value_difference",
]
