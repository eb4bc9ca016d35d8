"""Desk-scale laboratory for task-vector model merging.

A tiny tanh-network engine with exact gradients feeds merge operators
(uniform, scaled task-vector sums, per-layer coefficient merges), test-time
adaptation loops that learn coefficients and one task-specific layer from
expert self-labels, diagnostic analyses, and a numerical verifier for the
midpoint-merge loss bound. The `mergelab` CLI ties everything into
reproducible, manifest-stamped runs.
"""

__version__ = "0.1.0"

from .engine import (
    AdamState,
    LayerParams,
    LossSpec,
    ParamSet,
    ShapeError,
    UnknownTaskError,
    adam_init,
    adam_step,
    backward,
    forward,
    loss_eval,
)
from .merging import (
    CoefficientMatrix,
    MergedAssembly,
    TaskVector,
    TrainableLayer,
    coefficient_grad,
    compute_task_vector,
    merge_layerwise,
    merge_task_arithmetic,
    merge_uniform,
)
from .adaptation import (
    AdaptConfig,
    AdaptResult,
    SelfLabelBatch,
    adamerging_entropy,
    build_assembly,
    confidence_filter,
    default_init_coeff,
    finetune_expert,
    make_self_labels,
    pilot_two_stage,
    pretrain_backbone,
    symerge,
    task_vectors_from_experts,
)
from .analysis import (
    CorrelationReport,
    DiscrepancyReport,
    SparsityReport,
    cross_task_matrix,
    discrepancy,
    evaluate,
    evaluate_assembly,
    loss_correlation_report,
    spearman,
    sparsity_report,
    transfer_metrics,
)
from .theory import (
    Prop1Instance,
    Prop1Report,
    ctl_residual,
    prop1_verify,
    synergy_eps,
)
from .suites import (
    CorruptionSpec,
    SuiteConfig,
    TaskData,
    TaskSuite,
    corrupt_features,
    corrupt_split,
    corrupt_suite,
    gen_suite,
    spawn_rng,
)
from .serialization import (
    load_checkpoint,
    load_coeffs,
    load_suite,
    load_trainable,
    save_checkpoint,
    save_coeffs,
    save_suite,
    save_trainable,
)
