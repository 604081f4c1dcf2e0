"""Retrieve-then-rank polymer recommendation over language and graph embeddings."""
from .dataset import (
    TASKS,
    Dataset,
    DatasetError,
    PolymerRecord,
    SplitAssignment,
    SyntheticSpec,
    TaskStats,
    attach_embeddings,
    compute_task_stats,
    destandardize,
    factor_weights,
    generate_synthetic,
    load_manifest,
    noise_for_r2,
    split_dataset,
    standardize,
)
from .fusion import (
    FusionModel,
    TrainConfig,
    build_early_fusion,
    build_gated_late,
    build_mmoe,
    build_model,
    evaluate_r2,
    expert_utilization,
    fusion_forward,
    load_model,
    masked_mse,
    predict,
    save_model,
    train,
)
from .kernels import BACKEND
from .ranking import RankedCandidate, recommend, relevance, tapd
from .retrieval import RetrievalHit, RetrievalIndex, build_index, cosine, retrieve

__version__ = "0.1.0"
