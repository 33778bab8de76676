"""Feature alignment toolkit for frozen embeddings and text class prototypes.

Learns a square linear map aligning pre-computed image/video embeddings
with text class prototypes, supervised or unsupervised, entirely in
feature space: closed-form orthogonal initialization, interpolation
towards identity, adaptive-reranking refinement, Sinkhorn assignment, and
an EMA dual mapping for base-to-new generalization.
"""

from .assignment import SinkhornConfig, harden, sinkhorn, ulfa
from .core import (AssignmentMatrix, FeatureMatrix, LabeledFeatures, LinearMap,
                   PrototypeMatrix, assignment_from_labels, identity_map,
                   l2_normalize_rows, make_prototypes, make_rng, normalize_rows,
                   svd)
from .data import (ArchiveManifest, SynthSpec, beta_sweep, few_shot_sample,
                   group_aggregate, random_projection, read_archive, read_npy,
                   read_prototypes, synth_generate, synth_split, write_archive,
                   write_npy)
from .evaluate import (EvalReport, build_report, classify, cross_interference,
                       gt_rank, knn_baseline, modality_gap, pca_project,
                       top1_accuracy)
from .pipeline import fit_supervised
from .procrustes import (BetaParam, beta_procrustes, least_squares_map,
                         orthogonal_procrustes)
from .refine import (EmaState, OptimizerState, RefineConfig, adaptive_margin,
                     alpha_schedule, arerank_grad, arerank_loss, average_maps,
                     baseline_loss, cosine_lr, ema_update, nearest_prototypes,
                     optimizer_step, perturb, refine)

__version__ = "0.1.0"

__all__ = [
    "AssignmentMatrix", "ArchiveManifest", "BetaParam", "EmaState", "EvalReport",
    "FeatureMatrix", "LabeledFeatures", "LinearMap", "OptimizerState",
    "PrototypeMatrix", "RefineConfig", "SinkhornConfig", "SynthSpec",
    "adaptive_margin", "alpha_schedule", "arerank_grad", "arerank_loss",
    "assignment_from_labels", "average_maps", "baseline_loss", "beta_procrustes",
    "beta_sweep", "build_report", "classify", "cosine_lr", "cross_interference",
    "ema_update", "few_shot_sample", "fit_supervised", "group_aggregate",
    "gt_rank", "harden", "identity_map", "knn_baseline", "l2_normalize_rows",
    "least_squares_map", "make_prototypes", "make_rng", "modality_gap",
    "nearest_prototypes", "normalize_rows", "optimizer_step",
    "orthogonal_procrustes", "pca_project", "perturb", "random_projection",
    "read_archive", "read_npy", "read_prototypes", "refine", "sinkhorn", "svd",
    "synth_generate", "synth_split", "top1_accuracy", "ulfa", "write_archive",
    "write_npy",
]
