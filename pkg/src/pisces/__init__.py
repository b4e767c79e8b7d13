"""Desk-scale toolkit for optimal-transport-aligned reward machinery."""

from .costmatrix import CostMatrix, CostWeights, PatchGrid, build_cost, expected_frame, expected_position
from .fusion import FusedAttention, fuse, fused_pool
from .metrics import AlignReport, build_align_report, distance_histogram, mutual_knn, spearman_pairwise
from .neural_ot import (
    FeedForwardNet,
    NotTrainConfig,
    OtMapArtifact,
    load_ot_map,
    map_loss,
    potential_loss,
    save_ot_map,
    train_not,
)
from .numerics import cosine, logsumexp_row, pairwise_sq_dist, softmax
from .posttrain import (
    GrpoConfig,
    NoiseSchedule,
    ToyDenoiser,
    ToyWorld,
    TrainReport,
    WorldConfig,
    build_world,
    run_posttrain,
)
from .rewards import RewardPair, VtmHead, grouped_rewards, load_vtm, quality_reward, save_vtm, semantic_reward
from .sinkhorn import PartialOTConfig, Relaxation, TransportPlan, mass_to_relaxation, plan_cost, solve_partial_ot
from .synth import EmbeddingSet, SynthSpec, generate, read_emb, read_emb_json, write_emb

__version__ = "0.1.0"
