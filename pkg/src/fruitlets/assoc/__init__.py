"""Cross-day fruitlet association: features, network, transport, loss."""

from .features import bilinear_resize, build_positional, visual_from_crop
from .loss import assignment_loss
from .network import AssociationNetwork, AssociationOutput
from .sinkhorn import augment_scores, extract_matches, sinkhorn_log
from .types import (
    POS_GRID,
    VIS_GRID,
    ClusterObservation,
    DetectionNode,
    MatchSet,
    NetConfig,
    PairLabels,
)

__all__ = [
    "AssociationNetwork",
    "AssociationOutput",
    "ClusterObservation",
    "DetectionNode",
    "MatchSet",
    "NetConfig",
    "PairLabels",
    "POS_GRID",
    "VIS_GRID",
    "assignment_loss",
    "augment_scores",
    "bilinear_resize",
    "build_positional",
    "extract_matches",
    "sinkhorn_log",
    "visual_from_crop",
]
