"""Data types shared across the association network and its training code."""

from dataclasses import dataclass, field

import numpy as np

POS_GRID = 64
VIS_GRID = 7


@dataclass
class DetectionNode:
    """One detected object in a cluster image.

    Args:
        bbox: (x0, y0, x1, y1) in image pixels, x1 > x0 and y1 > y0.
        score: detector confidence in [0, 1].
        is_tag: marks the cluster's identifying tag.
        is_cluster: True for fruitlets belonging to the imaged cluster;
            False for the tag and for fruitlets that intrude from
            neighbouring clusters.  Only clustered fruitlets carry labels
            and enter the evaluation metrics.
        positional: (4, 64, 64) grid of normalised disparity, binary
            segmentation, and x/y image-coordinate ramps, each in [0, 1].
        visual: (C, 7, 7) appearance descriptor grid.
        fruitlet_id: stable identity for bookkeeping (synthetic ground
            truth, growth chaining); never consumed by the network.
        mask_crop: optional raw probability mask aligned with bbox, kept
            only when sizing needs it.
        disparity_crop: optional raw disparity aligned with bbox.
    """

    bbox: tuple
    score: float
    is_tag: bool
    is_cluster: bool
    positional: np.ndarray
    visual: np.ndarray
    fruitlet_id: str | None = None
    mask_crop: np.ndarray | None = field(default=None, repr=False)
    disparity_crop: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        x0, y0, x1, y1 = self.bbox
        if not (x1 > x0 and y1 > y0):
            raise ValueError(f"bbox must have positive area, got {self.bbox}")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must lie in [0, 1], got {self.score}")
        if self.is_tag and self.is_cluster:
            raise ValueError("a tag node cannot be a clustered fruitlet")
        self.positional = np.asarray(self.positional, dtype=np.float64)
        if self.positional.shape != (4, POS_GRID, POS_GRID):
            raise ValueError(
                f"positional grid must be (4, {POS_GRID}, {POS_GRID}), got {self.positional.shape}"
            )
        if self.positional.min() < -1e-9 or self.positional.max() > 1.0 + 1e-9:
            raise ValueError("positional channels must lie in [0, 1]")
        self.visual = np.asarray(self.visual, dtype=np.float64)
        if self.visual.ndim != 3 or self.visual.shape[1:] != (VIS_GRID, VIS_GRID):
            raise ValueError(
                f"visual grid must be (C, {VIS_GRID}, {VIS_GRID}), got {self.visual.shape}"
            )


@dataclass
class ClusterObservation:
    """All detections of one cluster on one capture day."""

    cluster_id: str
    day: str
    image_width: int
    image_height: int
    nodes: list

    def __post_init__(self):
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError("image dimensions must be positive")
        if not self.nodes:
            raise ValueError("observation needs at least one node")
        tags = sum(1 for n in self.nodes if n.is_tag)
        if tags != 1:
            raise ValueError(f"observation must contain exactly one tag node, got {tags}")

    def __len__(self):
        return len(self.nodes)

    @property
    def is_cluster_flags(self) -> np.ndarray:
        return np.array([n.is_cluster for n in self.nodes], dtype=bool)


@dataclass(frozen=True)
class PairLabels:
    """Ground-truth assignment between two observations of one cluster.

    ``matches`` pairs node indices (day A, day B); ``unmatched_a`` and
    ``unmatched_b`` list clustered fruitlets present on only one day.
    Every index refers to a clustered fruitlet; each node appears at most
    once across the whole label set.
    """

    matches: tuple
    unmatched_a: tuple
    unmatched_b: tuple

    def __post_init__(self):
        object.__setattr__(self, "matches", tuple((int(i), int(j)) for i, j in self.matches))
        object.__setattr__(self, "unmatched_a", tuple(int(i) for i in self.unmatched_a))
        object.__setattr__(self, "unmatched_b", tuple(int(j) for j in self.unmatched_b))
        rows = [i for i, _ in self.matches] + list(self.unmatched_a)
        cols = [j for _, j in self.matches] + list(self.unmatched_b)
        if len(set(rows)) != len(rows) or len(set(cols)) != len(cols):
            raise ValueError("labels must form a partial matching: node used twice")
        if any(i < 0 for i in rows) or any(j < 0 for j in cols):
            raise ValueError("label indices must be non-negative")

    def validate_sizes(self, n_a: int, n_b: int):
        rows = [i for i, _ in self.matches] + list(self.unmatched_a)
        cols = [j for _, j in self.matches] + list(self.unmatched_b)
        if any(i >= n_a for i in rows):
            raise IndexError(f"label row index out of range for {n_a} day-A nodes")
        if any(j >= n_b for j in cols):
            raise IndexError(f"label column index out of range for {n_b} day-B nodes")


@dataclass(frozen=True)
class MatchSet:
    """Predicted assignment: (i, j, probability) triples plus the clustered
    fruitlets left unmatched on each side."""

    pairs: tuple
    unmatched_a: tuple
    unmatched_b: tuple

    def as_index_map(self) -> dict:
        return {i: j for i, j, _ in self.pairs}


@dataclass(frozen=True)
class NetConfig:
    """Hyperparameters of the association network.

    ``feature_dim`` is the attention width D; node states carry two extra
    channels (score, tag flag), so descriptors have D + 2 dims.
    """

    visual_channels: int = 32
    feature_dim: int = 64
    num_heads: int = 4
    num_layers: int = 9
    sinkhorn_iters: int = 100
    d_enc_channels: tuple = (16, 16)
    p_enc_channels: tuple = (8, 16, 16, 16)

    def __post_init__(self):
        if self.feature_dim % self.num_heads != 0:
            raise ValueError(
                f"feature_dim {self.feature_dim} must divide evenly into {self.num_heads} heads"
            )
        for name in ("visual_channels", "feature_dim", "num_heads", "num_layers", "sinkhorn_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if len(self.d_enc_channels) != 2 or len(self.p_enc_channels) != 4:
            raise ValueError("encoder channel tuples must have lengths 2 and 4")

    @property
    def node_dim(self) -> int:
        return self.feature_dim + 2
