"""Label-preserving augmentation for observation pairs.

All transforms operate on the packaged node grids, not on source imagery:
a horizontal flip mirrors grids and bounding boxes; bounding-box jitter
shifts the box and rewrites only the coordinate channels (the content
channels keep their crop, a deliberate approximation); node drop removes
a clustered detection and rewrites the labels so a lost partner becomes
unmatched.  Every transform draws from a caller-supplied Generator, so
augmented epochs replay exactly.
"""

import dataclasses
from dataclasses import dataclass

import numpy as np

from .assoc.types import ClusterObservation, DetectionNode, PairLabels

__all__ = [
    "AugmentConfig",
    "flip_observation",
    "jitter_nodes",
    "drop_node",
    "augment_pair",
]


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    bbox_jitter_px: float = 2.0
    score_jitter_std: float = 0.03
    node_drop_prob: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        if not 0.0 <= self.node_drop_prob <= 1.0:
            raise ValueError(f"node_drop_prob must lie in [0, 1], got {self.node_drop_prob}")
        if self.bbox_jitter_px < 0 or self.score_jitter_std < 0:
            raise ValueError("jitter magnitudes must be non-negative")


def _flip_node(node: DetectionNode, image_width: int) -> DetectionNode:
    x0, y0, x1, y1 = node.bbox
    pos = node.positional
    flipped = np.stack(
        [
            pos[0, :, ::-1],
            pos[1, :, ::-1],
            (1.0 - pos[2])[:, ::-1],
            pos[3, :, ::-1],
        ]
    )
    return dataclasses.replace(
        node,
        bbox=(image_width - x1, y0, image_width - x0, y1),
        positional=np.clip(flipped, 0.0, 1.0),
        visual=node.visual[:, :, ::-1].copy(),
        mask_crop=None if node.mask_crop is None else node.mask_crop[:, ::-1].copy(),
        disparity_crop=(
            None if node.disparity_crop is None else node.disparity_crop[:, ::-1].copy()
        ),
    )


def flip_observation(obs: ClusterObservation) -> ClusterObservation:
    """Mirror an observation left-right.  Applying it twice restores the
    original up to floating-point rounding in the x-coordinate channel."""
    return dataclasses.replace(
        obs, nodes=[_flip_node(n, obs.image_width) for n in obs.nodes]
    )


def jitter_nodes(
    obs: ClusterObservation,
    rng: np.random.Generator,
    bbox_px: float,
    score_std: float,
) -> ClusterObservation:
    """Shift each box by a rounded Gaussian offset (clamped to the image)
    and perturb detection scores.  A pure translation shifts the x/y
    coordinate channels by the same normalised amount; content channels
    are left untouched."""
    out = []
    for node in obs.nodes:
        x0, y0, x1, y1 = node.bbox
        dx, dy = rng.normal(0.0, bbox_px, 2) if bbox_px > 0 else (0.0, 0.0)
        dx = int(np.clip(round(dx), -x0, obs.image_width - x1))
        dy = int(np.clip(round(dy), -y0, obs.image_height - y1))
        bbox = (x0 + dx, y0 + dy, x1 + dx, y1 + dy)
        score = float(np.clip(node.score + rng.normal(0.0, score_std), 0.0, 1.0)) \
            if score_std > 0 else node.score
        pos = node.positional.copy()
        pos[2] = np.clip(pos[2] + dx / obs.image_width, 0.0, 1.0)
        pos[3] = np.clip(pos[3] + dy / obs.image_height, 0.0, 1.0)
        out.append(dataclasses.replace(node, bbox=bbox, score=score, positional=pos))
    return dataclasses.replace(obs, nodes=out)


def drop_node(
    obs: ClusterObservation, labels: PairLabels, side: str, index: int
) -> tuple:
    """Remove node ``index`` from one side and rewrite labels.

    A dropped match leaves its partner unmatched on the other side; label
    indices above the removed node shift down by one.

    Raises:
        ValueError: bad side, out-of-range index, or attempting to drop
            the tag node.
    """
    if side not in ("a", "b"):
        raise ValueError(f"side must be 'a' or 'b', got {side!r}")
    if not 0 <= index < len(obs.nodes):
        raise ValueError(f"node index {index} out of range")
    if obs.nodes[index].is_tag:
        raise ValueError("refusing to drop the tag node")

    def shift(i):
        return i - 1 if i > index else i

    matches, lone_a, lone_b = [], list(labels.unmatched_a), list(labels.unmatched_b)
    if side == "a":
        for i, j in labels.matches:
            if i == index:
                lone_b.append(j)
            else:
                matches.append((shift(i), j))
        lone_a = [shift(i) for i in lone_a if i != index]
    else:
        for i, j in labels.matches:
            if j == index:
                lone_a.append(i)
            else:
                matches.append((i, shift(j)))
        lone_b = [shift(j) for j in lone_b if j != index]

    new_obs = dataclasses.replace(
        obs, nodes=[n for k, n in enumerate(obs.nodes) if k != index]
    )
    new_labels = PairLabels(
        matches=tuple(matches),
        unmatched_a=tuple(sorted(lone_a)),
        unmatched_b=tuple(sorted(lone_b)),
    )
    return new_obs, new_labels


def augment_pair(
    obs_a: ClusterObservation,
    obs_b: ClusterObservation,
    labels: PairLabels,
    config: AugmentConfig,
    rng: np.random.Generator,
) -> tuple:
    """Apply one augmentation draw to a pair: a joint horizontal flip,
    optional single-node drops, then per-node box/score jitter."""
    if rng.random() < config.flip_prob:
        obs_a = flip_observation(obs_a)
        obs_b = flip_observation(obs_b)
    for side in ("a", "b"):
        obs = obs_a if side == "a" else obs_b
        droppable = [i for i, n in enumerate(obs.nodes) if n.is_cluster]
        if len(droppable) >= 2 and rng.random() < config.node_drop_prob:
            index = droppable[int(rng.integers(len(droppable)))]
            if side == "a":
                obs_a, labels = drop_node(obs_a, labels, "a", index)
            else:
                obs_b, labels = drop_node(obs_b, labels, "b", index)
    obs_a = jitter_nodes(obs_a, rng, config.bbox_jitter_px, config.score_jitter_std)
    obs_b = jitter_nodes(obs_b, rng, config.bbox_jitter_px, config.score_jitter_std)
    return obs_a, obs_b, labels
