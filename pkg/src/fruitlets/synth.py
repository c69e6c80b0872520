"""Deterministic synthetic orchard data.

Generates paired-day cluster observations with exact ground truth for
training and evaluating the matcher, and standalone mask/disparity scenes
with known metric size for exercising the sizing chain.  Everything is a
pure function of (config, index): the same inputs reproduce the same
bytes, so datasets can be stored as a config plus index list.

Geometry model: pinhole camera, fronto-parallel elliptical fruitlets.  A
fruitlet of diameter D mm at depth Z mm spans D * focal / Z pixels along
its minor axis, and a surface at depth Z has stereo disparity
baseline * focal / Z, which makes the rendered scenes exactly consistent
with the sizing formula diameter = minor_px * baseline / disparity.
"""

from dataclasses import dataclass

import numpy as np

from .assoc.features import build_positional
from .assoc.types import VIS_GRID, ClusterObservation, DetectionNode, PairLabels
from .sizing import DisparityPatch

__all__ = [
    "SceneConfig",
    "NodeTruth",
    "PairTruth",
    "SizingScene",
    "ellipse_coverage",
    "gen_pair",
    "gen_sizing_scene",
    "render_sizing_scene",
    "SyntheticPairs",
]

# stream tags keeping pair, sizing, and shared-embedding draws independent
_STREAM_PAIR = 11
_STREAM_SIZING = 13
_STREAM_EMBED = 5
_STREAM_TAG = 6


@dataclass(frozen=True)
class SceneConfig:
    """Knobs for the synthetic orchard.

    The association pairs render at ``focal_px`` (coarser, fast); sizing
    scenes use ``sizing_focal_px`` so fruitlets span enough pixels for
    sub-percent rasterisation error.
    """

    seed: int = 0
    fruitlets_min: int = 2
    fruitlets_max: int = 6
    growth_mm_range: tuple = (1.0, 4.5)
    drop_prob: float = 0.15
    camera_shift_px: float = 40.0
    jitter_px: float = 3.0
    depth_jitter_mm: float = 8.0
    angle_jitter: float = 0.1
    appearance_drift_std: float = 0.15
    score_range: tuple = (0.7, 0.99)
    baseline_mm: float = 80.0
    depth_range_mm: tuple = (450.0, 650.0)
    focal_px: float = 3000.0
    sizing_focal_px: float = 14000.0
    diameter_mm_range: tuple = (6.0, 10.0)
    sizing_diameter_mm_range: tuple = (8.0, 14.0)
    aspect_range: tuple = (1.05, 1.35)
    image_width: int = 1280
    image_height: int = 960
    visual_channels: int = 32
    latent_dim: int = 12
    tag_mm: float = 20.0
    distractor_prob: float = 0.0
    day_a: str = "2021-05-21"
    day_b: str = "2021-05-25"

    def __post_init__(self):
        if not (1 <= self.fruitlets_min <= self.fruitlets_max):
            raise ValueError("fruitlet count range must be non-empty and positive")
        for name in ("growth_mm_range", "depth_range_mm", "diameter_mm_range",
                     "sizing_diameter_mm_range", "aspect_range", "score_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} must be ordered, got ({lo}, {hi})")
        for name in ("drop_prob", "distractor_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if min(self.baseline_mm, self.focal_px, self.sizing_focal_px,
               self.depth_range_mm[0]) <= 0:
            raise ValueError("camera model parameters must be positive")

    @property
    def max_disparity(self) -> float:
        """Image-wide disparity normaliser: the nearest configured surface."""
        return self.baseline_mm * self.focal_px / self.depth_range_mm[0]


@dataclass(frozen=True)
class NodeTruth:
    """Generator-side truth for one rendered fruitlet node."""

    fruitlet_id: str
    diameter_mm: float
    minor_px: float
    major_px: float
    angle: float
    disparity: float
    depth_mm: float
    center: tuple


@dataclass(frozen=True)
class PairTruth:
    """Ground truth for one generated observation pair."""

    cluster_id: str
    labels: PairLabels
    truth_a: tuple  # aligned with obs_a.nodes, None where no fruitlet truth
    truth_b: tuple


@dataclass(frozen=True)
class SizingScene:
    """A known-size fruitlet rendered as mask + disparity."""

    prob_mask: np.ndarray
    patch: DisparityPatch
    baseline_mm: float
    true_diameter_mm: float
    true_minor_px: float
    true_major_px: float
    true_angle: float
    true_center: tuple
    depth_mm: float


def ellipse_coverage(
    h: int,
    w: int,
    cx: float,
    cy: float,
    semi_major: float,
    semi_minor: float,
    angle: float,
    supersample: int = 4,
) -> np.ndarray:
    """Anti-aliased ellipse raster: per-pixel coverage fraction in [0, 1].

    Pixel centres sit at integer coordinates; each pixel is sampled on a
    supersample x supersample subgrid.
    """
    if supersample < 1:
        raise ValueError("supersample must be >= 1")
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    xs = np.arange(w)[None, None, :, None] + offs[None, None, None, :]
    ca, sa = np.cos(angle), np.sin(angle)
    out = np.empty((h, w))
    block = max(1, (1 << 22) // max(1, w * supersample * supersample))
    for r0 in range(0, h, block):
        r1 = min(h, r0 + block)
        ys = np.arange(r0, r1)[:, None, None, None] + offs[None, :, None, None]
        dx = xs - cx
        dy = ys - cy
        u = (dx * ca + dy * sa) / semi_major
        v = (-dx * sa + dy * ca) / semi_minor
        inside = (u * u + v * v) <= 1.0
        out[r0:r1] = inside.mean(axis=(1, 3))
    return out


def _visual_embed(config: SceneConfig) -> np.ndarray:
    """Fixed linear map from latent appearance vectors to visual grids."""
    rng = np.random.default_rng([config.seed, _STREAM_EMBED])
    n_out = config.visual_channels * VIS_GRID * VIS_GRID
    return rng.normal(0.0, 1.0 / np.sqrt(config.latent_dim), size=(n_out, config.latent_dim))


def _tag_latent(config: SceneConfig) -> np.ndarray:
    rng = np.random.default_rng([config.seed, _STREAM_TAG])
    return rng.normal(0.0, 1.0, config.latent_dim)


def _axis_extents(semi_major: float, semi_minor: float, angle: float) -> tuple:
    """Half-width and half-height of an ellipse's axis-aligned bounds."""
    ca, sa = np.cos(angle), np.sin(angle)
    ex = np.sqrt((semi_major * ca) ** 2 + (semi_minor * sa) ** 2)
    ey = np.sqrt((semi_major * sa) ** 2 + (semi_minor * ca) ** 2)
    return float(ex), float(ey)


def _render_fruitlet_node(
    config: SceneConfig,
    rng: np.random.Generator,
    embed: np.ndarray,
    *,
    fruitlet_id: str,
    center: tuple,
    depth_mm: float,
    diameter_mm: float,
    aspect: float,
    angle: float,
    latent: np.ndarray,
    is_cluster: bool,
    with_raw: bool,
) -> tuple:
    """Render one fruitlet as a DetectionNode; returns (node, NodeTruth)."""
    f = config.focal_px
    minor_px = diameter_mm * f / depth_mm
    semi_minor = minor_px / 2.0
    semi_major = semi_minor * aspect
    ex, ey = _axis_extents(semi_major, semi_minor, angle)

    w_img, h_img = config.image_width, config.image_height
    margin = 1.18
    px = float(np.clip(center[0], ex * margin + 2, w_img - ex * margin - 3))
    py = float(np.clip(center[1], ey * margin + 2, h_img - ey * margin - 3))

    x0 = int(np.floor(px - ex * margin))
    x1 = int(np.ceil(px + ex * margin)) + 1
    y0 = int(np.floor(py - ey * margin))
    y1 = int(np.ceil(py + ey * margin)) + 1
    bbox = (x0, y0, x1, y1)
    ch, cw = y1 - y0, x1 - x0

    seg = ellipse_coverage(ch, cw, px - x0, py - y0, semi_major, semi_minor, angle)
    d_fruit = config.baseline_mm * f / depth_mm
    d_back = config.baseline_mm * f / (depth_mm + rng.uniform(150.0, 350.0))
    disparity = np.where(seg >= 0.5, d_fruit, d_back)

    positional = build_positional(
        disparity, seg, bbox, (w_img, h_img), config.max_disparity
    )
    visual = (embed @ latent).reshape(config.visual_channels, VIS_GRID, VIS_GRID)
    node = DetectionNode(
        bbox=bbox,
        score=float(rng.uniform(*config.score_range)),
        is_tag=False,
        is_cluster=is_cluster,
        positional=positional,
        visual=visual,
        fruitlet_id=fruitlet_id,
        mask_crop=seg if with_raw else None,
        disparity_crop=disparity if with_raw else None,
    )
    truth = NodeTruth(
        fruitlet_id=fruitlet_id,
        diameter_mm=diameter_mm,
        minor_px=minor_px,
        major_px=minor_px * aspect,
        angle=angle,
        disparity=d_fruit,
        depth_mm=depth_mm,
        center=(px, py),
    )
    return node, truth


def _render_tag_node(
    config: SceneConfig,
    rng: np.random.Generator,
    embed: np.ndarray,
    center: tuple,
    depth_mm: float,
    latent: np.ndarray,
) -> DetectionNode:
    f = config.focal_px
    side = config.tag_mm * f / depth_mm
    w_img, h_img = config.image_width, config.image_height
    px = float(np.clip(center[0], side / 2 + 2, w_img - side / 2 - 3))
    py = float(np.clip(center[1], side / 2 + 2, h_img - side / 2 - 3))
    x0, y0 = int(np.floor(px - side / 2)), int(np.floor(py - side / 2))
    x1, y1 = x0 + int(np.ceil(side)), y0 + int(np.ceil(side))
    ch, cw = y1 - y0, x1 - x0
    seg = np.ones((ch, cw))
    d_tag = config.baseline_mm * f / depth_mm
    disparity = np.full((ch, cw), d_tag)
    positional = build_positional(
        disparity, seg, (x0, y0, x1, y1), (w_img, h_img), config.max_disparity
    )
    visual = (embed @ latent).reshape(config.visual_channels, VIS_GRID, VIS_GRID)
    return DetectionNode(
        bbox=(x0, y0, x1, y1),
        score=float(rng.uniform(0.85, 0.99)),
        is_tag=True,
        is_cluster=False,
        positional=positional,
        visual=visual,
        fruitlet_id="tag",
    )


def gen_pair(config: SceneConfig, index: int, with_raw: bool = False) -> tuple:
    """Generate one cluster observed on two days.

    Day B applies per-fruitlet growth, camera shift, positional and depth
    jitter, appearance drift, and resampled scores.  Each fruitlet is
    dropped from at most one side (detection miss / occlusion), so every
    clustered fruitlet lands in exactly one of: a match, unmatched-A, or
    unmatched-B.

    Args:
        config: generation knobs.
        index: pair index; (config.seed, index) fully determines output.
        with_raw: keep per-node mask and disparity crops (needed for
            sizing; omitted by default to keep observations light).

    Returns:
        (obs_a, obs_b, PairTruth).
    """
    rng = np.random.default_rng([config.seed, _STREAM_PAIR, index])
    embed = _visual_embed(config)
    cluster_id = f"cluster{index:05d}"

    k = int(rng.integers(config.fruitlets_min, config.fruitlets_max + 1))
    w_img, h_img = config.image_width, config.image_height
    center = np.array(
        [rng.uniform(0.3 * w_img, 0.7 * w_img), rng.uniform(0.4 * h_img, 0.65 * h_img)]
    )
    cluster_depth = rng.uniform(*config.depth_range_mm)
    shift = rng.uniform(-config.camera_shift_px, config.camera_shift_px, 2)

    fruitlets = []
    for u in range(k):
        ang = 2.0 * np.pi * u / k + rng.uniform(-0.3, 0.3)
        radius = rng.uniform(45.0, 85.0)
        pos = center + radius * np.array([np.cos(ang), np.sin(ang)])
        dia_a = rng.uniform(*config.diameter_mm_range)
        dropped = rng.random() < config.drop_prob
        fruitlets.append(
            dict(
                fid=f"f{u}",
                pos=pos,
                depth=cluster_depth + rng.uniform(-25.0, 25.0),
                dia_a=dia_a,
                dia_b=dia_a + rng.uniform(*config.growth_mm_range),
                aspect=rng.uniform(*config.aspect_range),
                angle=rng.uniform(0.0, np.pi),
                latent=rng.normal(0.0, 1.0, config.latent_dim),
                drop_side=("a" if rng.random() < 0.5 else "b") if dropped else None,
            )
        )

    # one shared base order; per-side drops collapse indices independently
    order = list(rng.permutation(k + 1))  # slot k is the tag
    tag_base = _tag_latent(config)

    def build_side(day: str, side: str) -> tuple:
        nodes, truths, index_of = [], [], {}
        for slot in order:
            if slot == k:
                tag_center = center + np.array([0.0, -140.0])
                tag_depth = cluster_depth
                latent = tag_base + rng.normal(0.0, 0.05, config.latent_dim)
                if side == "b":
                    tag_center = tag_center + shift
                nodes.append(
                    _render_tag_node(config, rng, embed, tuple(tag_center), tag_depth, latent)
                )
                truths.append(None)
                continue
            fr = fruitlets[slot]
            if fr["drop_side"] == side:
                continue
            if side == "a":
                pos, depth, dia, angle = fr["pos"], fr["depth"], fr["dia_a"], fr["angle"]
                latent = fr["latent"]
            else:
                pos = fr["pos"] + shift + rng.normal(0.0, config.jitter_px, 2)
                depth = fr["depth"] + rng.normal(0.0, config.depth_jitter_mm)
                dia = fr["dia_b"]
                angle = (fr["angle"] + rng.normal(0.0, config.angle_jitter)) % np.pi
                latent = fr["latent"] + rng.normal(
                    0.0, config.appearance_drift_std, config.latent_dim
                )
            node, truth = _render_fruitlet_node(
                config,
                rng,
                embed,
                fruitlet_id=fr["fid"],
                center=tuple(pos),
                depth_mm=float(depth),
                diameter_mm=float(dia),
                aspect=fr["aspect"],
                angle=float(angle),
                latent=latent,
                is_cluster=True,
                with_raw=with_raw,
            )
            index_of[fr["fid"]] = len(nodes)
            nodes.append(node)
            truths.append(truth)
        if rng.random() < config.distractor_prob:
            off = rng.uniform(160.0, 240.0) * np.array(
                [np.cos(rng.uniform(0, 2 * np.pi)), np.sin(rng.uniform(0, 2 * np.pi))]
            )
            node, truth = _render_fruitlet_node(
                config,
                rng,
                embed,
                fruitlet_id=f"intruder_{side}",
                center=tuple(center + off),
                depth_mm=float(cluster_depth + rng.uniform(-40.0, 40.0)),
                diameter_mm=float(rng.uniform(*config.diameter_mm_range)),
                aspect=float(rng.uniform(*config.aspect_range)),
                angle=float(rng.uniform(0.0, np.pi)),
                latent=rng.normal(0.0, 1.0, config.latent_dim),
                is_cluster=False,
                with_raw=with_raw,
            )
            nodes.append(node)
            truths.append(truth)
        obs = ClusterObservation(
            cluster_id=cluster_id,
            day=day,
            image_width=w_img,
            image_height=h_img,
            nodes=nodes,
        )
        return obs, truths, index_of

    obs_a, truth_a, idx_a = build_side(config.day_a, "a")
    obs_b, truth_b, idx_b = build_side(config.day_b, "b")

    matches, lone_a, lone_b = [], [], []
    for fr in fruitlets:
        fid = fr["fid"]
        if fr["drop_side"] == "a":
            lone_b.append(idx_b[fid])
        elif fr["drop_side"] == "b":
            lone_a.append(idx_a[fid])
        else:
            matches.append((idx_a[fid], idx_b[fid]))
    labels = PairLabels(
        matches=tuple(matches), unmatched_a=tuple(sorted(lone_a)), unmatched_b=tuple(sorted(lone_b))
    )
    truth = PairTruth(
        cluster_id=cluster_id, labels=labels, truth_a=tuple(truth_a), truth_b=tuple(truth_b)
    )
    return obs_a, obs_b, truth


def render_sizing_scene(
    config: SceneConfig,
    diameter_mm: float,
    depth_mm: float,
    aspect: float,
    angle: float,
    sub_xy: tuple = (0.0, 0.0),
    background_gap_mm: float = 250.0,
) -> SizingScene:
    """Render one sizing scene with fully specified geometry.

    Raises:
        ValueError: depth outside the configured range, or the ellipse
            does not fit in the patch.
    """
    zlo, zhi = config.depth_range_mm
    if not zlo <= depth_mm <= zhi:
        raise ValueError(f"depth {depth_mm} outside configured range ({zlo}, {zhi})")
    f = config.sizing_focal_px
    minor_px = diameter_mm * f / depth_mm
    semi_minor = minor_px / 2.0
    semi_major = semi_minor * aspect
    ex, ey = _axis_extents(semi_major, semi_minor, angle)
    w = int(np.ceil(2 * ex * 1.25)) + 9
    h = int(np.ceil(2 * ey * 1.25)) + 9
    cx = w / 2.0 + sub_xy[0]
    cy = h / 2.0 + sub_xy[1]
    if cx - ex < 1 or cx + ex > w - 2 or cy - ey < 1 or cy + ey > h - 2:
        raise ValueError("ellipse exceeds patch bounds")
    mask = ellipse_coverage(h, w, cx, cy, semi_major, semi_minor, angle)
    d_fruit = config.baseline_mm * f / depth_mm
    d_back = config.baseline_mm * f / (depth_mm + background_gap_mm)
    disparity = np.where(mask >= 0.5, d_fruit, d_back)
    return SizingScene(
        prob_mask=mask,
        patch=DisparityPatch(values=disparity, bbox=(0, 0, w, h)),
        baseline_mm=config.baseline_mm,
        true_diameter_mm=diameter_mm,
        true_minor_px=minor_px,
        true_major_px=minor_px * aspect,
        true_angle=angle,
        true_center=(cx, cy),
        depth_mm=depth_mm,
    )


def gen_sizing_scene(config: SceneConfig, index: int) -> SizingScene:
    """Random sizing scene; (config.seed, index) determines everything."""
    rng = np.random.default_rng([config.seed, _STREAM_SIZING, index])
    return render_sizing_scene(
        config,
        diameter_mm=float(rng.uniform(*config.sizing_diameter_mm_range)),
        depth_mm=float(rng.uniform(*config.depth_range_mm)),
        aspect=float(rng.uniform(*config.aspect_range)),
        angle=float(rng.uniform(0.0, np.pi)),
        sub_xy=tuple(rng.uniform(-0.5, 0.5, 2)),
        background_gap_mm=float(rng.uniform(150.0, 350.0)),
    )


class SyntheticPairs:
    """Lazy sequence of generated pairs, regenerated on each access.

    Keeps memory flat during training at the cost of re-rendering; pass
    ``cache=True`` to materialise everything on first access instead.
    """

    def __init__(self, config: SceneConfig, indices, with_raw: bool = False, cache: bool = False):
        self.config = config
        self.indices = list(indices)
        self.with_raw = with_raw
        self._cache = {} if cache else None

    def __len__(self):
        return len(self.indices)

    def __getitem__(self, i: int) -> tuple:
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        item = gen_pair(self.config, self.indices[i], with_raw=self.with_raw)
        if self._cache is not None:
            self._cache[i] = item
        return item
