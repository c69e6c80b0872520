"""Grid construction for detection nodes.

Positional grids pack geometry the matcher needs (how far, where in the
frame, what silhouette); visual grids carry appearance.  Both are plain
arrays: gradients never flow into feature construction.
"""

import numpy as np

from .types import POS_GRID, VIS_GRID

__all__ = ["bilinear_resize", "build_positional", "visual_from_crop"]


def bilinear_resize(channels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners bilinear resample of (C, H, W) or (H, W) arrays.

    Corner pixels map exactly to corner pixels; a resize to the source
    shape is the identity.
    """
    arr = np.asarray(channels, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected (C, H, W) or (H, W), got {arr.shape}")
    c, h, w = arr.shape
    if h < 1 or w < 1 or out_h < 1 or out_w < 1:
        raise ValueError("resize requires non-empty source and target")

    sy = np.arange(out_h) * ((h - 1) / (out_h - 1)) if out_h > 1 else np.zeros(out_h)
    sx = np.arange(out_w) * ((w - 1) / (out_w - 1)) if out_w > 1 else np.zeros(out_w)
    y0 = np.floor(sy).astype(np.intp)
    x0 = np.floor(sx).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0)[None, :, None]
    fx = (sx - x0)[None, None, :]

    tl = arr[:, y0[:, None], x0[None, :]]
    tr = arr[:, y0[:, None], x1[None, :]]
    bl = arr[:, y1[:, None], x0[None, :]]
    br = arr[:, y1[:, None], x1[None, :]]
    out = (
        tl * (1 - fy) * (1 - fx)
        + tr * (1 - fy) * fx
        + bl * fy * (1 - fx)
        + br * fy * fx
    )
    return out[0] if squeeze else out


def build_positional(
    disparity_crop: np.ndarray,
    seg_crop: np.ndarray,
    bbox: tuple,
    image_size: tuple,
    max_disparity: float,
) -> np.ndarray:
    """Build the (4, 64, 64) positional grid for one detection.

    Channels: disparity over the image-wide maximum, binary segmentation,
    and x / y pixel-centre coordinates over image width / height.  All
    channels land in [0, 1].

    Args:
        disparity_crop: (h, w) disparities aligned with the bbox crop.
        seg_crop: (h, w) segmentation (binarised at 0.5 if float).
        bbox: (x0, y0, x1, y1) of the crop in image coordinates.
        image_size: (width, height) of the full frame.
        max_disparity: normaliser; non-positive yields a zero channel.
    """
    disp = np.asarray(disparity_crop, dtype=np.float64)
    seg = np.asarray(seg_crop, dtype=np.float64)
    if disp.ndim != 2 or disp.size == 0:
        raise ValueError(f"disparity crop must be 2-D and non-empty, got {disp.shape}")
    if disp.shape != seg.shape:
        raise ValueError(f"crop shapes differ: {disp.shape} vs {seg.shape}")
    x0, y0, x1, y1 = bbox
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"bbox must have positive area, got {bbox}")
    img_w, img_h = image_size
    if img_w <= 0 or img_h <= 0:
        raise ValueError("image size must be positive")

    h, w = disp.shape
    if max_disparity > 0:
        ch_d = np.clip(disp, 0.0, max_disparity) / max_disparity
    else:
        ch_d = np.zeros_like(disp)
    ch_s = (seg >= 0.5).astype(np.float64)
    xs = (x0 + (np.arange(w) + 0.5) * (x1 - x0) / w) / img_w
    ys = (y0 + (np.arange(h) + 0.5) * (y1 - y0) / h) / img_h
    ch_x = np.broadcast_to(xs[None, :], (h, w))
    ch_y = np.broadcast_to(ys[:, None], (h, w))

    grid = np.stack([ch_d, ch_s, ch_x, ch_y])
    out = bilinear_resize(grid, POS_GRID, POS_GRID)
    return np.clip(out, 0.0, 1.0)


def visual_from_crop(crop: np.ndarray, out_channels: int, seed: int = 0) -> np.ndarray:
    """Fixed (untrained) appearance grid from a raw image crop.

    Pools each colour channel to 7x7 and mixes channels through a seeded
    random projection.  A stand-in for a learned appearance extractor so
    image experiments can run end to end.
    """
    arr = np.asarray(crop, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[-1] in (1, 3) and arr.shape[0] not in (1, 3):
        arr = np.moveaxis(arr, -1, 0)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected an image crop, got shape {crop.shape}")
    pooled = bilinear_resize(arr, VIS_GRID, VIS_GRID)
    rng = np.random.default_rng(seed)
    mix = rng.normal(0.0, 1.0 / np.sqrt(arr.shape[0]), size=(out_channels, arr.shape[0]))
    return np.einsum("oc,chw->ohw", mix, pooled)
