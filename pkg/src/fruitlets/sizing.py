"""Per-detection metric sizing from segmentation masks and stereo disparity.

The pipeline is: probability mask -> binary mask -> outer contour of the
largest 8-connected component -> direct least-squares ellipse fit -> metric
diameter from the fitted minor axis and the disparity inside a small window
at the segmentation centroid:

    diameter_mm = minor_axis_px * baseline_mm / disparity

Pixel coordinates are (x, y) with x along columns and y along rows; a
pixel's centre is at its integer index.  Axis lengths are full lengths
(twice the semi-axis).
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

__all__ = [
    "SizingError",
    "EmptyMaskError",
    "FitFailedError",
    "SizingFailedError",
    "EllipseParams",
    "DisparityPatch",
    "SizeMeasurement",
    "threshold_mask",
    "largest_component",
    "extract_contour",
    "fit_ellipse",
    "compute_size",
    "size_from_mask",
]

_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)

# clockwise Moore neighbourhood in (dr, dc), starting west
_MOORE = ((0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1))


class SizingError(Exception):
    """Base class for sizing failures."""


class EmptyMaskError(SizingError):
    """Thresholding left no foreground pixels."""


class FitFailedError(SizingError):
    """Contour points do not determine an ellipse."""


class SizingFailedError(SizingError):
    """No usable disparity in the measurement window."""


@dataclass(frozen=True)
class EllipseParams:
    """Canonical ellipse: centre, full axis lengths, axis angle in [0, pi).

    ``conic`` holds the fitted coefficients (a, b, c, d, e, f) of
    a x^2 + b xy + c y^2 + d x + e y + f = 0, scaled so 4ac - b^2 = 1.
    """

    cx: float
    cy: float
    major_px: float
    minor_px: float
    angle: float
    conic: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if not (self.major_px >= self.minor_px > 0):
            raise ValueError(
                f"axis lengths must satisfy major >= minor > 0, got {self.major_px}, {self.minor_px}"
            )


@dataclass(frozen=True)
class DisparityPatch:
    """Disparity crop aligned with a detection crop.

    Args:
        values: (h, w) disparities in pixels; non-positive or non-finite
            entries are treated as invalid.
        bbox: (x0, y0, x1, y1) of the detection in image coordinates.
    """

    values: np.ndarray
    bbox: tuple

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if v.ndim != 2 or v.size == 0:
            raise ValueError(f"disparity patch must be 2-D and non-empty, got shape {v.shape}")
        x0, y0, x1, y1 = self.bbox
        if not (x1 > x0 and y1 > y0):
            raise ValueError(f"bbox must have positive area, got {self.bbox}")


@dataclass(frozen=True)
class SizeMeasurement:
    diameter_mm: float
    minor_px: float
    disparity: float
    baseline_mm: float


def threshold_mask(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Binarise a probability mask; pixels with value >= threshold are on.

    Raises:
        ValueError: threshold outside (0, 1) or probabilities outside [0, 1].
        EmptyMaskError: no pixel survives.
    """
    prob = np.asarray(prob, dtype=np.float64)
    if prob.ndim != 2:
        raise ValueError(f"probability mask must be 2-D, got shape {prob.shape}")
    if not (0.0 < threshold < 1.0):
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    if prob.size and (prob.min() < 0.0 or prob.max() > 1.0):
        raise ValueError("mask values must lie in [0, 1]")
    out = prob >= threshold
    if not out.any():
        raise EmptyMaskError("no pixel at or above threshold")
    return out


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Largest 8-connected foreground component; ties keep the component
    whose first pixel appears earliest in row-major order."""
    mask = np.asarray(mask, dtype=bool)
    labels, count = ndimage.label(mask, structure=_EIGHT_CONNECTED)
    if count == 0:
        raise EmptyMaskError("mask has no foreground")
    areas = np.bincount(labels.reshape(-1))
    areas[0] = 0
    # ndimage assigns labels in scan order, so argmax ties resolve to the
    # earliest-seen component
    return labels == int(np.argmax(areas))


def extract_contour(mask: np.ndarray) -> np.ndarray:
    """Outer boundary of the largest 8-connected component.

    Pixels are traced clockwise by Moore neighbourhood following from the
    first foreground pixel in row-major order; each boundary pixel appears
    once, in first-visit order.

    Returns:
        (n, 2) int array of (x, y) pixel coordinates.
    """
    comp = largest_component(mask)
    rows, cols = np.nonzero(comp)
    start = (int(rows[0]), int(cols[0]))  # nonzero is row-major

    h, w = comp.shape

    def on(r, c):
        return 0 <= r < h and 0 <= c < w and comp[r, c]

    trace = [start]
    backtrack = (start[0], start[1] - 1)  # west of start is background
    pixel = start
    seen_states = set()
    while True:
        state = (pixel, backtrack)
        if state in seen_states:
            break
        seen_states.add(state)
        rel = (backtrack[0] - pixel[0], backtrack[1] - pixel[1])
        k = _MOORE.index(rel)
        found = None
        for step in range(1, 9):
            dr, dc = _MOORE[(k + step) % 8]
            cand = (pixel[0] + dr, pixel[1] + dc)
            if on(*cand):
                found = cand
                break
            backtrack = cand
        if found is None:
            break  # isolated pixel
        pixel = found
        trace.append(pixel)

    uniq = list(dict.fromkeys(trace))
    return np.array([(c, r) for r, c in uniq], dtype=np.int64)


def fit_ellipse(points: np.ndarray) -> EllipseParams:
    """Direct least-squares ellipse fit with the constraint 4ac - b^2 = 1.

    Uses the numerically stable split of the design matrix into quadratic
    and linear blocks, reducing the constrained problem to a 3x3
    eigenproblem with exactly one admissible eigenvector.

    Args:
        points: (n, 2) array of (x, y) samples, n >= 5, not all collinear.

    Raises:
        FitFailedError: fewer than 5 distinct points, or no elliptical
            solution exists (degenerate geometry).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"points must be (n, 2), got {pts.shape}")
    if np.unique(pts, axis=0).shape[0] < 5:
        raise FitFailedError("need at least 5 distinct points")

    mx, my = pts.mean(axis=0)
    xs = pts[:, 0] - mx
    ys = pts[:, 1] - my

    d1 = np.column_stack([xs * xs, xs * ys, ys * ys])
    d2 = np.column_stack([xs, ys, np.ones_like(xs)])
    s1 = d1.T @ d1
    s2 = d1.T @ d2
    s3 = d2.T @ d2
    try:
        t = -np.linalg.solve(s3, s2.T)
    except np.linalg.LinAlgError as err:
        raise FitFailedError(f"degenerate point configuration: {err}") from err
    m = s1 + s2 @ t
    reduced = np.vstack([m[2] / 2.0, -m[1], m[0] / 2.0])
    eigvals, eigvecs = np.linalg.eig(reduced)
    a1 = None
    for i in range(3):
        v = np.real(eigvecs[:, i])
        if 4.0 * v[0] * v[2] - v[1] ** 2 > 0:
            a1 = v
            break
    if a1 is None:
        raise FitFailedError("no elliptical solution for these points")
    conic_c = np.concatenate([a1, t @ a1])

    # back to uncentered coordinates
    a, b, c, d, e, f = conic_c
    d0 = d - 2 * a * mx - b * my
    e0 = e - 2 * c * my - b * mx
    f0 = f + a * mx * mx + b * mx * my + c * my * my - d * mx - e * my
    conic = np.array([a, b, c, d0, e0, f0])
    conic /= np.sqrt(4 * conic[0] * conic[2] - conic[1] ** 2)
    if conic[0] + conic[2] < 0:
        conic = -conic

    return _conic_to_canonical(conic)


def _conic_to_canonical(conic: np.ndarray) -> EllipseParams:
    a, b, c, d, e, f = conic
    quad = np.array([[a, b / 2.0], [b / 2.0, c]])
    try:
        centre = np.linalg.solve(2.0 * quad, [-d, -e])
    except np.linalg.LinAlgError as err:
        raise FitFailedError(f"singular quadratic form: {err}") from err
    cx, cy = centre
    # conic value at the centre; (p-m)^T Q (p-m) = -value on the curve
    value = a * cx * cx + b * cx * cy + c * cy * cy + d * cx + e * cy + f
    lam, vecs = np.linalg.eigh(quad)
    if lam[0] <= 0 or -value <= 0:
        raise FitFailedError("conic is not a real ellipse")
    major = 2.0 * float(np.sqrt(-value / lam[0]))
    minor = 2.0 * float(np.sqrt(-value / lam[1]))
    if abs(lam[1] - lam[0]) <= 1e-12 * max(abs(lam[0]), abs(lam[1])):
        angle = 0.0  # circle: orientation is arbitrary, report 0
    else:
        vx, vy = vecs[:, 0]  # eigenvector of the smaller eigenvalue = major axis
        angle = float(np.arctan2(vy, vx)) % np.pi
    return EllipseParams(
        cx=float(cx),
        cy=float(cy),
        major_px=major,
        minor_px=minor,
        angle=angle,
        conic=tuple(float(v) for v in conic),
    )


def compute_size(
    ellipse: EllipseParams,
    patch: DisparityPatch,
    baseline_mm: float,
    region_frac: float = 0.25,
    centroid: tuple | None = None,
) -> SizeMeasurement:
    """Metric diameter from the fitted minor axis and local disparity.

    The disparity is the maximum valid value inside a square window of
    side ``region_frac * min(bbox_w, bbox_h)`` centred on ``centroid``
    (crop-local (x, y); the ellipse centre when omitted).  The maximum is
    used because the fruitlet is the nearest surface in its own crop.

    Raises:
        SizingFailedError: window empty or no positive finite disparity.
    """
    if baseline_mm <= 0:
        raise ValueError(f"baseline must be positive, got {baseline_mm}")
    if not (0.0 < region_frac <= 1.0):
        raise ValueError(f"region_frac must lie in (0, 1], got {region_frac}")
    x0, y0, x1, y1 = patch.bbox
    side = region_frac * min(x1 - x0, y1 - y0)
    cx, cy = centroid if centroid is not None else (ellipse.cx, ellipse.cy)
    h, w = patch.values.shape
    half = side / 2.0
    c0 = max(int(np.floor(cx - half)), 0)
    c1 = min(int(np.ceil(cx + half)) + 1, w)
    r0 = max(int(np.floor(cy - half)), 0)
    r1 = min(int(np.ceil(cy + half)) + 1, h)
    if c0 >= c1 or r0 >= r1:
        raise SizingFailedError("measurement window is outside the patch")
    window = patch.values[r0:r1, c0:c1]
    valid = window[np.isfinite(window) & (window > 0)]
    if valid.size == 0:
        raise SizingFailedError("no valid disparity in the measurement window")
    disparity = float(valid.max())
    return SizeMeasurement(
        diameter_mm=ellipse.minor_px * baseline_mm / disparity,
        minor_px=ellipse.minor_px,
        disparity=disparity,
        baseline_mm=float(baseline_mm),
    )


def size_from_mask(
    prob_mask: np.ndarray,
    patch: DisparityPatch,
    baseline_mm: float,
    threshold: float = 0.5,
    region_frac: float = 0.25,
) -> tuple[SizeMeasurement, EllipseParams]:
    """Full sizing chain for one detection crop.

    Thresholds the probability mask, fits an ellipse to the outer contour
    of its largest component, and sizes it against the disparity patch with
    the window centred on the component centroid.
    """
    binary = threshold_mask(prob_mask, threshold)
    comp = largest_component(binary)
    contour = extract_contour(comp)
    ellipse = fit_ellipse(contour.astype(np.float64))
    rows, cols = np.nonzero(comp)
    centroid = (float(cols.mean()), float(rows.mean()))
    measurement = compute_size(
        ellipse, patch, baseline_mm, region_frac=region_frac, centroid=centroid
    )
    return measurement, ellipse
