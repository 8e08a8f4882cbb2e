"""Recover per-effect colors from an image given the effect alpha maps.

Inverts the source-over equation one layer at a time, top to bottom
(border, fill, shadow): y = (c - (1 - a) * ref) / a on pixels where the
effect is observable, then takes the mode of the y distribution. The first
peel references the known background image; each later peel references the
previously recovered effect color, matching how near-opaque pixels of each
effect dominate their own histogram.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import imaging
from .imaging import Rect

ALPHA_EPSILON = 0.05
HISTOGRAM_BINS = 32

DECOMPOSE_ORDER = ("border", "fill", "shadow")


class EffectNotObservableError(ValueError):
    """No pixel in the region has enough alpha to invert the layer."""


@dataclass(frozen=True)
class ColorEstimate:
    color: tuple[float, float, float]
    support_pixels: int
    histogram_peak_mass: float


def _region_slices(region: Rect | None, shape) -> tuple[slice, slice]:
    if region is None:
        return slice(0, shape[0]), slice(0, shape[1])
    x0, y0, x1, y1 = region.round_int()
    if x0 < 0 or y0 < 0 or x1 > shape[1] or y1 > shape[0]:
        raise ValueError(f"region {region} outside image bounds {shape[1]}x{shape[0]}")
    return slice(y0, y1), slice(x0, x1)


def invert_layer(
    image: np.ndarray,
    reference: np.ndarray,
    alpha: np.ndarray,
    region: Rect | None = None,
) -> np.ndarray:
    """Per-pixel layer colors y where alpha exceeds the observability threshold.

    Returns an (N, 3) array of y values clamped to [0, 1]; raises
    EffectNotObservableError when no pixel qualifies.
    """
    if image.shape != reference.shape or image.shape[:2] != alpha.shape:
        raise imaging.DimensionMismatchError(
            f"image {image.shape}, reference {reference.shape}, alpha {alpha.shape}"
        )
    ys, xs = _region_slices(region, alpha.shape)
    a = alpha[ys, xs].astype(np.float64)
    mask = a > ALPHA_EPSILON
    if not mask.any():
        raise EffectNotObservableError(
            f"effect not observable: no pixel with alpha > {ALPHA_EPSILON}"
        )
    c = image[ys, xs].astype(np.float64)[mask]
    ref = reference[ys, xs].astype(np.float64)[mask]
    av = a[mask][:, None]
    y = (c - (1.0 - av) * ref) / av
    return np.clip(y, 0.0, 1.0)


def modal_color(y: np.ndarray) -> ColorEstimate:
    """Mode of the joint color histogram (32 bins per channel), refined to the
    centroid of the modal bin's members.

    Ties between equally heavy bins break toward the lowest flat bin index in
    C order (r-major, then g, then b).
    """
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[1] != 3 or y.shape[0] == 0:
        raise ValueError(f"expected a non-empty (N, 3) array, got {y.shape}")
    bins = np.clip((y * HISTOGRAM_BINS).astype(np.int64), 0, HISTOGRAM_BINS - 1)
    flat = (bins[:, 0] * HISTOGRAM_BINS + bins[:, 1]) * HISTOGRAM_BINS + bins[:, 2]
    counts = np.bincount(flat, minlength=HISTOGRAM_BINS**3)
    modal = int(counts.argmax())  # first max = lowest flat index
    members = y[flat == modal]
    centroid = members.mean(axis=0)
    return ColorEstimate(
        color=tuple(float(v) for v in centroid),
        support_pixels=int(members.shape[0]),
        histogram_peak_mass=float(members.shape[0] / y.shape[0]),
    )


def decompose_colors(
    image: np.ndarray,
    background: np.ndarray,
    alphas: dict[str, np.ndarray],
    visibilities: dict[str, bool],
    region: Rect | None = None,
) -> dict[str, ColorEstimate | None]:
    """Peel effect colors in order (border, fill, shadow).

    `background` is the known/inpainted background; it references the first
    peel. After an effect's color is recovered, later peels reference a
    constant image of that color. Invisible effects are skipped and effects
    whose alpha never exceeds the threshold come back as None (undetermined).
    """
    imaging.ensure_image(image, "image")
    imaging.ensure_image(background, "background")
    estimates: dict[str, ColorEstimate | None] = {}
    reference = background
    for effect in DECOMPOSE_ORDER:
        visible = visibilities.get(effect, True) if effect != "fill" else True
        if not visible:
            estimates[effect] = None
            continue
        try:
            y = invert_layer(image, reference, alphas[effect], region)
        except EffectNotObservableError:
            estimates[effect] = None
            continue
        est = modal_color(y)
        estimates[effect] = est
        reference = np.full_like(background, 0.0, dtype=np.float64)
        reference[...] = np.asarray(est.color, dtype=np.float64)
    return estimates
