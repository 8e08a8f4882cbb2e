"""Crisp forward renderer: layout, per-effect alpha maps, source-over compositing.

This is the production renderer for edited documents and the ground-truth
oracle for recovery tests. Per pixel, each effect layer blends as

    c <- (1 - alpha_k) * c + alpha_k * color_k

in the fixed order (shadow, fill, border). Border masks are stored in the
atlas as dilations that contain the glyph ink; at composite time the border
layer is masked by (1 - fill) so the stroke never paints over the fill body.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import imaging
from .atlas import BORDER_BINS, GlyphAtlas
from .imaging import Rect

MAX_CANVAS_SIDE = 16384

RGB = tuple[float, float, float]


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class FillStyle:
    color: RGB = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class BorderStyle:
    visible: bool = False
    width_bin: int = 3
    color: RGB = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class ShadowStyle:
    visible: bool = False
    blur: float = 0.0
    offset_x: float = 0.0
    offset_y: float = 0.0
    color: RGB = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class EffectSet:
    fill: FillStyle = field(default_factory=FillStyle)
    border: BorderStyle = field(default_factory=BorderStyle)
    shadow: ShadowStyle = field(default_factory=ShadowStyle)

    def validate(self) -> None:
        for name, color in (
            ("fill", self.fill.color),
            ("border", self.border.color),
            ("shadow", self.shadow.color),
        ):
            if len(color) != 3 or any(not (0.0 <= c <= 1.0) for c in color):
                raise ValueError(f"{name} color must be RGB in [0,1], got {color}")
        if self.border.width_bin not in BORDER_BINS:
            raise ValueError(f"border width_bin must be in {BORDER_BINS}")
        if self.shadow.blur < 0:
            raise ValueError("shadow blur must be >= 0")


@dataclass(frozen=True)
class TextElement:
    text: str
    font_index: int
    font_size: float
    origin: tuple[float, float]  # baseline-left, pixels
    effects: EffectSet = field(default_factory=EffectSet)
    per_char_offsets: tuple[tuple[float, float], ...] | None = None

    def validate(self, atlas: GlyphAtlas | None = None) -> None:
        if not self.text:
            raise ValueError("element text is empty")
        if self.font_size <= 0:
            raise ValueError(f"font_size must be > 0, got {self.font_size}")
        if self.per_char_offsets is not None and len(self.per_char_offsets) != len(self.text):
            raise ValueError("per_char_offsets length must match text length")
        if atlas is not None:
            if not (0 <= self.font_index < atlas.num_fonts):
                raise ValueError(f"font index {self.font_index} out of range")
            for ch in self.text:
                atlas.glyph_index(ch)
        self.effects.validate()


@dataclass(frozen=True)
class Document:
    canvas_width: int
    canvas_height: int
    background: np.ndarray  # RasterImage
    elements: tuple[TextElement, ...]

    def validate(self, atlas: GlyphAtlas | None = None) -> None:
        imaging.ensure_image(self.background, "background")
        if self.background.shape[:2] != (self.canvas_height, self.canvas_width):
            raise ValueError(
                f"background {self.background.shape[:2]} does not match canvas "
                f"{(self.canvas_height, self.canvas_width)}"
            )
        for el in self.elements:
            el.validate(atlas)


@dataclass(frozen=True)
class CharPlacement:
    char: str
    glyph_index: int
    box: Rect  # ink box in canvas pixels
    cell_to_canvas: np.ndarray  # (3, 3) homogeneous, cell px -> canvas px


def layout(element: TextElement, atlas: GlyphAtlas) -> tuple[list[CharPlacement], Rect]:
    """Place each character and return placements plus the word box (ink hull).

    Characters advance left-to-right by advance*font_size; per-character
    offsets nudge individual characters without shifting the ones after them.
    """
    element.validate(atlas)
    size = element.font_size
    ox, oy = element.origin
    scale = size / atlas.cell_em  # cell px -> canvas px
    placements: list[CharPlacement] = []
    pen_x = ox
    for i, ch in enumerate(element.text):
        gi = atlas.glyph_index(ch)
        m = atlas.glyph_metrics(element.font_index, gi)
        dx, dy = (0.0, 0.0)
        if element.per_char_offsets is not None:
            dx, dy = element.per_char_offsets[i]
        box = Rect(
            pen_x + m.bearing_x * size + dx,
            oy - m.bearing_y * size + dy,
            m.width * size,
            m.height * size,
        )
        # cell pixel (cell_x, cell_y) lands on the ink box corner
        t = np.array(
            [
                [scale, 0.0, box.x - m.cell_x * scale],
                [0.0, scale, box.y - m.cell_y * scale],
                [0.0, 0.0, 1.0],
            ],
            dtype=np.float64,
        )
        placements.append(CharPlacement(ch, gi, box, t))
        pen_x += m.advance * size
    word_box = Rect.hull([p.box for p in placements])
    return placements, word_box


def union_alpha(alphas: list[np.ndarray], shape: tuple[int, int]) -> np.ndarray:
    """Probabilistic union 1 - prod(1 - a) of overlapping coverage maps."""
    out = np.ones(shape, dtype=np.float64)
    for a in alphas:
        out *= 1.0 - a
    return 1.0 - out


def _place_cells(
    placements: list[CharPlacement],
    cells: list[np.ndarray],
    canvas_size: tuple[int, int],
) -> np.ndarray:
    w, h = canvas_size
    placed = []
    for p, cell in zip(placements, cells):
        inv = np.linalg.inv(p.cell_to_canvas)
        coeffs = (inv[0, 0], inv[0, 1], inv[0, 2], inv[1, 0], inv[1, 1], inv[1, 2])
        placed.append(imaging.affine_sample(cell.astype(np.float64), coeffs, w, h))
    return union_alpha(placed, (h, w))


def translate_alpha(alpha: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """Shift an alpha map by a fractional offset (bilinear, zero fill)."""
    h, w = alpha.shape
    out = imaging.affine_sample(alpha, (1.0, 0.0, -dx, 0.0, 1.0, -dy), w, h)
    return out


def render_effect_alphas(
    element: TextElement, atlas: GlyphAtlas, canvas_size: tuple[int, int]
) -> dict[str, np.ndarray]:
    """Rasterize the element's shadow/fill/border coverage on the canvas."""
    placements, _ = layout(element, atlas)
    w, h = canvas_size
    fill = _place_cells(
        placements, [atlas.fill[element.font_index, p.glyph_index] for p in placements], canvas_size
    )
    eff = element.effects
    if eff.border.visible:
        bi = eff.border.width_bin - 1
        border_raw = _place_cells(
            placements,
            [atlas.border[element.font_index, p.glyph_index, bi] for p in placements],
            canvas_size,
        )
        border = border_raw * (1.0 - fill)
    else:
        border = np.zeros((h, w), dtype=np.float64)
    if eff.shadow.visible:
        shadow = translate_alpha(fill, eff.shadow.offset_x, eff.shadow.offset_y)
        shadow = imaging.gaussian_blur(shadow, eff.shadow.blur)
    else:
        shadow = np.zeros((h, w), dtype=np.float64)
    return {"shadow": shadow, "fill": fill, "border": border}


def composite(background: np.ndarray, layers: list[tuple[np.ndarray, RGB]]) -> np.ndarray:
    """Source-over compositing of (alpha, color) layers, in the order given."""
    imaging.ensure_image(background, "background")
    out = background.astype(np.float64).copy()
    for alpha, color in layers:
        if alpha.shape != out.shape[:2]:
            raise imaging.DimensionMismatchError(
                f"layer alpha {alpha.shape} does not match canvas {out.shape[:2]}"
            )
        a = alpha[..., None]
        c = np.asarray(color, dtype=np.float64).reshape(1, 1, 3)
        out = (1.0 - a) * out + a * c
    return np.clip(out, 0.0, 1.0)


def _scaled_element(element: TextElement, s: float) -> TextElement:
    if s == 1.0:
        return element
    offsets = None
    if element.per_char_offsets is not None:
        offsets = tuple((dx * s, dy * s) for dx, dy in element.per_char_offsets)
    eff = element.effects
    return replace(
        element,
        font_size=element.font_size * s,
        origin=(element.origin[0] * s, element.origin[1] * s),
        per_char_offsets=offsets,
        effects=replace(
            eff,
            shadow=replace(
                eff.shadow,
                blur=eff.shadow.blur * s,
                offset_x=eff.shadow.offset_x * s,
                offset_y=eff.shadow.offset_y * s,
            ),
        ),
    )


def render_document(doc: Document, atlas: GlyphAtlas, scale: float = 1.0) -> np.ndarray:
    """Render the whole document at the given scale (geometry multiplies by it)."""
    if scale <= 0:
        raise RenderError(f"scale must be > 0, got {scale}")
    doc.validate(atlas)
    w = int(round(doc.canvas_width * scale))
    h = int(round(doc.canvas_height * scale))
    if w > MAX_CANVAS_SIDE or h > MAX_CANVAS_SIDE:
        raise RenderError(f"canvas {w}x{h} exceeds {MAX_CANVAS_SIDE} px per side")
    if scale == 1.0:
        canvas = doc.background.astype(np.float64)
    else:
        canvas = imaging.resize_bilinear(doc.background.astype(np.float64), w, h)
    for element in doc.elements:
        el = _scaled_element(element, scale)
        alphas = render_effect_alphas(el, atlas, (w, h))
        eff = el.effects
        layers = [
            (alphas["shadow"], eff.shadow.color),
            (alphas["fill"], eff.fill.color),
            (alphas["border"], eff.border.color),
        ]
        canvas = composite(canvas, layers)
    return canvas.astype(np.float32)
