"""Pre-rendered glyph alpha maps for a fixed font set, with border variants.

Every (font, glyph) pair stores one fill mask plus five border masks (one per
stroke-width bin) in square cells, together with layout metrics in em units.
Cells are quantized to the 8-bit grid at build time so that the binary file
format round-trips bit-identically.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from PIL import Image as PILImage
from PIL import ImageDraw, ImageFont

GLYPH_SET = "".join(chr(c) for c in range(33, 127))  # 94 printable ASCII, no space
CELL_RESOLUTION = 64
EM_FRACTION = 0.8  # nominal em size relative to the cell
BORDER_BINS = (1, 2, 3, 4, 5)
_SUPERSAMPLE = 4

_MAGIC = b"TVATLAS1"
_SHARD_MAGIC = b"TVSHARD1"
_VERSION = 1


class AtlasError(ValueError):
    pass


class AtlasFormatError(AtlasError):
    """Bad magic, wrong version, or truncated atlas file."""


class GlyphCoverageError(AtlasError):
    """A font cannot rasterize a requested glyph, or the glyph overflows its cell."""


@dataclass(frozen=True)
class GlyphMetrics:
    """Layout metrics in em units, plus the exact ink position inside the cell.

    bearing_x/bearing_y locate the ink box relative to the pen: bearing_x is
    the ink left edge right of the pen, bearing_y the ink top above the
    baseline. cell_x/cell_y give the ink top-left corner in cell pixels, which
    pins down exactly where the centered ink was pasted at build time.
    """

    advance: float
    bearing_x: float
    bearing_y: float
    width: float
    height: float
    ascent: float
    descent: float
    cell_x: float
    cell_y: float


@dataclass(frozen=True)
class GlyphEntry:
    fill_alpha: np.ndarray  # (R, R) float32
    border_alphas: np.ndarray  # (5, R, R) float32
    metrics: GlyphMetrics


class GlyphAtlas:
    """Dense bank of pre-rendered glyph cells for a fixed, ordered font set."""

    def __init__(
        self,
        fonts: list[str],
        glyphs: str,
        cell_resolution: int,
        fill: np.ndarray,
        border: np.ndarray,
        metrics: np.ndarray,
        ascent: np.ndarray,
        descent: np.ndarray,
    ):
        if len(fonts) > 100:
            raise AtlasError(f"at most 100 fonts supported, got {len(fonts)}")
        self.fonts = list(fonts)
        self.glyphs = glyphs
        self.cell_resolution = int(cell_resolution)
        self.cell_em = EM_FRACTION * self.cell_resolution
        self.fill = fill  # (F, G, R, R) float32
        self.border = border  # (F, G, 5, R, R) float32
        self.metrics = metrics  # (F, G, 7) float64: adv, bx, by, w, h, cx, cy
        self.ascent = ascent  # (F,) float64
        self.descent = descent  # (F,) float64
        self._glyph_index = {ch: i for i, ch in enumerate(glyphs)}
        for arr in (self.fill, self.border, self.metrics, self.ascent, self.descent):
            arr.setflags(write=False)

    @property
    def num_fonts(self) -> int:
        return len(self.fonts)

    @property
    def num_glyphs(self) -> int:
        return len(self.glyphs)

    def glyph_index(self, ch: str) -> int:
        try:
            return self._glyph_index[ch]
        except KeyError:
            raise GlyphCoverageError(f"glyph {ch!r} is not in the atlas glyph set") from None

    def glyph_metrics(self, font_index: int, glyph_index: int) -> GlyphMetrics:
        adv, bx, by, w, h, cx, cy = self.metrics[font_index, glyph_index]
        return GlyphMetrics(
            advance=adv,
            bearing_x=bx,
            bearing_y=by,
            width=w,
            height=h,
            ascent=float(self.ascent[font_index]),
            descent=float(self.descent[font_index]),
            cell_x=cx,
            cell_y=cy,
        )

    def entry(self, font_index: int, glyph_index: int) -> GlyphEntry:
        return GlyphEntry(
            fill_alpha=self.fill[font_index, glyph_index],
            border_alphas=self.border[font_index, glyph_index],
            metrics=self.glyph_metrics(font_index, glyph_index),
        )

    def query(self, font_index: int, glyph: str, variant: str | int = "fill") -> np.ndarray:
        """Constant-time lookup of one stored cell; the returned view is read-only.

        `variant` is "fill" or a border bin in 1..5.
        """
        g = self.glyph_index(glyph)
        if not (0 <= font_index < self.num_fonts):
            raise AtlasError(f"font index {font_index} out of range")
        if variant == "fill":
            return self.fill[font_index, g]
        bin_w = int(variant)
        if bin_w not in BORDER_BINS:
            raise AtlasError(f"border bin must be in {BORDER_BINS}, got {variant}")
        return self.border[font_index, g, bin_w - 1]


# --- building ----------------------------------------------------------------


def _disk_kernel(radius: int) -> np.ndarray:
    size = 2 * radius + 1
    return cv2.getStructuringElement(cv2.MORPH_ELLIPSE, (size, size))


def _quantize(cell: np.ndarray) -> np.ndarray:
    """Snap a float cell to the 8-bit grid (values k/255) as float32."""
    return (np.floor(np.clip(cell, 0.0, 1.0) * 255.0 + 0.5) / 255.0).astype(np.float32)


def _downsample_block(arr: np.ndarray, factor: int) -> np.ndarray:
    h, w = arr.shape
    return arr.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def _rasterize_glyph(font: ImageFont.FreeTypeFont, ch: str, size_px: float):
    """Draw one glyph; returns (ink bitmap float [0,1], bbox offsets in px)."""
    bbox = font.getbbox(ch)
    if bbox is None:
        raise GlyphCoverageError(f"no outline for glyph {ch!r}")
    x0, y0, x1, y1 = bbox
    if x1 <= x0 or y1 <= y0:
        raise GlyphCoverageError(f"empty outline for glyph {ch!r}")
    canvas = PILImage.new("L", (x1 - x0 + 2, y1 - y0 + 2), 0)
    ImageDraw.Draw(canvas).text((1 - x0, 1 - y0), ch, font=font, fill=255)
    ink = np.asarray(canvas, dtype=np.float64) / 255.0
    # trim the 1 px guard band back off
    ink = ink[1:-1, 1:-1]
    return ink, (x0, y0, x1, y1)


def build_atlas(
    font_sources: list,
    glyph_set: str = GLYPH_SET,
    resolution: int = CELL_RESOLUTION,
) -> GlyphAtlas:
    """Rasterize every (font, glyph, variant) cell and record layout metrics.

    Each glyph is rendered at a nominal em of EM_FRACTION*resolution pixels and
    centered in its cell by ink bounding box. Border variants are grey
    dilations of the fill mask by disks of the bin radius (1..5 cell pixels);
    they may clip at the cell edge for very large glyphs, but the ink itself
    must fit or the font is rejected.
    """
    if resolution < 16:
        raise AtlasError(f"resolution must be >= 16, got {resolution}")
    if not glyph_set:
        raise AtlasError("glyph set is empty")
    fonts: list[str] = []
    names_seen: set[str] = set()
    F, G, R = len(font_sources), len(glyph_set), resolution
    ss = _SUPERSAMPLE
    em_px = EM_FRACTION * R * ss  # supersampled em
    fill = np.zeros((F, G, R, R), dtype=np.float32)
    border = np.zeros((F, G, len(BORDER_BINS), R, R), dtype=np.float32)
    metrics = np.zeros((F, G, 7), dtype=np.float64)
    ascent = np.zeros(F, dtype=np.float64)
    descent = np.zeros(F, dtype=np.float64)

    for fi, source in enumerate(font_sources):
        path = Path(source)
        try:
            font = ImageFont.truetype(str(path), em_px)
        except Exception as exc:
            raise AtlasError(f"unreadable font file {path}: {exc}") from exc
        name = path.stem
        if name in names_seen:
            raise AtlasError(f"duplicate font name {name!r}")
        names_seen.add(name)
        fonts.append(name)
        asc_px, desc_px = font.getmetrics()
        ascent[fi] = asc_px / em_px
        descent[fi] = desc_px / em_px

        for gi, ch in enumerate(glyph_set):
            try:
                ink, (bx0, by0, bx1, by1) = _rasterize_glyph(font, ch, em_px)
            except GlyphCoverageError as exc:
                raise GlyphCoverageError(f"font {name!r}: {exc}") from None
            h_ss, w_ss = ink.shape
            if w_ss > (R - 2) * ss or h_ss > (R - 2) * ss:
                raise GlyphCoverageError(
                    f"font {name!r}: glyph {ch!r} ink "
                    f"({w_ss / ss:.1f}x{h_ss / ss:.1f} px) overflows the {R}px cell"
                )
            # center the ink in the supersampled cell
            cell_ss = np.zeros((R * ss, R * ss), dtype=np.float64)
            ox = (R * ss - w_ss) // 2
            oy = (R * ss - h_ss) // 2
            cell_ss[oy : oy + h_ss, ox : ox + w_ss] = ink
            fill_cell = _quantize(_downsample_block(cell_ss, ss))
            fill[fi, gi] = fill_cell
            src32 = cell_ss.astype(np.float32)
            for bi, bin_w in enumerate(BORDER_BINS):
                dilated = cv2.dilate(src32, _disk_kernel(bin_w * ss))
                border[fi, gi, bi] = _quantize(_downsample_block(dilated.astype(np.float64), ss))
            metrics[fi, gi] = (
                font.getlength(ch) / em_px,
                bx0 / em_px,
                (asc_px - by0) / em_px,
                w_ss / em_px,
                h_ss / em_px,
                ox / ss,
                oy / ss,
            )
    return GlyphAtlas(fonts, glyph_set, R, fill, border, metrics, ascent, descent)


# --- discovery helpers --------------------------------------------------------

_DEFAULT_FONT_DIRS = (
    "/usr/share/fonts",
    "/usr/local/lib/python3.10/dist-packages/matplotlib/mpl-data/fonts/ttf",
)


def discover_font_files(directories=None) -> list[Path]:
    """Find .ttf/.otf files under the given directories (recursively)."""
    dirs = [Path(d) for d in (directories or _DEFAULT_FONT_DIRS)]
    found: dict[str, Path] = {}
    for d in dirs:
        if not d.is_dir():
            continue
        for p in sorted(d.rglob("*")):
            if p.suffix.lower() in (".ttf", ".otf") and p.stem not in found:
                found[p.stem] = p
    return [found[k] for k in sorted(found)]


def filter_coverage(
    paths, glyph_set: str = GLYPH_SET, resolution: int = CELL_RESOLUTION
) -> list[Path]:
    """Keep only fonts that rasterize the whole glyph set within the cell."""
    usable = []
    em_px = EM_FRACTION * resolution * _SUPERSAMPLE
    limit = (resolution - 2) * _SUPERSAMPLE
    for p in paths:
        try:
            font = ImageFont.truetype(str(p), em_px)
            ok = True
            for ch in glyph_set:
                bbox = font.getbbox(ch)
                if bbox is None or bbox[2] <= bbox[0] or bbox[3] <= bbox[1]:
                    ok = False
                    break
                if bbox[2] - bbox[0] > limit or bbox[3] - bbox[1] > limit:
                    ok = False
                    break
            if ok:
                usable.append(Path(p))
        except Exception:
            continue
    return usable


# --- persistence ---------------------------------------------------------------

# Monolithic layout:
#   magic[8] | u32 version | u32 flags | u32 F | u32 G | u32 R
#   glyph table: G x u32 codepoints
#   font table: per font, u16 name-length + utf-8 name + f64 ascent + f64 descent
#   per font: metrics (G x 7 f64 LE) then fill cells (G x R x R u8)
#             then border cells (G x 5 x R x R u8)
# Sharded layout: the index file stores the same header and tables with flag
# bit 0 set and no payload; each font's metrics+cells live in
# <stem>.shard<NNN> next to the index, prefixed with the shard magic.


def _font_block_size(G: int, R: int) -> int:
    return G * 7 * 8 + G * R * R + G * 5 * R * R


def _pack_header(atlas: GlyphAtlas, flags: int) -> bytes:
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<III", _VERSION, flags, atlas.num_fonts))
    buf.write(struct.pack("<II", atlas.num_glyphs, atlas.cell_resolution))
    for ch in atlas.glyphs:
        buf.write(struct.pack("<I", ord(ch)))
    for fi, name in enumerate(atlas.fonts):
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<dd", atlas.ascent[fi], atlas.descent[fi]))
    return buf.getvalue()


def _pack_font_payload(atlas: GlyphAtlas, fi: int) -> bytes:
    parts = [
        np.ascontiguousarray(atlas.metrics[fi], dtype="<f8").tobytes(),
        np.floor(atlas.fill[fi] * 255.0 + 0.5).astype(np.uint8).tobytes(),
        np.floor(atlas.border[fi] * 255.0 + 0.5).astype(np.uint8).tobytes(),
    ]
    return b"".join(parts)


def save_atlas(atlas: GlyphAtlas, path, sharded: bool = False) -> None:
    """Write the atlas; sharded mode writes an index plus one shard per font."""
    path = Path(path)
    if sharded:
        path.write_bytes(_pack_header(atlas, flags=1))
        for fi, name in enumerate(atlas.fonts):
            shard = path.with_suffix(f".shard{fi:03d}")
            shard.write_bytes(_SHARD_MAGIC + _pack_font_payload(atlas, fi))
    else:
        with open(path, "wb") as f:
            f.write(_pack_header(atlas, flags=0))
            for fi in range(atlas.num_fonts):
                f.write(_pack_font_payload(atlas, fi))


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise AtlasFormatError(f"truncated atlas file while reading {what}")
    return data


def _unpack_font_payload(data: bytes, G: int, R: int):
    if len(data) != _font_block_size(G, R):
        raise AtlasFormatError("truncated font payload")
    off = G * 7 * 8
    metrics = np.frombuffer(data[:off], dtype="<f8").reshape(G, 7).astype(np.float64)
    n_fill = G * R * R
    fill = np.frombuffer(data[off : off + n_fill], dtype=np.uint8)
    fill = (fill.reshape(G, R, R).astype(np.float32)) / 255.0
    bord = np.frombuffer(data[off + n_fill :], dtype=np.uint8)
    bord = (bord.reshape(G, 5, R, R).astype(np.float32)) / 255.0
    return metrics, fill, bord


def load_atlas(path, fonts=None) -> GlyphAtlas:
    """Load an atlas (monolithic file or sharded index).

    `fonts` optionally restricts loading to a subset, given as names or
    indices; the subset keeps the stored order. This bounds memory for large
    atlases.
    """
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _MAGIC:
            raise AtlasFormatError(f"bad magic {magic!r}; not an atlas file")
        version, flags, F = struct.unpack("<III", _read_exact(f, 12, "header"))
        if version != _VERSION:
            raise AtlasFormatError(f"unsupported atlas version {version}")
        G, R = struct.unpack("<II", _read_exact(f, 8, "header"))
        glyphs = "".join(
            chr(struct.unpack("<I", _read_exact(f, 4, "glyph table"))[0]) for _ in range(G)
        )
        names: list[str] = []
        ascent_all = np.zeros(F, dtype=np.float64)
        descent_all = np.zeros(F, dtype=np.float64)
        for fi in range(F):
            (nlen,) = struct.unpack("<H", _read_exact(f, 2, "font table"))
            names.append(_read_exact(f, nlen, "font name").decode("utf-8"))
            ascent_all[fi], descent_all[fi] = struct.unpack(
                "<dd", _read_exact(f, 16, "font table")
            )
        if fonts is None:
            selected = list(range(F))
        else:
            selected = []
            for item in fonts:
                if isinstance(item, str):
                    if item not in names:
                        raise AtlasError(f"font {item!r} not in atlas")
                    selected.append(names.index(item))
                else:
                    if not (0 <= int(item) < F):
                        raise AtlasError(f"font index {item} out of range")
                    selected.append(int(item))
            selected = sorted(set(selected))

        n = len(selected)
        fill = np.zeros((n, G, R, R), dtype=np.float32)
        border = np.zeros((n, G, 5, R, R), dtype=np.float32)
        metrics = np.zeros((n, G, 7), dtype=np.float64)
        block = _font_block_size(G, R)
        if flags & 1:
            for out_i, fi in enumerate(selected):
                shard = path.with_suffix(f".shard{fi:03d}")
                if not shard.is_file():
                    raise AtlasFormatError(f"missing shard file {shard.name}")
                data = shard.read_bytes()
                if data[:8] != _SHARD_MAGIC:
                    raise AtlasFormatError(f"bad magic in shard {shard.name}")
                metrics[out_i], fill[out_i], border[out_i] = _unpack_font_payload(
                    data[8:], G, R
                )
        else:
            payload_start = f.tell()
            for out_i, fi in enumerate(selected):
                f.seek(payload_start + fi * block)
                data = _read_exact(f, block, f"font payload {fi}")
                metrics[out_i], fill[out_i], border[out_i] = _unpack_font_payload(data, G, R)

    return GlyphAtlas(
        [names[i] for i in selected],
        glyphs,
        R,
        fill,
        border,
        metrics,
        ascent_all[selected],
        descent_all[selected],
    )
