"""Differentiable reconstruction of a text crop, with exact gradients.

Discrete rendering choices (font, border width) are relaxed into attention
weights over pre-rendered atlas cells, so the reconstruction is a linear
combination of fixed shapes warped by affine transforms and composited with
sigmoid-decoded colors. Shadow blur/offset and effect visibilities are
implemented directly as differentiable operators. The backward pass is
hand-written reverse mode over this fixed pipeline; it is not a general
autodiff.

All arithmetic runs in float64 so analytic gradients survive comparison
against central finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .atlas import GlyphAtlas
from .compositor import TextElement, layout
from .imaging import Rect, blur_kernel


class DegenerateAffineError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """A loss or gradient span came out non-finite; names the span."""


@dataclass(frozen=True)
class DiffConfig:
    alpha_resolution: int = 64
    top_k_fonts: int = 20
    db_steepness: float = 50.0
    crop_padding: int = 0


@dataclass(frozen=True)
class GradientVector:
    values: np.ndarray
    index_map: dict[str, tuple[int, int]]

    def span(self, name: str) -> np.ndarray:
        lo, hi = self.index_map[name]
        return self.values[lo:hi]


@dataclass
class RefinableParams:
    """Continuous reparameterization of one text element over a crop.

    The first block of fields is optimized; char_indices and the placement
    geometry (base cell transforms, ink rectangles, anchors) stay fixed during
    refinement, as does font_size (carried for export).
    """

    font_logits: np.ndarray  # (F,)
    word_affine: np.ndarray  # (6,) row-major 2x3
    char_affines: np.ndarray  # (C, 6)
    fill_color_logits: np.ndarray  # (3,)
    border_visibility_logit: float
    shadow_visibility_logit: float
    border_bin_logits: np.ndarray  # (5,)
    border_color_logits: np.ndarray  # (3,)
    shadow_color_logits: np.ndarray  # (3,)
    shadow_blur_raw: float
    shadow_dx: float
    shadow_dy: float
    # -- structural, not optimized --
    char_indices: np.ndarray  # (C,) glyph ids
    char_cells: np.ndarray  # (C, 3, 3) base cell->crop transforms
    char_inks: np.ndarray  # (C, 4) ink rect (x, y, w, h) in cell px
    char_anchors: np.ndarray  # (C, 2) crop px
    word_anchor: np.ndarray  # (2,) crop px
    font_size: float

    @property
    def num_fonts(self) -> int:
        return int(self.font_logits.shape[0])

    @property
    def num_chars(self) -> int:
        return int(self.char_indices.shape[0])

    def copy(self) -> "RefinableParams":
        return replace(
            self,
            font_logits=self.font_logits.copy(),
            word_affine=self.word_affine.copy(),
            char_affines=self.char_affines.copy(),
            fill_color_logits=self.fill_color_logits.copy(),
            border_bin_logits=self.border_bin_logits.copy(),
            border_color_logits=self.border_color_logits.copy(),
            shadow_color_logits=self.shadow_color_logits.copy(),
        )

    # -- flat vector interface (span order is the GradientVector order) --

    def index_map(self) -> dict[str, tuple[int, int]]:
        sizes = [
            ("font_logits", self.num_fonts),
            ("word_affine", 6),
            ("char_affines", 6 * self.num_chars),
            ("fill_color_logits", 3),
            ("border_visibility_logit", 1),
            ("shadow_visibility_logit", 1),
            ("border_bin_logits", 5),
            ("border_color_logits", 3),
            ("shadow_color_logits", 3),
            ("shadow_blur_raw", 1),
            ("shadow_dx", 1),
            ("shadow_dy", 1),
        ]
        spans: dict[str, tuple[int, int]] = {}
        lo = 0
        for name, n in sizes:
            spans[name] = (lo, lo + n)
            lo += n
        return spans

    def to_vector(self) -> np.ndarray:
        return np.concatenate(
            [
                self.font_logits,
                self.word_affine,
                self.char_affines.reshape(-1),
                self.fill_color_logits,
                [self.border_visibility_logit, self.shadow_visibility_logit],
                self.border_bin_logits,
                self.border_color_logits,
                self.shadow_color_logits,
                [self.shadow_blur_raw, self.shadow_dx, self.shadow_dy],
            ]
        ).astype(np.float64)

    def with_vector(self, vec: np.ndarray) -> "RefinableParams":
        spans = self.index_map()
        v = np.asarray(vec, dtype=np.float64)

        def get(name):
            lo, hi = spans[name]
            return v[lo:hi].copy()

        return replace(
            self,
            font_logits=get("font_logits"),
            word_affine=get("word_affine"),
            char_affines=get("char_affines").reshape(self.num_chars, 6),
            fill_color_logits=get("fill_color_logits"),
            border_visibility_logit=float(get("border_visibility_logit")[0]),
            shadow_visibility_logit=float(get("shadow_visibility_logit")[0]),
            border_bin_logits=get("border_bin_logits"),
            border_color_logits=get("border_color_logits"),
            shadow_color_logits=get("shadow_color_logits"),
            shadow_blur_raw=float(get("shadow_blur_raw")[0]),
            shadow_dx=float(get("shadow_dx")[0]),
            shadow_dy=float(get("shadow_dy")[0]),
        )


# --- elementary nonlinearities -------------------------------------------------


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def softplus(x: float) -> float:
    if x > 30:
        return float(x)
    return float(math.log1p(math.exp(x)))


def inv_softplus(y: float) -> float:
    if y > 30:
        return float(y)
    return float(math.log(math.expm1(y)))


def softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - np.max(x))
    return e / e.sum()


def soft_visibility(logit_value: float, steepness: float) -> float:
    """Differentiable binarization of a visibility logit: DB(sigmoid(l))."""
    x = float(sigmoid(np.array(logit_value)))
    return float(sigmoid(np.array(steepness * (x - 0.5))))


def _soft_visibility_grad(logit_value: float, steepness: float) -> tuple[float, float]:
    s = float(sigmoid(np.array(logit_value)))
    v = float(sigmoid(np.array(steepness * (s - 0.5))))
    return v, steepness * v * (1.0 - v) * s * (1.0 - s)


def font_attention(font_logits: np.ndarray, top_k: int) -> tuple[np.ndarray, np.ndarray]:
    """Sparse attention over fonts: softmax restricted to the top_k logits.

    Returns (dense attention vector summing to 1 on the kept set, kept
    indices in ascending order). Ties break toward the lower index. Gradients
    flow only through kept entries.
    """
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")
    logits = np.asarray(font_logits, dtype=np.float64)
    f = logits.shape[0]
    k = min(top_k, f)
    order = np.lexsort((np.arange(f), -logits))
    kept = np.sort(order[:k])
    attn = np.zeros(f, dtype=np.float64)
    attn[kept] = softmax(logits[kept])
    return attn, kept


def blended_glyph(
    atlas: GlyphAtlas, attention: np.ndarray, glyph: str, variant: str | int = "fill"
) -> np.ndarray:
    """Attention-weighted sum of pre-rendered cells across fonts."""
    gi = atlas.glyph_index(glyph)
    attention = np.asarray(attention, dtype=np.float64)
    nz = np.nonzero(attention)[0]
    if variant == "fill":
        stack = atlas.fill[nz, gi].astype(np.float64)
    else:
        stack = atlas.border[nz, gi, int(variant) - 1].astype(np.float64)
    return np.tensordot(attention[nz], stack, axes=1)


# --- affine helpers -------------------------------------------------------------


def _mat(six: np.ndarray) -> np.ndarray:
    m = np.eye(3, dtype=np.float64)
    m[0, :] = six[0:3]
    m[1, :] = six[3:6]
    return m


def _translation(t) -> np.ndarray:
    m = np.eye(3, dtype=np.float64)
    m[0, 2] = t[0]
    m[1, 2] = t[1]
    return m


IDENTITY_AFFINE = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


def char_transforms(params: RefinableParams) -> list[np.ndarray]:
    """Forward cell->crop transform per character under the current affines."""
    tw = _translation(params.word_anchor)
    tw_inv = _translation(-params.word_anchor)
    mw = tw @ _mat(params.word_affine) @ tw_inv
    out = []
    for c in range(params.num_chars):
        tc = _translation(params.char_anchors[c])
        tc_inv = _translation(-params.char_anchors[c])
        mc = tc @ _mat(params.char_affines[c]) @ tc_inv
        out.append(mw @ mc @ params.char_cells[c])
    return out


def char_boxes_after_affine(params: RefinableParams) -> list[Rect]:
    """Axis-aligned ink boxes (crop coordinates) under the current affines."""
    boxes = []
    for c, g in enumerate(char_transforms(params)):
        x0, y0, w, h = params.char_inks[c]
        corners = np.array(
            [[x0, y0, 1.0], [x0 + w, y0, 1.0], [x0, y0 + h, 1.0], [x0 + w, y0 + h, 1.0]]
        )
        pts = (g @ corners.T).T[:, :2]
        boxes.append(
            Rect(
                float(pts[:, 0].min()),
                float(pts[:, 1].min()),
                float(pts[:, 0].max() - pts[:, 0].min()),
                float(pts[:, 1].max() - pts[:, 1].min()),
            )
        )
    return boxes


# --- bilinear warp with cached adjoints -----------------------------------------


class _WarpPlan:
    """Gather plan for bilinear sampling of one (sx, sy) coordinate field."""

    def __init__(self, src_shape: tuple[int, int], sx: np.ndarray, sy: np.ndarray):
        self.src_shape = src_shape
        h, w = src_shape
        x0 = np.floor(sx)
        y0 = np.floor(sy)
        self.fx = sx - x0
        self.fy = sy - y0
        x0 = x0.astype(np.int64)
        y0 = y0.astype(np.int64)
        self.corners = []
        for dx, dy in ((0, 0), (1, 0), (0, 1), (1, 1)):
            xi = x0 + dx
            yi = y0 + dy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            idx = np.where(ok, yi * w + xi, 0)
            self.corners.append((ok, idx))
        fx, fy = self.fx, self.fy
        self.weights = ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)

    def values(self, src: np.ndarray):
        flat = src.reshape(-1)
        return [
            np.where(ok, flat[idx], 0.0) for ok, idx in self.corners
        ]

    def apply(self, src: np.ndarray) -> np.ndarray:
        vals = self.values(src)
        out = np.zeros(self.fx.shape, dtype=np.float64)
        for wgt, v in zip(self.weights, vals):
            out += wgt * v
        return out

    def adjoint_src(self, g: np.ndarray) -> np.ndarray:
        out = np.zeros(self.src_shape[0] * self.src_shape[1], dtype=np.float64)
        for wgt, (ok, idx) in zip(self.weights, self.corners):
            contrib = wgt * g
            np.add.at(out, idx[ok], contrib[ok])
        return out.reshape(self.src_shape)

    def coord_grads(self, vals, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        v00, v10, v01, v11 = vals
        fx, fy = self.fx, self.fy
        d_sx = (1 - fy) * (v10 - v00) + fy * (v11 - v01)
        d_sy = (1 - fx) * (v01 - v00) + fx * (v11 - v10)
        return g * d_sx, g * d_sy


# --- separable blur with reflected borders and sigma gradient -------------------


def _conv_reflect(x: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    r = k.shape[0] // 2
    if r == 0:
        return x.copy()
    if x.shape[axis] < r + 1:
        raise ValueError(f"map extent {x.shape[axis]} too small for blur radius {r}")
    pad = [(0, 0), (0, 0)]
    pad[axis] = (r, r)
    xp = np.pad(x, pad, mode="symmetric")
    win = np.lib.stride_tricks.sliding_window_view(xp, k.shape[0], axis=axis)
    return win @ k


def _conv_reflect_adjoint(g: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    """Adjoint of _conv_reflect with respect to its input (symmetric kernels)."""
    r = k.shape[0] // 2
    if r == 0:
        return g.copy()
    n = g.shape[axis]
    pad = [(0, 0), (0, 0)]
    pad[axis] = (2 * r, 2 * r)
    gz = np.pad(g, pad, mode="constant")
    win = np.lib.stride_tricks.sliding_window_view(gz, k.shape[0], axis=axis)
    gp = win @ k  # gradient w.r.t. the reflected-padded input, length n + 2r
    core = [slice(None), slice(None)]
    core[axis] = slice(r, r + n)
    out = gp[tuple(core)].copy()
    left = [slice(None), slice(None)]
    left[axis] = slice(0, r)
    lstrip = np.flip(gp[tuple(left)], axis=axis)
    right = [slice(None), slice(None)]
    right[axis] = slice(r + n, 2 * r + n)
    rstrip = np.flip(gp[tuple(right)], axis=axis)
    head = [slice(None), slice(None)]
    head[axis] = slice(0, r)
    out[tuple(head)] += lstrip
    tail = [slice(None), slice(None)]
    tail[axis] = slice(n - r, n)
    out[tuple(tail)] += rstrip
    return out


def _blur_kernel_and_dsigma(sigma: float) -> tuple[np.ndarray, np.ndarray]:
    k = blur_kernel(sigma)
    r = k.shape[0] // 2
    if r == 0:
        return k, np.zeros(1)
    offsets = np.arange(-r, r + 1, dtype=np.float64)
    w = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    dw = w * (offsets**2) / sigma**3
    s = w.sum()
    dk = (dw - k * dw.sum()) / s
    return k, dk


# --- forward reconstruction ------------------------------------------------------


def _decode_scalars(params: RefinableParams, config: DiffConfig):
    attn, kept = font_attention(params.font_logits, config.top_k_fonts)
    q = softmax(params.border_bin_logits)
    colors = {
        "fill": sigmoid(params.fill_color_logits),
        "border": sigmoid(params.border_color_logits),
        "shadow": sigmoid(params.shadow_color_logits),
    }
    vb, dvb = _soft_visibility_grad(params.border_visibility_logit, config.db_steepness)
    vs, dvs = _soft_visibility_grad(params.shadow_visibility_logit, config.db_steepness)
    sigma = softplus(params.shadow_blur_raw)
    return attn, kept, q, colors, (vb, dvb), (vs, dvs), sigma


def _gather_cells(atlas: GlyphAtlas, params: RefinableParams, kept: np.ndarray):
    glyphs = params.char_indices
    fill_k = atlas.fill[np.ix_(kept, glyphs)].astype(np.float64)  # (K, C, R, R)
    border_k = atlas.border[np.ix_(kept, glyphs)].astype(np.float64)  # (K, C, 5, R, R)
    return fill_k, border_k


def _forward(
    params: RefinableParams,
    atlas: GlyphAtlas,
    background_crop: np.ndarray,
    config: DiffConfig,
    want_cache: bool,
):
    h, w = background_crop.shape[:2]
    bg = background_crop.astype(np.float64)
    attn, kept, q, colors, (vb, dvb), (vs, dvs), sigma = _decode_scalars(params, config)
    fill_k, border_k = _gather_cells(atlas, params, kept)
    a = attn[kept]

    transforms = char_transforms(params)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)

    n_chars = params.num_chars
    fill_cells = np.einsum("k,kcij->cij", a, fill_k)  # (C, R, R)
    bq_cells = np.einsum("k,b,kcbij->cij", a, q, border_k)  # (C, R, R)

    plans, fill_vals, border_vals, sinv = [], [], [], []
    fill_maps = np.zeros((n_chars, h, w), dtype=np.float64)
    border_maps = np.zeros((n_chars, h, w), dtype=np.float64)
    for c in range(n_chars):
        g = transforms[c]
        det = g[0, 0] * g[1, 1] - g[0, 1] * g[1, 0]
        if abs(det) < 1e-9:
            raise DegenerateAffineError(f"character {c}: non-invertible affine (det={det:g})")
        s = np.linalg.inv(g)
        sx = s[0, 0] * xs + s[0, 1] * ys + s[0, 2]
        sy = s[1, 0] * xs + s[1, 1] * ys + s[1, 2]
        plan = _WarpPlan(fill_cells[c].shape, sx, sy)
        fv = plan.values(fill_cells[c])
        bv = plan.values(bq_cells[c])
        fill_maps[c] = sum(wgt * v for wgt, v in zip(plan.weights, fv))
        border_maps[c] = sum(wgt * v for wgt, v in zip(plan.weights, bv))
        if want_cache:
            plans.append(plan)
            fill_vals.append(fv)
            border_vals.append(bv)
            sinv.append(s)

    one_minus_f = 1.0 - fill_maps
    one_minus_b = 1.0 - border_maps
    u_fill = 1.0 - one_minus_f.prod(axis=0)
    u_border = 1.0 - one_minus_b.prod(axis=0)

    ring = u_border * (1.0 - u_fill)
    alpha_border = vb * ring

    shadow_plan = _WarpPlan((h, w), xs - params.shadow_dx, ys - params.shadow_dy)
    shadow_vals = shadow_plan.values(u_fill)
    translated = sum(wgt * v for wgt, v in zip(shadow_plan.weights, shadow_vals))
    k1, dk1 = _blur_kernel_and_dsigma(sigma)
    z1 = _conv_reflect(translated, k1, axis=1)
    blurred = _conv_reflect(z1, k1, axis=0)
    alpha_shadow = vs * blurred

    c1 = (1.0 - alpha_shadow[..., None]) * bg + alpha_shadow[..., None] * colors["shadow"]
    c2 = (1.0 - u_fill[..., None]) * c1 + u_fill[..., None] * colors["fill"]
    out = (1.0 - alpha_border[..., None]) * c2 + alpha_border[..., None] * colors["border"]

    if not want_cache:
        return out, None
    cache = dict(
        bg=bg,
        attn=attn,
        kept=kept,
        a=a,
        q=q,
        colors=colors,
        vb=vb,
        dvb=dvb,
        vs=vs,
        dvs=dvs,
        sigma=sigma,
        fill_k=fill_k,
        border_k=border_k,
        transforms=transforms,
        plans=plans,
        fill_vals=fill_vals,
        border_vals=border_vals,
        sinv=sinv,
        fill_maps=fill_maps,
        border_maps=border_maps,
        one_minus_f=one_minus_f,
        one_minus_b=one_minus_b,
        u_fill=u_fill,
        u_border=u_border,
        ring=ring,
        alpha_border=alpha_border,
        shadow_plan=shadow_plan,
        shadow_vals=shadow_vals,
        translated=translated,
        k1=k1,
        dk1=dk1,
        z1=z1,
        blurred=blurred,
        alpha_shadow=alpha_shadow,
        c1=c1,
        c2=c2,
        xs=xs,
        ys=ys,
    )
    return out, cache


def reconstruct(
    params: RefinableParams,
    atlas: GlyphAtlas,
    background_crop: np.ndarray,
    config: DiffConfig = DiffConfig(),
) -> np.ndarray:
    """Render the differentiable approximation of the element over the crop."""
    out, _ = _forward(params, atlas, background_crop, config, want_cache=False)
    return out


def _leave_one_out(factors: np.ndarray) -> np.ndarray:
    """Per-item product of all the *other* (H, W) factor maps."""
    n = factors.shape[0]
    out = np.ones_like(factors)
    prefix = np.ones_like(factors[0])
    for i in range(n):
        out[i] = prefix
        prefix = prefix * factors[i]
    suffix = np.ones_like(factors[0])
    for i in range(n - 1, -1, -1):
        out[i] *= suffix
        suffix = suffix * factors[i]
    return out


def loss_and_gradients(
    params: RefinableParams,
    atlas: GlyphAtlas,
    background_crop: np.ndarray,
    target: np.ndarray,
    config: DiffConfig = DiffConfig(),
) -> tuple[float, GradientVector]:
    """Mean absolute reconstruction error and its exact gradient.

    The L1 subgradient at exactly-zero residual pixels is taken as 0.
    """
    if target.shape != background_crop.shape:
        raise ValueError(
            f"target {target.shape} does not match background crop {background_crop.shape}"
        )
    out, cc = _forward(params, atlas, background_crop, config, want_cache=True)
    tgt = target.astype(np.float64)
    residual = out - tgt
    loss = float(np.mean(np.abs(residual)))

    n_terms = residual.size
    g_out = np.sign(residual) / n_terms

    colors = cc["colors"]
    u_fill = cc["u_fill"]
    alpha_border = cc["alpha_border"]
    alpha_shadow = cc["alpha_shadow"]
    c1, c2, bg = cc["c1"], cc["c2"], cc["bg"]

    # compositing chain (border on top, then fill, then shadow)
    g_alpha_border = np.einsum("ijc,ijc->ij", g_out, colors["border"] - c2)
    g_col_border = np.einsum("ijc,ij->c", g_out, alpha_border)
    g_c2 = g_out * (1.0 - alpha_border[..., None])
    g_u_fill = np.einsum("ijc,ijc->ij", g_c2, colors["fill"][None, None, :] - c1)
    g_col_fill = np.einsum("ijc,ij->c", g_c2, u_fill)
    g_c1 = g_c2 * (1.0 - u_fill[..., None])
    g_alpha_shadow = np.einsum("ijc,ijc->ij", g_c1, colors["shadow"][None, None, :] - bg)
    g_col_shadow = np.einsum("ijc,ij->c", g_c1, alpha_shadow)

    # visibilities
    vb, dvb, vs, dvs = cc["vb"], cc["dvb"], cc["vs"], cc["dvs"]
    ring, blurred = cc["ring"], cc["blurred"]
    g_vb = float((g_alpha_border * ring).sum())
    g_ring = g_alpha_border * vb
    g_vs = float((g_alpha_shadow * blurred).sum())
    g_blurred = g_alpha_shadow * vs

    # shadow pipeline: translate -> blur
    k1, dk1, z1, translated = cc["k1"], cc["dk1"], cc["z1"], cc["translated"]
    g_sigma = float((g_blurred * _conv_reflect(z1, dk1, axis=0)).sum())
    g_z1 = _conv_reflect_adjoint(g_blurred, k1, axis=0)
    g_sigma += float((g_z1 * _conv_reflect(translated, dk1, axis=1)).sum())
    g_translated = _conv_reflect_adjoint(g_z1, k1, axis=1)
    shadow_plan, shadow_vals = cc["shadow_plan"], cc["shadow_vals"]
    gsx_sh, gsy_sh = shadow_plan.coord_grads(shadow_vals, g_translated)
    g_dx = -float(gsx_sh.sum())
    g_dy = -float(gsy_sh.sum())
    g_u_fill_from_shadow = shadow_plan.adjoint_src(g_translated)

    # ring = u_border * (1 - u_fill)
    u_border = cc["u_border"]
    g_u_border = g_ring * (1.0 - u_fill)
    g_u_fill_total = (
        g_u_fill + g_u_fill_from_shadow - g_ring * u_border
    )

    # unions
    loo_f = _leave_one_out(cc["one_minus_f"])
    loo_b = _leave_one_out(cc["one_minus_b"])
    n_chars = params.num_chars

    g_a = np.zeros_like(cc["a"])
    g_q = np.zeros(5, dtype=np.float64)
    g_word_mat = np.zeros((3, 3), dtype=np.float64)
    g_char_affines = np.zeros((n_chars, 6), dtype=np.float64)

    tw = _translation(params.word_anchor)
    tw_inv = _translation(-params.word_anchor)
    mw = tw @ _mat(params.word_affine) @ tw_inv
    a, q = cc["a"], cc["q"]
    fill_k, border_k = cc["fill_k"], cc["border_k"]

    for c in range(n_chars):
        g_fc = g_u_fill_total * loo_f[c]
        g_bc = g_u_border * loo_b[c]
        plan = cc["plans"][c]
        # cell-space gradients -> attention / bin weights
        g_fill_cell = plan.adjoint_src(g_fc)
        g_border_cell = plan.adjoint_src(g_bc)
        g_a += np.einsum("ij,kij->k", g_fill_cell, fill_k[:, c])
        g_a += np.einsum("ij,kij->k", g_border_cell, np.einsum("b,kbij->kij", q, border_k[:, c]))
        g_q += np.einsum("ij,bij->b", g_border_cell, np.einsum("k,kbij->bij", a, border_k[:, c]))
        # coordinate gradients -> affine parameters
        gsx_f, gsy_f = plan.coord_grads(cc["fill_vals"][c], g_fc)
        gsx_b, gsy_b = plan.coord_grads(cc["border_vals"][c], g_bc)
        gsx = gsx_f + gsx_b
        gsy = gsy_f + gsy_b
        xs, ys = cc["xs"], cc["ys"]
        g_s = np.zeros((3, 3), dtype=np.float64)
        g_s[0, 0] = (gsx * xs).sum()
        g_s[0, 1] = (gsx * ys).sum()
        g_s[0, 2] = gsx.sum()
        g_s[1, 0] = (gsy * xs).sum()
        g_s[1, 1] = (gsy * ys).sum()
        g_s[1, 2] = gsy.sum()
        s = cc["sinv"][c]
        g_g = -(s.T @ g_s @ s.T)
        tc = _translation(params.char_anchors[c])
        tc_inv = _translation(-params.char_anchors[c])
        mc = tc @ _mat(params.char_affines[c]) @ tc_inv
        base = params.char_cells[c]
        g_mw = g_g @ (mc @ base).T
        g_word_mat += tw.T @ g_mw @ tw_inv.T
        g_mc = mw.T @ g_g @ base.T
        g_amat = tc.T @ g_mc @ tc_inv.T
        g_char_affines[c] = g_amat[:2, :].reshape(6)

    g_word = g_word_mat[:2, :].reshape(6)

    # attention softmax over the kept subset
    g_font = np.zeros(params.num_fonts, dtype=np.float64)
    g_font[cc["kept"]] = a * (g_a - float(np.dot(a, g_a)))
    g_bins = q * (g_q - float(np.dot(q, g_q)))

    # decoded scalars back to raw parameters
    sig_f = colors["fill"]
    sig_b = colors["border"]
    sig_s = colors["shadow"]
    g_fill_logits = g_col_fill * sig_f * (1.0 - sig_f)
    g_border_logits = g_col_border * sig_b * (1.0 - sig_b)
    g_shadow_logits = g_col_shadow * sig_s * (1.0 - sig_s)
    g_bvl = g_vb * dvb
    g_svl = g_vs * dvs
    g_blur_raw = g_sigma * float(sigmoid(np.array(params.shadow_blur_raw)))

    values = np.concatenate(
        [
            g_font,
            g_word,
            g_char_affines.reshape(-1),
            g_fill_logits,
            [g_bvl, g_svl],
            g_bins,
            g_border_logits,
            g_shadow_logits,
            [g_blur_raw, g_dx, g_dy],
        ]
    )
    grads = GradientVector(values=values, index_map=params.index_map())

    if not np.isfinite(loss):
        raise NonFiniteError("loss is non-finite")
    for name, (lo, hi) in grads.index_map.items():
        if not np.all(np.isfinite(values[lo:hi])):
            raise NonFiniteError(f"non-finite gradient in span {name!r}")
    return loss, grads


# --- encoding a concrete element -------------------------------------------------

ONE_HOT_LOGIT = 12.0
HARD_VISIBILITY_LOGIT = 6.0
COLOR_LOGIT_CLIP = 1.0 / 512.0


def encode_element(
    element: TextElement,
    atlas: GlyphAtlas,
    crop_origin: tuple[float, float] = (0.0, 0.0),
    num_fonts: int | None = None,
) -> RefinableParams:
    """Reparameterize a concrete TextElement for refinement over a crop.

    The resulting parameters decode back to (approximately) the element: a
    near-one-hot font attention, identity affines around the layout placement,
    and hard visibility logits.
    """
    placements, word_box = layout(element, atlas)
    n_fonts = num_fonts or atlas.num_fonts
    n_chars = len(placements)
    cx, cy = crop_origin
    shift = _translation((-cx, -cy))

    char_cells = np.zeros((n_chars, 3, 3), dtype=np.float64)
    char_inks = np.zeros((n_chars, 4), dtype=np.float64)
    char_anchors = np.zeros((n_chars, 2), dtype=np.float64)
    glyph_ids = np.zeros(n_chars, dtype=np.int64)
    for i, p in enumerate(placements):
        char_cells[i] = shift @ p.cell_to_canvas
        m = atlas.glyph_metrics(element.font_index, p.glyph_index)
        char_inks[i] = (m.cell_x, m.cell_y, m.width * atlas.cell_em, m.height * atlas.cell_em)
        char_anchors[i] = (p.box.center[0] - cx, p.box.center[1] - cy)
        glyph_ids[i] = p.glyph_index

    font_logits = np.zeros(n_fonts, dtype=np.float64)
    font_logits[element.font_index] = ONE_HOT_LOGIT

    eff = element.effects
    bin_logits = np.zeros(5, dtype=np.float64)
    bin_logits[eff.border.width_bin - 1] = ONE_HOT_LOGIT

    def color_logits(color):
        c = np.clip(np.asarray(color, dtype=np.float64), COLOR_LOGIT_CLIP, 1 - COLOR_LOGIT_CLIP)
        return logit(c)

    return RefinableParams(
        font_logits=font_logits,
        word_affine=IDENTITY_AFFINE.copy(),
        char_affines=np.tile(IDENTITY_AFFINE, (n_chars, 1)),
        fill_color_logits=color_logits(eff.fill.color),
        border_visibility_logit=(
            HARD_VISIBILITY_LOGIT if eff.border.visible else -HARD_VISIBILITY_LOGIT
        ),
        shadow_visibility_logit=(
            HARD_VISIBILITY_LOGIT if eff.shadow.visible else -HARD_VISIBILITY_LOGIT
        ),
        border_bin_logits=bin_logits,
        border_color_logits=color_logits(eff.border.color),
        shadow_color_logits=color_logits(eff.shadow.color),
        shadow_blur_raw=inv_softplus(max(eff.shadow.blur, 0.01)),
        shadow_dx=eff.shadow.offset_x,
        shadow_dy=eff.shadow.offset_y,
        char_indices=glyph_ids,
        char_cells=char_cells,
        char_inks=char_inks,
        char_anchors=char_anchors,
        word_anchor=np.array(
            [word_box.center[0] - cx, word_box.center[1] - cy], dtype=np.float64
        ),
        font_size=element.font_size,
    )
