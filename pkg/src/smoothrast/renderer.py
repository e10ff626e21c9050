"""Smooth triangle rasterizer.

For pixel p and triangle T the renderer forms

    logit(p, T) = -o * depth(p, T) + log V(p, T)

where V is the soft coverage (a product of edge sigmoids, summed over both
orientations) and depth is the triangle's plane extrapolated to p. A
softmax over triangles per pixel gives the blend weights, which is the
weighted SoftMin of o * depth with weights V. Two constant background
triangles guarantee every pixel has a covering surface.

Planes of nearly edge-on faces fall toward the camera very steeply outside
the triangle. Left alone, -o * depth grows faster than log V decays and
such faces smear streaks across the image, so -o * depth is softly capped
at ``extrapolation_margin`` nats above the value at the nearest corner:

    cap = logsumexp_i(-o * z_i) + margin
    -o * depth  ->  cap - softplus(cap + o * depth)

Inside a triangle the change is below exp(-margin).

Evaluating every (pixel, triangle) pair on the tape is wasteful: almost all
pairs carry weights far below double precision. A forward-only numpy pass
computes every logit first and only pairs within ``cull_log_ratio`` of the
pixel's maximum are recorded. Dropped pairs have relative weight below
exp(-cull_log_ratio) (about 1e-16 at the default).
"""

from dataclasses import dataclass, field
import warnings

import numpy as np

from . import autodiff as ad
from .camera import ScreenTriangles, view_project
from .mesh import face_geometry

AREA_EPS = 2e-9  # doubled screen area below which depth falls back to the corner mean
TILE = 4  # pixels per side of the culling blocks
BACKGROUND_MARGIN = 0.1
BACKGROUND_GAP = 10.0


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return tuple(v / np.linalg.norm(v))


@dataclass(frozen=True)
class Lighting:
    light_dir: tuple = _unit((0.4, 0.7, -0.6))
    k_ambient: float = 0.3
    k_diffuse: float = 0.6
    k_specular: float = 0.1
    shininess: float = 16.0

    def __post_init__(self):
        d = np.asarray(self.light_dir, dtype=np.float64)
        if d.shape != (3,) or abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("light_dir must be a unit 3-vector")
        for name in ("k_ambient", "k_diffuse", "k_specular"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.shininess <= 0:
            raise ValueError("shininess must be positive")


@dataclass(frozen=True)
class RenderParams:
    """Rasterizer hyperparameters.

    ``background_depth=None`` places the background just behind the scene
    (see :func:`resolve_background_depth`). ``cull_log_ratio=None`` keeps
    every pixel/triangle pair. ``visibility_decay`` is an optional length
    (pixels^2) for an extra exp(-d^2 / tau) falloff of V outside a triangle.
    """

    s: float = 25.0
    o: float = 25.0
    lighting: Lighting = field(default_factory=Lighting)
    background_intensity: float = 1.0
    background_depth: float = None
    eps: float = 1e-12
    cull_log_ratio: float = 37.0
    orientation_invariant: bool = True
    double_sided: bool = True
    clamp_sharpness: float = 32.0
    extrapolation_margin: float = 30.0
    visibility_decay: float = None

    def __post_init__(self):
        if self.s <= 0 or self.o <= 0:
            raise ValueError("s and o must be positive")
        if not 0.0 <= self.background_intensity <= 1.0:
            raise ValueError("background_intensity must lie in [0, 1]")
        if self.cull_log_ratio is not None and self.cull_log_ratio <= 0:
            raise ValueError("cull_log_ratio must be positive")
        if self.visibility_decay is not None and self.visibility_decay <= 0:
            raise ValueError("visibility_decay must be positive")


@dataclass(frozen=True)
class Image:
    """Grayscale image; ``pixels`` is an H x W array or Var with values in [0, 1]."""

    width: int
    height: int
    pixels: object

    def values(self):
        return ad.value_of(self.pixels)


@dataclass(frozen=True)
class RasterBuffers:
    """Dense per-pixel, per-triangle visibility and blend weights.

    Rows are pixels in row-major order; columns are the scene triangles
    followed by the two background triangles.
    """

    V: object
    zw: object
    n_scene: int


# ---------------------------------------------------------------------------
# weighted softmax


def wsoftmax(x, w, eps=1e-12):
    """exp(x_i) w_i / sum_j exp(x_j) w_j, evaluated as softmax(x + log w) along the last axis."""
    wv = ad.value_of(w)
    if np.any(wv < 0):
        raise ValueError("weights must be nonnegative")
    if not np.all(np.max(wv, axis=-1) > eps):
        raise ValueError("all weights are below eps")
    return ad.softmax(x + ad.log(w), axis=-1)


def wsoftmin(x, w, eps=1e-12):
    return wsoftmax(-x, w, eps)


# ---------------------------------------------------------------------------
# shading


def smooth_clamp(x, beta=32.0):
    """C-infinity saturation of x >= 0 into [0, 1) with f(0) = 0 exactly."""
    g0 = 1.0 - np.logaddexp(0.0, beta) / beta
    g = 1.0 - ad.softplus(beta * (1.0 - x)) / beta
    return (g - g0) / (1.0 - g0)


def shade(normal, view_dir, lighting, double_sided=True, beta=32.0):
    """Ambient + diffuse + Blinn-Phong intensity for unit normals and view directions (rows)."""
    light = np.asarray(lighting.light_dir)
    half = ad.normalize(view_dir + light)
    ndl = ad.dot(normal, light)
    ndh = ad.dot(normal, half)
    if double_sided:
        diffuse, facing = ad.smooth_abs(ndl), ad.smooth_abs(ndh)
    else:
        diffuse = 0.5 * (ndl + ad.smooth_abs(ndl))
        facing = 0.5 * (ndh + ad.smooth_abs(ndh))
    raw = (
        lighting.k_ambient
        + lighting.k_diffuse * diffuse
        + lighting.k_specular * ad.power(facing, lighting.shininess)
    )
    return smooth_clamp(raw, beta)


def face_shades(mesh, camera, params):
    """Flat shade per face, with the view direction taken from the face centroid."""
    normals, centroids, _ = face_geometry(mesh)
    view_dir = ad.normalize(np.asarray(camera.eye) - centroids)
    return shade(normals, view_dir, params.lighting, params.double_sided, params.clamp_sharpness)


# ---------------------------------------------------------------------------
# per-triangle coefficient table


def _edge_coefficients(tris, s):
    """Edge functions d_e(p) = a + b px + c py, prescaled by s / m, for edges 0-1, 1-2, 2-0."""
    x, y = tris.x, tris.y
    k = s / tris.m
    cols = []
    for i, j in ((0, 1), (1, 2), (2, 0)):
        xi, yi, xj, yj = x[:, i], y[:, i], x[:, j], y[:, j]
        cols += [(xj * yi - xi * yj) * k, (yj - yi) * k, (xi - xj) * k]
    return cols


def _depth_coefficients(tris):
    """Plane depth(p) = a + b px + c py through the corners, blending to the corner mean when degenerate."""
    x, y, z = tris.x, tris.y, tris.z
    x0, y0, z0 = x[:, 0], y[:, 0], z[:, 0]
    dx1, dy1, dz1 = x[:, 1] - x0, y[:, 1] - y0, z[:, 1] - z0
    dx2, dy2, dz2 = x[:, 2] - x0, y[:, 2] - y0, z[:, 2] - z0
    area2 = dx1 * dy2 - dx2 * dy1
    inv = area2 / (area2 * area2 + AREA_EPS**2)
    zmean = (z[:, 0] + z[:, 1] + z[:, 2]) / 3.0
    z0s = zmean + (z0 - zmean) * (area2 * inv)
    bx = (dz1 * dy2 - dz2 * dy1) * inv
    by = (dz2 * dx1 - dz1 * dx2) * inv
    return [z0s - bx * x0 - by * y0, bx, by]


def _depth_cap(tris, o, margin):
    return ad.logsumexp(-o * tris.z, axis=1) + margin


def _disc(tris):
    """Centroid and radius (largest centroid-corner distance, smoothed) in pixels."""
    cx = (tris.x[:, 0] + tris.x[:, 1] + tris.x[:, 2]) / 3.0
    cy = (tris.y[:, 0] + tris.y[:, 1] + tris.y[:, 2]) / 3.0
    r = ad.stack(
        [ad.sqrt((tris.x[:, i] - cx) ** 2 + (tris.y[:, i] - cy) ** 2 + ad.SMOOTH_ABS_EPS**2) for i in range(3)],
        axis=1,
    )
    return [cx, cy, -ad.soft_min(-r, 4.0, axis=1)]


# table layout: 0-8 edge functions, 9-11 depth plane, 12 shade, 13 depth cap, 14-16 disc
def _face_table(tris, shades, params):
    cols = _edge_coefficients(tris, params.s) + _depth_coefficients(tris) + [shades]
    cols.append(_depth_cap(tris, params.o, params.extrapolation_margin))
    if params.visibility_decay is not None:
        cols += _disc(tris)
    return ad.stack(cols, axis=1)


def _log_visibility(cols, px, py, params):
    d = [cols[3 * e] + cols[3 * e + 1] * px + cols[3 * e + 2] * py for e in range(3)]
    pos = ad.log_sigmoid(d[0]) + ad.log_sigmoid(d[1]) + ad.log_sigmoid(d[2])
    neg = ad.log_sigmoid(-d[0]) + ad.log_sigmoid(-d[1]) + ad.log_sigmoid(-d[2])
    # pixel y points down, so faces wound counter-clockwise toward the camera
    # have d_e < 0 inside; the single-sided mode keeps only that branch
    logv = ad.logaddexp(pos, neg) if params.orientation_invariant else neg
    if params.visibility_decay is not None:
        r = ad.sqrt((px - cols[14]) ** 2 + (py - cols[15]) ** 2 + ad.SMOOTH_ABS_EPS**2)
        logv = logv - ad.softplus(r - cols[16]) ** 2 / params.visibility_decay
    return logv


def _depth(cols, px, py):
    return cols[9] + cols[10] * px + cols[11] * py


def _depth_logit(cols, px, py, o):
    """-o * depth, softly capped by the per-triangle cap in column 13."""
    cap = cols[13]
    return cap - ad.softplus(cap + o * _depth(cols, px, py))


def _pair_logits(cols, px, py, params):
    logv = _log_visibility(cols, px, py, params)
    return _depth_logit(cols, px, py, params.o) + logv, logv


# ---------------------------------------------------------------------------
# single-pixel operations


def _single_cols(tris, params):
    cols = _edge_coefficients(tris, params.s) + _depth_coefficients(tris) + [np.zeros(len(tris))]
    cols.append(_depth_cap(tris, params.o, params.extrapolation_margin))
    if params.visibility_decay is not None:
        cols += _disc(tris)
    return cols


def visibility(pixel, tris, s, orientation_invariant=True, visibility_decay=None):
    """Soft coverage V of pixel (px, py) by each triangle, in (0, 1)."""
    params = RenderParams(s=s, orientation_invariant=orientation_invariant, visibility_decay=visibility_decay)
    cols = _single_cols(tris, params)
    return ad.exp(_log_visibility(cols, pixel[0], pixel[1], params), clamp=False)


def smooth_zdepth(pixel, tris, o=25.0, margin=30.0):
    """Depth of each triangle's plane at the pixel.

    Outside the triangle the plane is extrapolated, with its approach toward
    the camera softly limited (see module docstring); ``o`` sets the cap's
    scale and ``margin=None`` gives the raw plane.
    """
    a, b, c = _depth_coefficients(tris)
    plane = a + b * pixel[0] + c * pixel[1]
    if margin is None:
        return plane
    cap = _depth_cap(tris, o, margin)
    return -(cap - ad.softplus(cap + o * plane)) / o


def smooth_zbuffer(pixel, tris, v_row, o, margin=30.0):
    """Blend weights wSoftMin(o * depth, V) of the triangles at one pixel."""
    return wsoftmin(o * smooth_zdepth(pixel, tris, o, margin), v_row)


# ---------------------------------------------------------------------------
# background


def resolve_background_depth(tris, params):
    """Explicit ``params.background_depth`` or a depth just behind the scene.

    The automatic choice is the scene's maximum depth plus the larger of
    BACKGROUND_MARGIN * depth range and BACKGROUND_GAP / o; the second term
    keeps the background's weight below exp(-BACKGROUND_GAP) behind any
    fully covered pixel, even for flat scenes. It is a constant of the
    render: gradients do not flow into it.
    """
    if params.background_depth is not None:
        return float(params.background_depth)
    if len(tris) == 0:
        return 1.0
    z = ad.value_of(tris.z)
    zmax, zmin = float(z.max()), float(z.min())
    return zmax + max(BACKGROUND_MARGIN * (zmax - zmin), BACKGROUND_GAP / params.o)


def background_triangles(camera, depth, temperature):
    W, H = camera.width, camera.height
    corners = np.array([(-W, -H), (2 * W, -H), (2 * W, 2 * H), (-W, 2 * H)], dtype=np.float64)
    x = np.array([corners[[0, 1, 2], 0], corners[[0, 2, 3], 0]])
    y = np.array([corners[[0, 1, 2], 1], corners[[0, 2, 3], 1]])
    z = np.full((2, 3), float(depth))
    return ScreenTriangles.from_corners(x, y, z, temperature)


def add_background(tris, camera, params, shades=None, depth=None):
    """Append the two background triangles; returns (triangles, shades)."""
    if depth is None:
        depth = resolve_background_depth(tris, params)
    if len(tris) and depth <= float(ad.value_of(tris.z).max()):
        warnings.warn(
            f"background depth {depth:.6g} does not exceed the scene's maximum depth", stacklevel=2
        )
    bg = background_triangles(camera, depth, params.s)
    bg_shades = np.full(2, params.background_intensity)
    if len(tris) == 0:
        return bg, bg_shades
    shades = np.zeros(len(tris)) if shades is None else shades
    return tris.concat(bg), ad.concatenate([shades, bg_shades])


# ---------------------------------------------------------------------------
# rendering


def _upper_bound(cols, cx, cy, hx, hy, params):
    """Upper bound of a triangle's logit over the box center +- half-size.

    Uses sigma(x) <= exp(min(x, 0)), the depth cap, and the fact that each
    edge function is linear, so its range over a box is center +- radius.
    Broadcasts like the face-table columns ``cols``.
    """
    lo_neg, lo_pos = 0.0, 0.0
    for e in range(3):
        a, b, c = cols[3 * e], cols[3 * e + 1], cols[3 * e + 2]
        center = a + b * cx + c * cy
        radius = np.abs(b) * hx + np.abs(c) * hy
        lo_neg = lo_neg + np.minimum(radius - center, 0.0)  # log sigma(-d) <= min(-d, 0)
        lo_pos = lo_pos + np.minimum(center + radius, 0.0)
    bound = np.maximum(lo_neg, lo_pos) + np.log(2.0) if params.orientation_invariant else lo_neg
    return bound + cols[13]


def select_pairs(table, px, py, params, n_background=2, tile=TILE):
    """Pixel/triangle pairs whose logit is within cull_log_ratio of the pixel's best.

    The last ``n_background`` rows of ``table`` are evaluated at every
    pixel and give a lower bound on each pixel's best logit. Scene
    triangles are first screened per ``tile`` x ``tile`` block of pixels
    with :func:`_upper_bound`, then per pixel; survivors are evaluated
    exactly. The
    selection equals that of evaluating every pair exactly.
    Returns (pixel_index, triangle_index) sorted by pixel then triangle.
    """
    table = ad.value_of(table)
    n_pix, n_tri = len(px), table.shape[0]
    n_scene = n_tri - n_background
    bg = [table[n_scene:, k][None, :] for k in range(table.shape[1])]
    floor = _pair_logits(bg, px[:, None], py[:, None], params)[0].max(axis=1) - params.cull_log_ratio

    # group pixels into tiles and bound each tile
    keys = np.floor(px / tile).astype(np.int64) * (1 << 32) + np.floor(py / tile).astype(np.int64)
    _, tile_of = np.unique(keys, return_inverse=True)
    n_tiles = tile_of.max() + 1 if n_pix else 0
    order = np.argsort(tile_of, kind="stable")
    counts = np.bincount(tile_of, minlength=n_tiles)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    box = [np.full(n_tiles, np.inf), np.full(n_tiles, -np.inf), np.full(n_tiles, np.inf), np.full(n_tiles, -np.inf)]
    np.minimum.at(box[0], tile_of, px)
    np.maximum.at(box[1], tile_of, px)
    np.minimum.at(box[2], tile_of, py)
    np.maximum.at(box[3], tile_of, py)
    tile_floor = np.full(n_tiles, np.inf)
    np.minimum.at(tile_floor, tile_of, floor)
    cx, hx = (box[0] + box[1]) / 2, (box[1] - box[0]) / 2
    cy, hy = (box[2] + box[3]) / 2, (box[3] - box[2]) / 2
    scene_cols = [table[:n_scene, j][None, :] for j in range(table.shape[1])]
    ub = _upper_bound(scene_cols, cx[:, None], cy[:, None], hx[:, None], hy[:, None], params)
    k, t = np.nonzero(ub >= tile_floor[:, None])

    # expand surviving (tile, triangle) pairs to their pixels
    reps = counts[k]
    within = np.arange(reps.sum()) - np.repeat(np.cumsum(reps) - reps, reps)
    cand_pix = order[np.repeat(starts[k], reps) + within]
    cand_tri = np.repeat(t, reps)
    rows = table[cand_tri]
    ub = _upper_bound([rows[:, j] for j in range(rows.shape[1])], px[cand_pix], py[cand_pix], 0.0, 0.0, params)
    hit = ub >= floor[cand_pix]
    pix = np.concatenate([cand_pix[hit], np.repeat(np.arange(n_pix), n_background)])
    tri = np.concatenate([cand_tri[hit], np.tile(np.arange(n_scene, n_tri), n_pix)])

    rows = table[tri]
    logits = _pair_logits([rows[:, j] for j in range(rows.shape[1])], px[pix], py[pix], params)[0]
    best = np.full(n_pix, -np.inf)
    np.maximum.at(best, pix, logits)
    keep = logits >= best[pix] - params.cull_log_ratio
    pix, tri = pix[keep], tri[keep]
    order = np.lexsort((tri, pix))
    return pix[order], tri[order]


def render(mesh, camera, params=None, return_buffers=False):
    """Render ``mesh`` (vertices may be a Var) to a grayscale :class:`Image`.

    With ``return_buffers`` every pair is kept and ``(image, RasterBuffers)``
    is returned.
    """
    params = params or RenderParams()
    if mesh is not None and mesh.n_faces:
        tris = view_project(mesh, camera, params.s)
        shades = face_shades(mesh, camera, params)
    else:
        tris, shades = ScreenTriangles(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0)), None
    n_scene = len(tris)
    tris, shades = add_background(tris, camera, params, shades, resolve_background_depth(tris, params))
    table = _face_table(tris, shades, params)

    px, py = camera.pixel_centers()
    n_pix, n_tri = len(px), len(tris)
    if return_buffers or params.cull_log_ratio is None:
        pix = np.repeat(np.arange(n_pix), n_tri)
        tri = np.tile(np.arange(n_tri), n_pix)
    else:
        pix, tri = select_pairs(table, px, py, params)

    rows = ad.take(table, tri)
    cols = [rows[:, k] for k in range(ad.value_of(rows).shape[1])]
    logits, logv = _pair_logits(cols, px[pix], py[pix], params)
    weights = ad.segment_softmax(logits, pix, n_pix)
    bg = params.background_intensity
    intensity = bg + ad.segment_sum(weights * (cols[12] - bg), pix, n_pix)
    image = Image(camera.width, camera.height, ad.reshape(intensity, (camera.height, camera.width)))
    if not return_buffers:
        return image
    V = ad.reshape(ad.exp(logv, clamp=False), (n_pix, n_tri))
    zw = ad.reshape(weights, (n_pix, n_tri))
    return image, RasterBuffers(V, zw, n_scene)
