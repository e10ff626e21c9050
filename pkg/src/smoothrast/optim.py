"""Adam, the render-and-compare loop and the render gradient check."""

from concurrent.futures import ThreadPoolExecutor
import dataclasses
from dataclasses import dataclass, field
import logging
import os

import numpy as np

from . import autodiff as ad
from .camera import Camera, FrustumError, view_project
from .losses import LossReport, LossWeights, image_l1, reg_edge_length, reg_laplacian, reg_normal_angle
from .mesh import Mesh, ShapeParams, apply_params, build_adjacency, decode_offsets
from .renderer import RenderParams, render, resolve_background_depth

log = logging.getLogger(__name__)

GRADCHECK_REL_FLOOR = 1e-4  # derivatives below this are compared absolutely


class OptimizationError(RuntimeError):
    """The loop had to stop; ``iteration`` says where."""

    def __init__(self, message, iteration):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    max_iterations: int = 2000
    log_every: int = 100
    snapshot_every: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        for b in (self.beta1, self.beta2):
            if not 0.0 <= b < 1.0:
                raise ValueError("Adam betas must lie in [0, 1)")
        if self.eps_hat < 0 or self.max_iterations < 0:
            raise ValueError("eps_hat and max_iterations must be nonnegative")


@dataclass
class OptState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params, grads, state, cfg):
    """One bias-corrected Adam update; returns (new params, new state)."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError(
            f"length mismatch: params {params.size}, grads {grads.size}, state {state.m.size}"
        )
    bad = np.flatnonzero(~np.isfinite(grads))
    if len(bad):
        raise FloatingPointError(f"non-finite gradient at parameter {bad[0]}")
    t = state.step + 1
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grads
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grads * grads
    m_hat = m / (1.0 - cfg.beta1**t)
    v_hat = v / (1.0 - cfg.beta2**t)
    denom = np.sqrt(v_hat) + cfg.eps_hat
    # zero gradient history with eps_hat = 0 would give 0/0
    update = np.divide(m_hat, denom, out=np.zeros_like(m_hat), where=denom > 0)
    return params - cfg.learning_rate * update, OptState(m, v, t)


@dataclass
class RunTrace:
    """Per-iteration loss reports (plain floats) and parameter snapshots."""

    reports: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)

    def csv_rows(self):
        for i, rep in enumerate(self.reports):
            yield (i,) + rep.values()


def _thread_count():
    try:
        return max(1, int(os.environ.get("SMOOTHRAST_THREADS", "1")))
    except ValueError:
        return 1


def _view_loss(base, init, vec, image, camera, render_params):
    """Image L1 of one view and its gradient wrt the flat parameter vector."""
    tape = ad.Tape()
    x = tape.leaf(vec)
    mesh = apply_params(base, init.with_vector(x))
    loss = image_l1(render(mesh, camera, render_params), image)
    return float(loss.value), tape.backward(loss)[x]


def _reg_loss(base, init, vec, weights, adjacency):
    tape = ad.Tape()
    x = tape.leaf(vec)
    mesh = apply_params(base, init.with_vector(x))
    terms = (reg_normal_angle(mesh, adjacency), reg_edge_length(mesh, adjacency), reg_laplacian(mesh, adjacency))
    total = weights.normal * terms[0] + weights.edge * terms[1] + weights.laplacian * terms[2]
    return [float(ad.value_of(t)) for t in terms], tape.backward(total)[x]


def evaluate(base, targets, vec, init, render_params, weights, adjacency=None, pool=None):
    """Loss report (floats) and total gradient for the flat parameter vector ``vec``.

    Each view gets its own tape; gradients are reduced in view order, so
    the result does not depend on whether views run concurrently.
    """
    adjacency = adjacency or build_adjacency(base)
    jobs = [(base, init, vec, img, cam, render_params) for img, cam in targets]
    results = list(pool.map(lambda a: _view_loss(*a), jobs)) if pool else [_view_loss(*a) for a in jobs]
    n = len(targets)
    grad = np.zeros_like(vec)
    image = 0.0
    for loss, g in results:
        image += loss / n
        grad += (weights.image / n) * g
    regs, reg_grad = _reg_loss(base, init, vec, weights, adjacency)
    grad += reg_grad
    total = weights.image * image + weights.normal * regs[0] + weights.edge * regs[1] + weights.laplacian * regs[2]
    return LossReport(image, regs[0], regs[1], regs[2], total), grad


def _check_targets(targets):
    if len(targets) == 0:
        raise ValueError("at least one target view is required")
    for k, (img, cam) in enumerate(targets):
        if not isinstance(cam, Camera):
            raise TypeError(f"target {k}: expected a Camera")
        shape = np.shape(ad.value_of(getattr(img, "pixels", img)))
        if shape != (cam.height, cam.width):
            raise ValueError(f"target {k}: image shape {shape} does not match camera {cam.height}x{cam.width}")


def optimize(base, targets, render_params=None, loss_weights=None, adam_cfg=None, init=None, callback=None):
    """Fit ShapeParams so renders of the deformed ``base`` match ``targets``.

    ``targets`` is a list of (Image or array, Camera). ``callback(i, params,
    report)`` runs after each iteration's loss evaluation, before the step.
    Returns (final ShapeParams, RunTrace).
    """
    render_params = render_params or RenderParams()
    weights = loss_weights or LossWeights()
    cfg = adam_cfg or AdamConfig()
    init = init or ShapeParams.zeros(base)
    _check_targets(targets)
    targets = [(ad.value_of(getattr(img, "pixels", img)), cam) for img, cam in targets]
    adjacency = build_adjacency(base)

    vec = init.to_vector()
    state = OptState.zeros(vec.size)
    trace = RunTrace()
    threads = min(_thread_count(), len(targets))
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for it in range(cfg.max_iterations):
            try:
                report, grad = evaluate(base, targets, vec, init, render_params, weights, adjacency, pool)
            except FrustumError as exc:
                raise OptimizationError(str(exc), it) from exc
            except (ad.NonFiniteError, FloatingPointError) as exc:
                raise OptimizationError(f"non-finite value: {exc}", it) from exc
            if not np.isfinite(report.total):
                raise OptimizationError("non-finite loss", it)
            trace.reports.append(report)
            if cfg.snapshot_every and it % cfg.snapshot_every == 0:
                trace.snapshots[it] = vec.copy()
            if callback is not None:
                callback(it, init.with_vector(vec.copy()), report)
            if cfg.log_every and it % cfg.log_every == 0:
                log.info("iter %d  image %.6g  total %.6g", it, report.image_l1, report.total)
            try:
                vec, state = adam_step(vec, grad, state, cfg)
            except FloatingPointError as exc:
                raise OptimizationError(str(exc), it) from exc
            offsets = decode_offsets(init.with_vector(vec))
            if not np.all(np.abs(offsets) < init.max_offset):
                raise OptimizationError("decoded offset escaped its bound", it)
    finally:
        if pool is not None:
            pool.shutdown()
    final = init.with_vector(vec)
    if cfg.snapshot_every:
        trace.snapshots[cfg.max_iterations] = vec.copy()
    return final, trace


# ---------------------------------------------------------------------------
# gradient check of the renderer


@dataclass
class GradcheckReport:
    """One row per probe: scene name, vertex, coordinate, analytic, numeric, relative error."""

    rows: list

    @property
    def max_rel_err(self):
        return max((r[-1] for r in self.rows), default=0.0)

    def table(self):
        lines = [f"{'scene':<10} {'vertex':>6} {'coord':>5} {'analytic':>14} {'numeric':>14} {'rel_err':>10}"]
        for scene, v, c, a, n, e in self.rows:
            lines.append(f"{scene:<10} {v:>6d} {'xyz'[c]:>5} {a:>14.7g} {n:>14.7g} {e:>10.3g}")
        return "\n".join(lines)


def occlusion_scene(gap=0.0):
    """Two parallel squares facing the camera, the front one ``gap`` closer.

    At ``gap=0`` they coincide in depth: the point where a hard z-buffer
    switches discontinuously between them.
    """
    quad = np.array([[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]])
    back = np.c_[quad + 0.15, np.zeros(4)]
    front = np.c_[quad - 0.15, np.full(4, -gap)]
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    mesh = Mesh(np.vstack([back, front]), np.vstack([faces, faces + 4]))
    camera = Camera(eye=(0.0, 0.0, -3.0), width=32, height=32)
    return mesh, camera


def pin_background(mesh, camera, params):
    """``params`` with the automatic background depth fixed at this geometry.

    The automatic depth follows the scene's farthest vertex without
    carrying gradient, so finite differences must not see it move.
    """
    tris = view_project(mesh.detached(), camera, params.s)
    return dataclasses.replace(params, background_depth=resolve_background_depth(tris, params))


def pixel_sum(mesh, camera, params):
    return ad.sum_(render(mesh, camera, params).pixels)


def probe_gradients(mesh, camera, params, probes, step):
    """Analytic and central-difference derivatives of the pixel sum for (vertex, coord) probes."""
    verts = mesh.values()
    tape = ad.Tape()
    v = tape.leaf(verts)
    grad = tape.backward(pixel_sum(Mesh(v, mesh.faces), camera, params))[v]
    out = []
    for vi, c in probes:
        w = verts.copy()
        w[vi, c] += step
        hi = float(pixel_sum(Mesh(w, mesh.faces), camera, params))
        w[vi, c] -= 2 * step
        lo = float(pixel_sum(Mesh(w, mesh.faces), camera, params))
        out.append((float(grad[vi, c]), (hi - lo) / (2 * step)))
    return out


def gradcheck_render(mesh, camera, params=None, n_probes=8, step=1e-5, seed=0, include_occlusion=True):
    """Reverse-mode vs central differences of the pixel sum at random probes.

    Relative errors use max(|analytic|, |numeric|, GRADCHECK_REL_FLOOR) as
    the scale. With ``include_occlusion`` the coincident-depth two-square
    scene is probed too.
    """
    if n_probes < 1:
        raise ValueError("n_probes must be at least 1")
    params = params or RenderParams()
    rng = np.random.default_rng(seed)
    scenes = [("scene", mesh, camera)]
    if include_occlusion:
        scenes.append(("occlusion", *occlusion_scene()))
    rows = []
    for name, m, cam in scenes:
        fixed = pin_background(m, cam, params)
        probes = [(int(rng.integers(m.n_vertices)), int(rng.integers(3))) for _ in range(n_probes)]
        for (vi, c), (a, n) in zip(probes, probe_gradients(m, cam, fixed, probes, step)):
            rows.append((name, vi, c, a, n, float(ad.relative_error(a, n, GRADCHECK_REL_FLOOR))))
    return GradcheckReport(rows)
