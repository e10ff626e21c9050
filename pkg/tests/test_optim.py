import numpy as np
import pytest

from smoothrast import autodiff as ad
from smoothrast.camera import Camera, orbit_camera
from smoothrast.losses import LossWeights
from smoothrast.mesh import Mesh, ShapeParams, SymmetrySpec, apply_params, decode_offsets, icosphere
from smoothrast.optim import (
    AdamConfig,
    OptimizationError,
    OptState,
    adam_step,
    evaluate,
    gradcheck_render,
    occlusion_scene,
    optimize,
    pin_background,
    pixel_sum,
)
from smoothrast.renderer import RenderParams, render

from scenes import soup


# ---------------------------------------------------------------------------
# Adam


def test_zero_gradient_leaves_params():
    p = np.array([1.0, -2.0, 3.0])
    new, st = adam_step(p, np.zeros(3), OptState.zeros(3), AdamConfig())
    np.testing.assert_array_equal(new, p)
    assert st.step == 1


def test_first_step_is_lr_times_sign():
    cfg = AdamConfig(learning_rate=0.01)
    g = np.array([3.0, -0.5, 1e-3])
    new, _ = adam_step(np.zeros(3), g, OptState.zeros(3), cfg)
    expected = -0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(new, expected, rtol=1e-12)
    np.testing.assert_allclose(new, -0.01 * np.sign(g), rtol=1e-4)


def test_constant_gradient_unit_step():
    cfg = AdamConfig(learning_rate=0.1)
    p, st = np.zeros(2), OptState.zeros(2)
    g = np.array([5.0, -0.02])
    for _ in range(500):
        prev = p
        p, st = adam_step(p, g, st, cfg)
    np.testing.assert_allclose(p - prev, -0.1 * np.sign(g), rtol=1e-5)


def test_gradient_scale_invariance():
    cfg = AdamConfig(learning_rate=0.05, eps_hat=0.0)
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(20, 4))
    runs = []
    for scale in (1.0, 1e4):
        p, st = np.zeros(4), OptState.zeros(4)
        for g in grads:
            p, st = adam_step(p, scale * g, st, cfg)
        runs.append(p)
    np.testing.assert_allclose(runs[0], runs[1], rtol=1e-12)


def test_adam_errors():
    with pytest.raises(ValueError, match="length mismatch"):
        adam_step(np.zeros(3), np.zeros(2), OptState.zeros(3), AdamConfig())
    with pytest.raises(FloatingPointError, match="parameter 1"):
        adam_step(np.zeros(3), np.array([0.0, np.nan, 1.0]), OptState.zeros(3), AdamConfig())
    for kw in (dict(learning_rate=0.0), dict(beta1=1.0), dict(beta2=-0.1), dict(max_iterations=-1)):
        with pytest.raises(ValueError):
            AdamConfig(**kw)


def test_adam_deterministic():
    rng = np.random.default_rng(1)
    g = rng.normal(size=(5, 6))
    out = []
    for _ in range(2):
        p, st = np.ones(6), OptState.zeros(6)
        for gi in g:
            p, st = adam_step(p, gi, st, AdamConfig())
        out.append(p.tobytes())
    assert out[0] == out[1]


# ---------------------------------------------------------------------------
# optimization loop


def small_views(size=24):
    return [orbit_camera(a, width=size, height=size) for a in (0.0, 90.0, 180.0, 270.0)]


def test_zero_iterations_returns_init():
    base = icosphere(1)
    cams = small_views()
    targets = [(render(base, c), c) for c in cams]
    init = ShapeParams(np.full(3 * base.n_vertices, 0.1), np.array([0.01, 0.0, 0.0]), 0.05)
    final, trace = optimize(base, targets, adam_cfg=AdamConfig(max_iterations=0), init=init)
    np.testing.assert_array_equal(final.to_vector(), init.to_vector())
    assert trace.reports == []


@pytest.mark.xfail(
    strict=True,
    reason="L1 at an exact match has a sign-noise gradient; Adam turns it into lr-sized steps "
    "on every coordinate, which costs far more than 1% of the small regularizer-only total",
)
def test_self_rendered_targets_are_stationary():
    base = icosphere(2)
    cams = small_views(64)
    targets = [(render(base, c), c) for c in cams]
    _, trace = optimize(base, targets, adam_cfg=AdamConfig(max_iterations=100))
    assert trace.reports[0].image_l1 < 1e-12
    assert trace.reports[-1].total <= 1.01 * trace.reports[0].total


def test_self_rendered_targets_stay_near_minimal():
    base = icosphere(1)
    cams = small_views()
    targets = [(render(base, c), c) for c in cams]
    _, trace = optimize(base, targets, adam_cfg=AdamConfig(max_iterations=100))
    # the excursion stays at the scale of one Adam step
    assert max(r.image_l1 for r in trace.reports) < 0.01
    assert trace.reports[-1].total < 2 * trace.reports[0].total


def test_translation_recovery_small():
    base = icosphere(1)
    cams = small_views(32)
    moved = Mesh(base.values() + [0.2, 0.0, 0.0], base.faces)
    targets = [(render(moved, c), c) for c in cams]
    final, trace = optimize(
        base,
        targets,
        loss_weights=LossWeights(1.0, 0.0, 0.0, 0.0),
        adam_cfg=AdamConfig(learning_rate=0.01, max_iterations=150),
    )
    shift = apply_params(base, final).values().mean(0) - base.values().mean(0)
    assert np.linalg.norm(shift - [0.2, 0.0, 0.0]) < 0.02


def test_optimize_deterministic_and_threads(monkeypatch):
    base = icosphere(1)
    cams = small_views()
    moved = Mesh(base.values() * 1.1, base.faces)
    targets = [(render(moved, c), c) for c in cams]
    cfg = AdamConfig(learning_rate=0.01, max_iterations=5)
    runs = []
    for threads in ("1", "1", "3"):
        monkeypatch.setenv("SMOOTHRAST_THREADS", threads)
        final, trace = optimize(base, targets, adam_cfg=cfg)
        runs.append((final.to_vector().tobytes(), [r.values() for r in trace.reports]))
    assert runs[0] == runs[1] == runs[2]


def test_callback_snapshots_and_bounds():
    base = icosphere(1)
    cams = small_views()[:2]
    targets = [(render(Mesh(base.values() * 1.05, base.faces), c), c) for c in cams]
    seen = []
    cfg = AdamConfig(learning_rate=0.05, max_iterations=6, snapshot_every=2)
    init = ShapeParams.zeros(base, max_offset=0.1)
    final, trace = optimize(base, targets, adam_cfg=cfg, init=init, callback=lambda i, p, r: seen.append(i))
    assert seen == list(range(6))
    assert sorted(trace.snapshots) == [0, 2, 4, 6]
    np.testing.assert_array_equal(trace.snapshots[6], final.to_vector())
    assert np.all(np.abs(decode_offsets(final)) < 0.1)
    rows = list(trace.csv_rows())
    assert len(rows) == 6 and rows[0][0] == 0 and len(rows[0]) == 6


def test_symmetric_parameterization_optimizes():
    base = icosphere(1)
    sym = SymmetrySpec.build(base)
    cams = small_views()[:2]
    targets = [(render(Mesh(base.values() * 1.05, base.faces), c), c) for c in cams]
    init = ShapeParams.zeros(base, sym)
    final, _ = optimize(base, targets, adam_cfg=AdamConfig(learning_rate=0.01, max_iterations=3), init=init)
    assert final.n_raw == 3 * sym.n_free


def test_frustum_violation_aborts_with_iteration():
    base = icosphere(1)
    cam = Camera(eye=(0.0, 0.0, -1.05), width=16, height=16)
    targets = [(np.ones((16, 16)), cam)]
    init = ShapeParams(np.zeros(3 * base.n_vertices), np.array([0.0, 0.0, -0.5]))
    with pytest.raises(OptimizationError, match="iteration 0") as info:
        optimize(base, targets, adam_cfg=AdamConfig(max_iterations=3), init=init)
    assert info.value.iteration == 0


def test_target_validation():
    base = icosphere(0)
    cam = orbit_camera(0.0, width=16, height=16)
    with pytest.raises(ValueError):
        optimize(base, [])
    with pytest.raises(ValueError, match="does not match"):
        optimize(base, [(np.ones((8, 8)), cam)])


def test_evaluate_gradient_matches_fd():
    base = icosphere(1)
    cams = small_views(16)[:2]
    targets = [(render(Mesh(base.values() * 1.1 + [0.05, 0, 0], base.faces), c).values(), c) for c in cams]
    rng = np.random.default_rng(2)
    init = ShapeParams(rng.normal(scale=0.1, size=3 * base.n_vertices), np.zeros(3), 0.0)
    params = RenderParams(background_depth=10.0)
    vec = init.to_vector()
    weights = LossWeights()
    _, grad = evaluate(base, targets, vec, init, params, weights)
    h = 1e-6
    for i in [0, 7, 50, vec.size - 4, vec.size - 1]:
        e = np.zeros_like(vec)
        e[i] = h
        hi = evaluate(base, targets, vec + e, init, params, weights)[0].total
        lo = evaluate(base, targets, vec - e, init, params, weights)[0].total
        assert ad.relative_error(grad[i], (hi - lo) / (2 * h), 1e-4) < 1e-4


# ---------------------------------------------------------------------------
# gradient check harness


def test_gradcheck_single_triangle():
    tri = [[[-0.5, -0.5, 0.0], [0.5, -0.4, 0.1], [0.0, 0.5, -0.1]]]
    cam = Camera(eye=(0.0, 0.0, -3.0), width=24, height=24)
    rep = gradcheck_render(soup(tri), cam, n_probes=9, include_occlusion=False)
    assert rep.max_rel_err < 1e-4
    assert len(rep.rows) == 9
    assert "analytic" in rep.table()


def test_gradcheck_occlusion_crossing():
    mesh, cam = occlusion_scene(0.0)
    rep = gradcheck_render(mesh, cam, n_probes=12, include_occlusion=False)
    assert rep.max_rel_err < 1e-3
    assert all(np.isfinite(r[3]) for r in rep.rows)


def test_gradcheck_includes_occlusion_scene():
    rep = gradcheck_render(icosphere(1), orbit_camera(0.0, width=24, height=24), n_probes=3)
    assert {r[0] for r in rep.rows} == {"scene", "occlusion"}
    with pytest.raises(ValueError):
        gradcheck_render(icosphere(0), orbit_camera(0.0), n_probes=0)


def test_detached_geometry_has_zero_gradient():
    mesh, cam = occlusion_scene(0.1)
    t = ad.Tape()
    v = t.leaf(mesh.values())
    frozen = Mesh(v, mesh.faces).detached()
    out = ad.sum_(v * 0.0) + pixel_sum(frozen, cam, RenderParams())
    assert np.all(t.backward(out)[v] == 0.0)


def test_pin_background_fixes_depth():
    mesh, cam = occlusion_scene(0.1)
    p = pin_background(mesh, cam, RenderParams())
    assert p.background_depth is not None and p.background_depth > 3.0
