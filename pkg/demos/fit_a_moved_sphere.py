"""
Fitting a moved sphere from four pictures
=========================================

Render a translated, slightly bumpy sphere from four sides, then start
from the unit sphere and let Adam move the vertices until the renders
match. Takes under half a minute.
"""

import sys
from pathlib import Path

import numpy as np

from smoothrast.camera import orbit_camera
from smoothrast.losses import LossWeights
from smoothrast.mesh import Mesh, apply_params, icosphere, save_obj
from smoothrast.optim import AdamConfig, optimize
from smoothrast.renderer import RenderParams, render

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

base = icosphere(1)
v = base.values()
bump = 0.1 * np.exp(-((v - [0.0, 1.0, 0.0]) ** 2).sum(1) / 0.3)
truth = Mesh(v * (1 + bump)[:, None] + [0.15, 0.0, 0.0], base.faces)

params = RenderParams(visibility_decay=0.5)
cams = [orbit_camera(a, width=32, height=32) for a in (0, 90, 180, 270)]
targets = [(render(truth, c, params).values(), c) for c in cams]


def report(i, p, rep):
    if i % 25 == 0:
        err = np.linalg.norm(apply_params(base, p).values() - truth.values(), axis=1).mean()
        print(f"iter {i:4d}  loss {rep.total:.5f}  image {rep.image_l1:.5f}  vertex error {err:.4f}")


final, trace = optimize(
    base,
    targets,
    params,
    LossWeights(image=1.0, normal=0.01, edge=0.003, laplacian=0.001),
    AdamConfig(learning_rate=0.005, max_iterations=200),
    callback=report,
)
fitted = apply_params(base, final)
print("centroid moved by", (fitted.values().mean(0) - v.mean(0)).round(3), "(truth: 0.15, 0, 0)")
save_obj(fitted, out / "fitted.obj")
