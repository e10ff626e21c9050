"""
Steepness and opacity
=====================

Render one icosphere over a grid of edge steepness ``s`` and opacity ``o``
and compare each image with a plain point-sampled z-buffer render.
Images go to ./demo_out (or the directory given as the first argument).
"""

import sys
from pathlib import Path

import numpy as np

from smoothrast.camera import Camera
from smoothrast.images import write_image
from smoothrast.mesh import icosphere
from smoothrast.reference import hard_render
from smoothrast.renderer import RenderParams, render

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

mesh = icosphere(2)
cam = Camera(eye=(0.0, 0.0, -3.0), fov_y=np.radians(60.0), width=96, height=96)

# the hard render is the limit the smooth one should approach
hard = hard_render(mesh, cam, RenderParams().lighting)
write_image(out / "hard.pgm", hard)

values = (5, 25, 100, 200)
print("mean |smooth - hard|, rows s, columns o =", values)
for s in values:
    row = []
    for o in values:
        img = render(mesh, cam, RenderParams(s=s, o=o)).values()
        write_image(out / f"sphere_s{s}_o{o}.pgm", img)
        row.append(np.abs(img - hard).mean())
    print(f"s={s:>3}  " + "  ".join(f"{x:.4f}" for x in row))

# Low s blurs every edge. Low o lets the far side of the sphere show
# through the near side. High o at fixed s spreads the silhouette outward a
# little, since the near surface then outbids the background by a wide
# margin wherever its visibility has not yet fallen off.
