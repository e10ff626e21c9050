"""
Checking gradients against finite differences
=============================================

The sum of all pixels is a scalar function of the vertex coordinates.
Compare its reverse-mode gradient with central differences at a few
random coordinates, on a sphere and on two coincident squares.
"""

from smoothrast.camera import orbit_camera
from smoothrast.mesh import icosphere
from smoothrast.optim import gradcheck_render
from smoothrast.renderer import RenderParams

report = gradcheck_render(icosphere(1), orbit_camera(30.0, width=32, height=32), RenderParams(s=40, o=40), n_probes=6)
print(report.table())
print("largest relative error:", f"{report.max_rel_err:.2e}")

# Very sharp edges on tiny triangles need a smaller step: the central
# difference error grows with the square of (step * edge sharpness).
