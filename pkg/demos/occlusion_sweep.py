"""
Sliding one face through another
================================

Two large triangles face the camera. The rear one is pushed forward until
it passes the front one, and we watch the center pixel. With a hard
z-buffer the pixel would jump from one shade to the other; here it follows
a sigmoid in the depth gap, and its derivative exists right at the crossing.
"""

import numpy as np

from smoothrast import autodiff as ad
from smoothrast.camera import Camera
from smoothrast.mesh import Mesh
from smoothrast.renderer import RenderParams, render


def faces(gap, tilt=0.3):
    tri = np.array([[-3.0, -2.0, 0.0], [3.0, -2.0, 0.0], [0.0, 3.0, 0.0]])
    c, s = np.cos(tilt), np.sin(tilt)
    rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    front, back = tri + [0, 0, 2.0], tri @ rot.T + [0, 0, 2.0 + gap]
    return Mesh(np.vstack([front, back]), [[0, 1, 2], [3, 4, 5]])


cam = Camera(eye=(0.0, 0.0, -1.0), width=16, height=16)
params = RenderParams(o=25.0, background_depth=50.0)

print(" gap     center pixel")
for gap in np.linspace(-0.3, 0.3, 13):
    value = render(faces(gap), cam, params).values()[8, 8]
    print(f"{gap:+.2f}   {value:.5f}  " + "#" * int(60 * value))

# derivative of the center pixel with respect to every vertex coordinate, at the crossing
mesh = faces(0.0)
tape = ad.Tape()
v = tape.leaf(mesh.values())
pixel = render(Mesh(v, mesh.faces), cam, params).pixels[8, 8]
grad = tape.backward(pixel)[v]
print("d pixel / d z of the rear face corners:", grad[3:, 2].round(5))
