"""Look-at pinhole camera and the differentiable projection to pixel space.

Pixel space: origin at the top-left image corner, +x right, +y down, pixel
centers at integer + 0.5. View depth is positive in front of the camera.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class FrustumError(ValueError):
    """A vertex lies closer to the camera than the near plane."""

    def __init__(self, vertex, depth, near):
        super().__init__(f"vertex {vertex} has view depth {depth:.6g} < near plane {near:.6g}")
        self.vertex = vertex


@dataclass(frozen=True)
class Camera:
    eye: tuple
    look_at: tuple = (0.0, 0.0, 0.0)
    up: tuple = (0.0, 1.0, 0.0)
    fov_y: float = np.radians(45.0)
    width: int = 64
    height: int = 64
    near: float = 0.1

    def __post_init__(self):
        for name in ("eye", "look_at", "up"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if v.shape != (3,) or not np.all(np.isfinite(v)):
                raise ValueError(f"camera {name} must be a finite 3-vector")
            object.__setattr__(self, name, tuple(float(x) for x in v))
        forward = np.subtract(self.look_at, self.eye)
        if np.linalg.norm(forward) < 1e-12:
            raise ValueError("camera eye and look_at coincide")
        if np.linalg.norm(np.cross(forward, self.up)) < 1e-9 * np.linalg.norm(forward) * np.linalg.norm(self.up):
            raise ValueError("camera up vector is parallel to the view direction")
        if not 0.0 < self.fov_y < np.pi:
            raise ValueError("fov_y must lie in (0, pi)")
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise ValueError("image dimensions must be positive")
        if self.near <= 0:
            raise ValueError("near must be positive")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def focal(self):
        """Focal length in pixels."""
        return (self.height / 2.0) / np.tan(self.fov_y / 2.0)

    def basis(self):
        """Rows (right, up, forward) of the world-to-view rotation."""
        forward = np.subtract(self.look_at, self.eye)
        forward = forward / np.linalg.norm(forward)
        right = np.cross(self.up, forward)
        right /= np.linalg.norm(right)
        true_up = np.cross(forward, right)
        return np.stack([right, true_up, forward])

    def pixel_centers(self):
        """(px, py) of all pixel centers in row-major order."""
        ys, xs = np.mgrid[0 : self.height, 0 : self.width]
        return xs.ravel() + 0.5, ys.ravel() + 0.5


def orbit_camera(azimuth_deg, elevation_deg=20.0, distance=3.5, target=(0.0, 0.0, 0.0), **kwargs):
    """Camera on a sphere around ``target``; azimuth 0 puts the eye on the -z side."""
    az, el = np.radians(azimuth_deg), np.radians(elevation_deg)
    offset = distance * np.array([np.sin(az) * np.cos(el), np.sin(el), -np.cos(az) * np.cos(el)])
    return Camera(eye=tuple(np.add(target, offset)), look_at=tuple(target), **kwargs)


def to_view(vertices, camera):
    """View-space coordinates (N x 3, last column = depth)."""
    if ad.is_var(vertices):
        return _to_view_var(vertices, camera)
    return (np.asarray(vertices) - np.asarray(camera.eye)) @ camera.basis().T


def _to_view_var(vertices, camera):
    R = camera.basis()
    rel = vertices - np.asarray(camera.eye)
    cols = [ad.sum_(rel * R[k], axis=1) for k in range(3)]
    return ad.stack(cols, axis=1)


def project_points(vertices, camera, check=True):
    """Pixel coordinates and view depths of points: returns (x_pix, y_pix, z_view)."""
    view = to_view(vertices, camera)
    z = view[:, 2]
    zv = ad.value_of(z)
    if check and len(zv):
        bad = np.flatnonzero(zv < camera.near)
        if len(bad):
            raise FrustumError(int(bad[0]), float(zv[bad[0]]), camera.near)
    f = camera.focal
    x_pix = view[:, 0] / z * f + camera.width / 2.0
    y_pix = -(view[:, 1] / z) * f + camera.height / 2.0
    return x_pix, y_pix, z


@dataclass(frozen=True)
class ScreenTriangles:
    """A batch of projected triangles.

    ``x``, ``y``: pixel coordinates of the corners (T x 3); ``z``: view depth
    of the corners (T x 3); ``m``: softmin edge length in pixels (T,).
    Fields are arrays or Vars.
    """

    x: object
    y: object
    z: object
    m: object

    def __len__(self):
        return ad.value_of(self.x).shape[0]

    @property
    def xy(self):
        return np.stack([ad.value_of(self.x), ad.value_of(self.y)], axis=-1)

    @classmethod
    def from_corners(cls, x, y, z, temperature):
        """Build triangles from corner arrays, computing m with the given softmin temperature."""
        return cls(x, y, z, softmin_edge_length(x, y, temperature))

    def concat(self, other):
        return ScreenTriangles(
            *(ad.concatenate([getattr(self, k), getattr(other, k)]) for k in ("x", "y", "z", "m"))
        )


def softmin_edge_length(x, y, temperature):
    dx = ad.stack([x[:, 1] - x[:, 0], x[:, 2] - x[:, 1], x[:, 0] - x[:, 2]], axis=1)
    dy = ad.stack([y[:, 1] - y[:, 0], y[:, 2] - y[:, 1], y[:, 0] - y[:, 2]], axis=1)
    lengths = ad.sqrt(dx * dx + dy * dy + ad.SMOOTH_ABS_EPS**2)
    return ad.soft_min(lengths, temperature, axis=1)


def view_project(mesh, camera, temperature=25.0):
    """Project every face of ``mesh``; raises FrustumError for vertices before the near plane."""
    x_pix, y_pix, z = project_points(mesh.vertices, camera)
    f = mesh.faces
    x = ad.stack([ad.take(x_pix, f[:, k]) for k in range(3)], axis=1)
    y = ad.stack([ad.take(y_pix, f[:, k]) for k in range(3)], axis=1)
    zz = ad.stack([ad.take(z, f[:, k]) for k in range(3)], axis=1)
    return ScreenTriangles.from_corners(x, y, zz, temperature)
