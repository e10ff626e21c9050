"""Image loss and mesh regularizers.

Every term is a mean (over pixels, edges or vertices), so default weights do
not depend on resolution or mesh size. All functions accept plain arrays or
Vars and return a scalar of the same kind.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .mesh import build_adjacency, face_geometry


class IsolatedVertexError(ValueError):
    """A vertex has no neighbors, so its Laplacian is undefined."""

    def __init__(self, vertex):
        super().__init__(f"vertex {vertex} has no neighbors")
        self.vertex = vertex


@dataclass(frozen=True)
class LossWeights:
    image: float = 1.0
    normal: float = 0.03
    edge: float = 0.01
    laplacian: float = 0.003

    def __post_init__(self):
        for name in ("image", "normal", "edge", "laplacian"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"loss weight {name} must be nonnegative")


@dataclass
class LossReport:
    image_l1: object
    reg_normal: object
    reg_edge: object
    reg_laplacian: object
    total: object

    CSV_COLUMNS = ("image_l1", "reg_normal", "reg_edge", "reg_laplacian", "total")

    def values(self):
        """Plain floats in CSV column order."""
        return tuple(float(ad.value_of(getattr(self, k))) for k in self.CSV_COLUMNS)


def _pixels(image):
    return image.pixels if hasattr(image, "pixels") else image


def image_l1(a, b):
    """Mean absolute per-pixel difference."""
    pa, pb = _pixels(a), _pixels(b)
    if ad.value_of(pa).shape != ad.value_of(pb).shape:
        raise ValueError(f"image shapes differ: {ad.value_of(pa).shape} vs {ad.value_of(pb).shape}")
    return ad.mean(ad.absolute(pa - pb))


def reg_normal_angle(mesh, adjacency=None):
    """Mean over interior edges of |n1 - n2|^2 (= 2 - 2 cos of the dihedral angle)."""
    adjacency = adjacency or build_adjacency(mesh)
    pairs = adjacency.edge_faces
    if len(pairs) == 0:
        return 0.0
    normals, _, _ = face_geometry(mesh)
    diff = ad.take(normals, pairs[:, 0]) - ad.take(normals, pairs[:, 1])
    return ad.mean(ad.sum_(diff * diff, axis=1))


def edge_lengths(mesh, adjacency=None):
    """Length of every undirected edge, in ``adjacency.edges`` order."""
    adjacency = adjacency or build_adjacency(mesh)
    e = adjacency.edges
    return ad.norm(ad.take(mesh.vertices, e[:, 0]) - ad.take(mesh.vertices, e[:, 1]))


def reg_edge_length(mesh, adjacency=None):
    """Mean over edges of smooth |len - mean len|."""
    lengths = edge_lengths(mesh, adjacency)
    if ad.value_of(lengths).size == 0:
        raise ValueError("mesh has no edges")
    return ad.mean(ad.smooth_abs(lengths - ad.mean(lengths)))


def laplacian_vectors(mesh, adjacency=None):
    """v - mean(neighbors of v) for every vertex (N x 3)."""
    adjacency = adjacency or build_adjacency(mesh)
    isolated = np.flatnonzero(adjacency.degree == 0)
    if len(isolated):
        raise IsolatedVertexError(int(isolated[0]))
    v = mesh.vertices
    neighbor_sum = ad.segment_sum(ad.take(v, adjacency.neighbor_index), adjacency.neighbor_owner, mesh.n_vertices)
    return v - neighbor_sum / adjacency.degree[:, None].astype(np.float64)


def reg_laplacian(mesh, adjacency=None):
    """Mean over vertices of the smooth Euclidean norm of the uniform Laplacian."""
    return ad.mean(ad.norm(laplacian_vectors(mesh, adjacency)))


def dissociated_vertices(mesh, factor=10.0, adjacency=None):
    """Vertices whose Laplacian magnitude exceeds ``factor`` times the median.

    A cheap report-side detector for single vertices drifting away from the
    surface while the image loss cannot see them.
    """
    lap = np.linalg.norm(ad.value_of(laplacian_vectors(mesh.detached(), adjacency)), axis=1)
    median = np.median(lap)
    return np.flatnonzero(lap > factor * max(median, 1e-12))


def total_loss(rendered, targets, mesh, weights=None, adjacency=None):
    """Weighted sum of the mean per-view image L1 and the three regularizers."""
    weights = weights or LossWeights()
    if len(rendered) != len(targets):
        raise ValueError(f"{len(rendered)} rendered images but {len(targets)} targets")
    if len(rendered) == 0:
        raise ValueError("at least one view is required")
    adjacency = adjacency or build_adjacency(mesh)
    img = image_l1(rendered[0], targets[0])
    for r, t in zip(rendered[1:], targets[1:]):
        img = img + image_l1(r, t)
    img = img / len(rendered)
    normal = reg_normal_angle(mesh, adjacency)
    edge = reg_edge_length(mesh, adjacency)
    lap = reg_laplacian(mesh, adjacency)
    total = weights.image * img + weights.normal * normal + weights.edge * edge + weights.laplacian * lap
    return LossReport(img, normal, edge, lap, total)
