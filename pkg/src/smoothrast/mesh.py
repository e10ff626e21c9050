"""Triangle meshes, the icosphere base model, offset parameterization and OBJ I/O."""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad

MAX_ICOSPHERE_LEVEL = 6
PLANE_TOL = 1e-9


@dataclass(frozen=True)
class Mesh:
    """Vertex positions (N x 3, ndarray or Var) and triangle indices (F x 3)."""

    vertices: object
    faces: np.ndarray

    def __post_init__(self):
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "faces", faces)
        v = ad.value_of(self.vertices)
        if not ad.is_var(self.vertices):
            object.__setattr__(self, "vertices", v.reshape(-1, 3))
            v = self.vertices
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError(f"vertices must be N x 3, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("vertex coordinates must be finite")
        if len(faces):
            if faces.min() < 0 or faces.max() >= len(v):
                raise ValueError("face index out of range")
            a, b, c = faces.T
            if np.any((a == b) | (b == c) | (a == c)):
                raise ValueError("face references the same vertex twice")

    @property
    def n_vertices(self):
        return ad.value_of(self.vertices).shape[0]

    @property
    def n_faces(self):
        return len(self.faces)

    def values(self):
        """Vertex positions as a plain array."""
        return ad.value_of(self.vertices)

    def detached(self):
        return Mesh(self.values().copy(), self.faces)

    def flipped(self):
        """Same surface with every face's winding reversed."""
        return Mesh(self.vertices, self.faces[:, ::-1])


def icosphere(level=2):
    """Unit icosphere: level k has 10*4**k + 2 vertices and 20*4**k faces."""
    level = int(level)
    if level < 0:
        raise ValueError("subdivision level must be >= 0")
    if level > MAX_ICOSPHERE_LEVEL:
        raise ValueError(f"subdivision level {level} exceeds {MAX_ICOSPHERE_LEVEL}")
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    for _ in range(level):
        cache = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        refined = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            refined += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = refined
    return Mesh(np.array(verts), np.array(faces, dtype=np.int64))


@dataclass(frozen=True)
class Adjacency:
    """Edge and neighbor structure of a mesh.

    ``edges`` holds each undirected edge once (sorted vertex pair);
    ``edge_faces`` pairs the two faces sharing each interior edge;
    ``neighbor_owner[k]`` is the vertex whose k-th neighbor is ``neighbor_index[k]``.
    """

    edges: np.ndarray
    edge_faces: np.ndarray
    neighbor_owner: np.ndarray
    neighbor_index: np.ndarray
    degree: np.ndarray

    def neighbors(self, vertex):
        return self.neighbor_index[self.neighbor_owner == vertex]


def build_adjacency(mesh):
    faces = mesh.faces
    incident = {}
    for f, (a, b, c) in enumerate(faces):
        for i, j in ((a, b), (b, c), (c, a)):
            incident.setdefault((min(i, j), max(i, j)), []).append(f)
    keys = sorted(incident)
    edges = np.array(keys, dtype=np.int64).reshape(-1, 2)
    edge_faces = np.array(
        [incident[k][:2] for k in keys if len(incident[k]) >= 2], dtype=np.int64
    ).reshape(-1, 2)
    both = np.concatenate([edges, edges[:, ::-1]]) if len(edges) else edges
    order = np.lexsort((both[:, 1], both[:, 0])) if len(both) else np.array([], dtype=np.int64)
    both = both[order]
    degree = np.bincount(both[:, 0], minlength=mesh.n_vertices) if len(both) else np.zeros(mesh.n_vertices, dtype=np.int64)
    return Adjacency(edges, edge_faces, both[:, 0], both[:, 1], degree)


def face_geometry(mesh):
    """Per-face unit normals, centroids and edge lengths (differentiable).

    Normals use the smoothed norm, so zero-area faces give a finite vector.
    Edge k runs from corner k to corner k+1.
    """
    v = mesh.vertices
    f = mesh.faces
    p0, p1, p2 = ad.take(v, f[:, 0]), ad.take(v, f[:, 1]), ad.take(v, f[:, 2])
    normals = ad.normalize(ad.cross(p1 - p0, p2 - p0))
    centroids = (p0 + p1 + p2) / 3.0
    lengths = ad.stack([ad.norm(p1 - p0), ad.norm(p2 - p1), ad.norm(p0 - p2)], axis=1)
    return normals, centroids, lengths


# ---------------------------------------------------------------------------
# symmetry and shape parameters


@dataclass(frozen=True)
class SymmetrySpec:
    """Mirror planes and the map from every vertex to its free-region source.

    Vertex i takes the offset of free vertex ``source[i]`` multiplied
    componentwise by ``signs[i]`` (-1 across a plane, 0 for the normal
    component of a vertex lying on a plane).
    """

    planes: tuple
    free: np.ndarray
    source: np.ndarray
    signs: np.ndarray

    @property
    def n_free(self):
        return len(self.free)

    @classmethod
    def build(cls, base, planes=("x", "z"), tol=1e-6):
        axes = {"x": 0, "z": 2}
        planes = tuple(planes)
        for p in planes:
            if p not in axes:
                raise ValueError(f"unsupported mirror plane {p!r}")
        v = base.values()
        in_free = np.ones(len(v), dtype=bool)
        for p in planes:
            in_free &= v[:, axes[p]] >= -PLANE_TOL
        free = np.flatnonzero(in_free)
        tree = cKDTree(v[free])
        folded = v.copy()
        signs = np.ones_like(v)
        for p in planes:
            k = axes[p]
            neg = v[:, k] < -PLANE_TOL
            folded[neg, k] = -folded[neg, k]
            signs[neg, k] = -1.0
            signs[np.abs(v[:, k]) < PLANE_TOL, k] = 0.0
        dist, idx = tree.query(folded)
        if np.any(dist > tol):
            bad = int(np.argmax(dist))
            raise ValueError(
                f"base mesh is not symmetric under {planes}: vertex {bad} has no mirror partner"
            )
        # a free vertex on a plane keeps zero motion along that plane's normal
        on_plane = np.zeros_like(v)
        for p in planes:
            on_plane[:, axes[p]] = np.abs(v[:, axes[p]]) < PLANE_TOL
        signs = np.where(on_plane > 0, 0.0, signs)
        return cls(planes, free, idx, signs)


@dataclass
class ShapeParams:
    """Raw optimization variables that deform a base mesh.

    Fields may be arrays or Vars; decoded per-coordinate offsets are
    ``max_offset * (2 * sigmoid(raw) - 1)``.
    """

    raw_offsets: object
    translation: object = field(default_factory=lambda: np.zeros(3))
    log_scale: object = 0.0
    symmetry: SymmetrySpec = None
    max_offset: float = 1.0

    def __post_init__(self):
        if self.max_offset <= 0:
            raise ValueError("max_offset must be positive")

    @classmethod
    def zeros(cls, base, symmetry=None, max_offset=1.0):
        n = symmetry.n_free if symmetry is not None else base.n_vertices
        return cls(np.zeros(3 * n), np.zeros(3), 0.0, symmetry, max_offset)

    @property
    def n_raw(self):
        return ad.value_of(self.raw_offsets).size

    def to_vector(self):
        return np.concatenate(
            [
                ad.value_of(self.raw_offsets).ravel(),
                ad.value_of(self.translation).ravel(),
                np.atleast_1d(ad.value_of(self.log_scale)),
            ]
        )

    def with_vector(self, vec):
        """Copy with fields sliced out of a flat vector (array or Var) laid out as to_vector."""
        n = self.n_raw
        return ShapeParams(vec[:n], vec[n : n + 3], vec[n + 3], self.symmetry, self.max_offset)

    def scale(self):
        return float(np.exp(ad.value_of(self.log_scale)))


def decode_offsets(params):
    """Bounded per-coordinate offsets of the free vertices, shape (n, 3)."""
    raw = ad.reshape(params.raw_offsets, (-1, 3))
    return params.max_offset * (2.0 * ad.sigmoid(raw) - 1.0)


def mirror_quarters(params, base):
    """Full N x 3 offset field, reflecting free offsets across the mirror planes."""
    offsets = decode_offsets(params)
    sym = params.symmetry
    if sym is None:
        if ad.value_of(offsets).shape[0] != base.n_vertices:
            raise ValueError("raw_offsets length does not match 3 x vertex count")
        return offsets
    if ad.value_of(offsets).shape[0] != sym.n_free:
        raise ValueError("raw_offsets length does not match 3 x free vertex count")
    return ad.take(offsets, sym.source) * sym.signs


def apply_params(base, params):
    """Deformed mesh ``exp(log_scale) * (base + offsets) + translation``."""
    if params.n_raw % 3:
        raise ValueError("raw_offsets length must be a multiple of 3")
    offsets = mirror_quarters(params, base)
    scale = ad.exp(params.log_scale)
    translation = ad.reshape(params.translation, (1, 3))
    verts = scale * (base.values() + offsets) + translation
    return Mesh(verts, base.faces)


# ---------------------------------------------------------------------------
# Wavefront OBJ (v / f records only)


class ObjFormatError(ValueError):
    pass


_IGNORED_RECORDS = {"vt", "vn", "vp", "o", "g", "s", "usemtl", "mtllib", "l"}


def load_obj(path):
    """Read vertices and faces; polygons are fan-triangulated."""
    verts, faces = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split("#", 1)[0].split()
            if not tokens:
                continue
            kind, rest = tokens[0], tokens[1:]
            if kind == "v":
                if len(rest) < 3:
                    raise ObjFormatError(f"line {lineno}: vertex needs 3 coordinates")
                try:
                    verts.append([float(x) for x in rest[:3]])
                except ValueError:
                    raise ObjFormatError(f"line {lineno}: bad vertex coordinate") from None
            elif kind == "f":
                if len(rest) < 3:
                    raise ObjFormatError(f"line {lineno}: face needs at least 3 indices")
                idx = []
                for tok in rest:
                    try:
                        i = int(tok.split("/")[0])
                    except ValueError:
                        raise ObjFormatError(f"line {lineno}: bad face index {tok!r}") from None
                    if i <= 0:
                        raise ObjFormatError(f"line {lineno}: non-positive face index {i}")
                    if i > len(verts):
                        raise ObjFormatError(f"line {lineno}: face index {i} out of range")
                    idx.append(i - 1)
                faces += [(idx[0], idx[k], idx[k + 1]) for k in range(1, len(idx) - 1)]
            elif kind not in _IGNORED_RECORDS:
                raise ObjFormatError(f"line {lineno}: unsupported record {kind!r}")
    return Mesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def save_obj(mesh, path):
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.values()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
