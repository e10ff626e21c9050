"""Discrete reference renderer: homogeneous-matrix projection, hard z-buffer, flat shading.

Written independently of the smooth pipeline (no shared projection or
coverage code) so it can serve as an oracle in tests. Coverage uses edge
functions at pixel centers with a top-left-agnostic ``>= 0`` rule; depth is
interpolated perspective-correctly through 1/z.
"""

import numpy as np


def look_at_matrix(eye, target, up):
    """4x4 world-to-view matrix; view +z points from the eye toward the target."""
    eye = np.asarray(eye, dtype=float)
    zaxis = np.asarray(target, dtype=float) - eye
    zaxis /= np.linalg.norm(zaxis)
    xaxis = np.cross(up, zaxis)
    xaxis /= np.linalg.norm(xaxis)
    yaxis = np.cross(zaxis, xaxis)
    M = np.eye(4)
    M[0, :3], M[1, :3], M[2, :3] = xaxis, yaxis, zaxis
    M[:3, 3] = -M[:3, :3] @ eye
    return M


def perspective_matrix(fov_y, aspect, near, far):
    """Left-handed perspective: clip w = view z; NDC x, y in [-1, 1]."""
    f = 1.0 / np.tan(fov_y / 2.0)
    P = np.zeros((4, 4))
    P[0, 0] = f / aspect
    P[1, 1] = f
    P[2, 2] = far / (far - near)
    P[2, 3] = -near * far / (far - near)
    P[3, 2] = 1.0
    return P


def project(vertices, camera, far=1e4):
    """Pixel x, y and view depth of each vertex via the matrix pipeline."""
    V = look_at_matrix(camera.eye, camera.look_at, camera.up)
    P = perspective_matrix(camera.fov_y, camera.width / camera.height, camera.near, far)
    homo = np.c_[np.asarray(vertices, dtype=float), np.ones(len(vertices))]
    clip = homo @ (P @ V).T
    w = clip[:, 3]
    ndc = clip[:, :2] / w[:, None]
    px = (ndc[:, 0] + 1.0) * 0.5 * camera.width
    py = (1.0 - ndc[:, 1]) * 0.5 * camera.height
    return px, py, w


def flat_shade(vertices, faces, camera, lighting, beta=32.0):
    """Per-face intensity with the same lighting model as the smooth renderer."""
    v = np.asarray(vertices, dtype=float)
    a, b, c = v[faces[:, 0]], v[faces[:, 1]], v[faces[:, 2]]
    n = np.cross(b - a, c - a)
    n /= np.sqrt((n**2).sum(1, keepdims=True) + 1e-24)
    centroid = (a + b + c) / 3.0
    view = np.asarray(camera.eye) - centroid
    view /= np.sqrt((view**2).sum(1, keepdims=True) + 1e-24)
    light = np.asarray(lighting.light_dir, dtype=float)
    h = view + light
    h /= np.sqrt((h**2).sum(1, keepdims=True) + 1e-24)
    diff = np.sqrt((n @ light) ** 2 + 1e-24)
    spec = np.sqrt(np.einsum("ij,ij->i", n, h) ** 2 + 1e-24) ** lighting.shininess
    raw = lighting.k_ambient + lighting.k_diffuse * diff + lighting.k_specular * spec
    g = lambda x: 1.0 - np.logaddexp(0.0, beta * (1.0 - x)) / beta  # noqa: E731
    return (g(raw) - g(0.0)) / (1.0 - g(0.0))


def hard_render(mesh, camera, lighting, background_intensity=1.0, return_ids=False):
    """Point-sampled z-buffer render; returns an H x W array (and face ids, -1 for background)."""
    W, H = camera.width, camera.height
    verts = np.asarray(mesh.values() if hasattr(mesh, "values") else mesh.vertices, dtype=float)
    faces = np.asarray(mesh.faces)
    px, py, pz = project(verts, camera)
    shades = flat_shade(verts, faces, camera, lighting) if len(faces) else np.zeros(0)
    zbuf = np.full((H, W), np.inf)
    ids = np.full((H, W), -1)
    for f, (i, j, k) in enumerate(faces):
        xs, ys, zs = px[[i, j, k]], py[[i, j, k]], pz[[i, j, k]]
        x0, x1 = int(np.floor(xs.min() - 0.5)), int(np.ceil(xs.max() - 0.5))
        y0, y1 = int(np.floor(ys.min() - 0.5)), int(np.ceil(ys.max() - 0.5))
        x0, y0 = max(x0, 0), max(y0, 0)
        x1, y1 = min(x1, W - 1), min(y1, H - 1)
        if x0 > x1 or y0 > y1:
            continue
        gy, gx = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
        cx, cy = gx + 0.5, gy + 0.5
        area = (xs[1] - xs[0]) * (ys[2] - ys[0]) - (xs[2] - xs[0]) * (ys[1] - ys[0])
        if abs(area) < 1e-12:
            continue
        w0 = ((xs[1] - cx) * (ys[2] - cy) - (xs[2] - cx) * (ys[1] - cy)) / area
        w1 = ((xs[2] - cx) * (ys[0] - cy) - (xs[0] - cx) * (ys[2] - cy)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        inv_z = w0 / zs[0] + w1 / zs[1] + w2 / zs[2]
        depth = 1.0 / inv_z
        sub = zbuf[y0 : y1 + 1, x0 : x1 + 1]
        closer = inside & (depth < sub)
        sub[closer] = depth[closer]
        ids[y0 : y1 + 1, x0 : x1 + 1][closer] = f
    image = np.where(ids >= 0, shades[np.maximum(ids, 0)] if len(faces) else 0.0, background_intensity)
    if return_ids:
        return image, ids
    return image
