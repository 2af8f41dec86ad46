"""Isosurface extraction from the fused occupancy field.

Occupancy is sampled on a regular grid over the union of submap bounds
(each point valued by the lowest-uncertainty covering submap), marched
at the 0.5 level set, and written as ASCII PLY with per-vertex colors
from the color decoders.
"""

from __future__ import annotations

import numpy as np
from skimage.measure import marching_cubes

from .submaps import SubmapAtlas


def atlas_world_bounds(atlas: SubmapAtlas):
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    for sm in atlas.submaps:
        b = sm.world_bounds()
        if b is None:
            continue
        lo = np.minimum(lo, b[0])
        hi = np.maximum(hi, b[1])
    if not np.isfinite(lo).all():
        return None
    return lo, hi


def extract_mesh(atlas: SubmapAtlas, resolution: int = 128,
                 iso: float = 0.5, chunk: int = 65536):
    """(vertices, faces, colors) of the occupancy-0.5 surface.

    ``resolution`` is the sample count along the longest AABB axis.
    Raises ``ValueError`` on an empty map or when no surface crosses
    the iso level.
    """
    bounds = atlas_world_bounds(atlas)
    if bounds is None:
        raise ValueError("empty map: no allocated voxels to mesh")
    lo, hi = bounds
    span = hi - lo
    pad = 0.02 * span.max()
    lo, hi = lo - pad, hi + pad
    span = hi - lo
    h = span.max() / (resolution - 1)
    dims = np.maximum(np.ceil(span / h).astype(int) + 1, 2)
    xs = lo[0] + np.arange(dims[0]) * h
    ys = lo[1] + np.arange(dims[1]) * h
    zs = lo[2] + np.arange(dims[2]) * h
    volume = np.zeros(tuple(dims))
    grid_pts = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1).reshape(-1, 3)
    for start in range(0, grid_pts.shape[0], chunk):
        pts = grid_pts[start : start + chunk]
        volume.reshape(-1)[start : start + chunk] = atlas.query_fused_occupancy(pts)
    if volume.max() < iso or volume.min() > iso:
        raise ValueError("occupancy never crosses the iso level; nothing to mesh")
    verts, faces, _, _ = marching_cubes(volume, level=iso, spacing=(h, h, h))
    verts = verts + lo
    colors = atlas.query_fused_color(verts)
    return verts, faces, colors


def write_ply(path, vertices: np.ndarray, faces: np.ndarray,
              colors: np.ndarray | None = None):
    """ASCII PLY with optional per-vertex uint8 colors."""
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    has_color = colors is not None
    if has_color:
        c = np.clip(np.asarray(colors), 0.0, 1.0)
        c = np.round(c * 255.0).astype(np.uint8)
    with open(path, "w") as out:
        out.write("ply\nformat ascii 1.0\n")
        out.write(f"element vertex {len(v)}\n")
        out.write("property float x\nproperty float y\nproperty float z\n")
        if has_color:
            out.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        out.write(f"element face {len(f)}\n")
        out.write("property list uchar int vertex_indices\nend_header\n")
        for i in range(len(v)):
            line = f"{v[i, 0]:.6f} {v[i, 1]:.6f} {v[i, 2]:.6f}"
            if has_color:
                line += f" {c[i, 0]} {c[i, 1]} {c[i, 2]}"
            out.write(line + "\n")
        for tri in f:
            out.write(f"3 {tri[0]} {tri[1]} {tri[2]}\n")


def read_ply_vertices(path) -> np.ndarray:
    """Vertex positions of an ASCII PLY (for tests and tooling)."""
    verts = []
    with open(path) as f:
        n_vertex = 0
        for line in f:
            line = line.strip()
            if line.startswith("element vertex"):
                n_vertex = int(line.split()[-1])
            if line == "end_header":
                break
        for _ in range(n_vertex):
            parts = next(f).split()
            verts.append([float(parts[0]), float(parts[1]), float(parts[2])])
    return np.asarray(verts)
