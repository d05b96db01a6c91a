"""Synthetic cuboid-assembly shapes with exact ground truth.

Shapes are unions of axis-aligned boxes. The union boundary is meshed
exactly by splitting space along every box face plane and emitting the
faces between occupied and empty cells, which keeps the mesh watertight
even where boxes overlap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import Assembly
from .volume import TriangleMesh

CLASSES = ("table", "chair", "cross")


@dataclass
class SyntheticShape:
    mesh: TriangleMesh
    parts: Assembly
    part_labels: list
    vertex_labels: list


def box_mesh(center, half) -> TriangleMesh:
    center = np.asarray(center, dtype=float)
    half = np.asarray(half, dtype=float)
    return union_mesh([(center - half, center + half)])


def _quad(v00, v10, v11, v01):
    return [(v00, v10, v11), (v00, v11, v01)]


def union_mesh(boxes) -> TriangleMesh:
    """Watertight outward-oriented boundary mesh of a union of ``(lo, hi)`` boxes."""
    boxes = [(np.asarray(lo, float), np.asarray(hi, float)) for lo, hi in boxes]
    axes = [np.unique(np.concatenate([[lo[a], hi[a]] for lo, hi in boxes])) for a in range(3)]
    centers = [0.5 * (ax[1:] + ax[:-1]) for ax in axes]
    cx, cy, cz = np.meshgrid(*centers, indexing="ij")
    occ = np.zeros(cx.shape, dtype=bool)
    for lo, hi in boxes:
        occ |= ((cx > lo[0]) & (cx < hi[0]) & (cy > lo[1]) & (cy < hi[1])
                & (cz > lo[2]) & (cz < hi[2]))
    padded = np.pad(occ, 1)
    shape = tuple(len(ax) for ax in axes)

    def vid(i, j, k):
        return (i * shape[1] + j) * shape[2] + k

    tris = []
    for axis in range(3):
        u, v = (axis + 1) % 3, (axis + 2) % 3
        lo_cell = np.moveaxis(padded, axis, 0)[:-1]
        hi_cell = np.moveaxis(padded, axis, 0)[1:]
        diff = lo_cell.astype(int) - hi_cell.astype(int)
        # diff is laid out as [plane, *remaining axes in order]
        rest = [a for a in range(3) if a != axis]
        for plane, r0, r1 in zip(*np.nonzero(diff)):
            idx = {axis: plane, rest[0]: r0 - 1, rest[1]: r1 - 1}
            outward = diff[plane, r0, r1] > 0

            def corner(du, dv):
                c = dict(idx)
                c[u] += du
                c[v] += dv
                return vid(c[0], c[1], c[2])

            quad = _quad(corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1))
            if not outward:
                quad = [(a, c, b) for a, b, c in quad]
            tris.extend(quad)
    used = np.unique(np.array(tris).ravel())
    remap = np.full(shape[0] * shape[1] * shape[2], -1)
    remap[used] = np.arange(len(used))
    gi, gj, gk = np.unravel_index(used, shape)
    verts = np.stack([axes[0][gi], axes[1][gj], axes[2][gk]], axis=1)
    return TriangleMesh(verts, remap[np.array(tris)])


def _normalize_boxes(centers, halves):
    lo = (centers - halves).min(0)
    hi = (centers + halves).max(0)
    span = (hi - lo).max()
    return (centers - 0.5 * (lo + hi)) / span, halves / span


def _table_boxes(rng, with_back=False):
    # y is up
    tw, tt, td = rng.uniform(0.30, 0.45), rng.uniform(0.02, 0.045), rng.uniform(0.22, 0.40)
    leg = rng.uniform(0.025, 0.05)
    leg_h = rng.uniform(0.15, 0.30)
    inset = rng.uniform(0.0, 0.06)
    centers = [[0.0, 2 * leg_h + tt, 0.0]]
    halves = [[tw, tt, td]]
    for sx in (-1, 1):
        for sz in (-1, 1):
            centers.append([sx * (tw - leg - inset), leg_h, sz * (td - leg - inset)])
            halves.append([leg, leg_h, leg])
    labels = ["top"] + ["leg"] * 4
    if with_back:
        bh, bt = rng.uniform(0.15, 0.28), rng.uniform(0.02, 0.04)
        centers.append([0.0, 2 * leg_h + 2 * tt + bh, -td + bt])
        halves.append([tw, bh, bt])
        labels = ["seat"] + ["leg"] * 4 + ["back"]
    return np.array(centers), np.array(halves), labels


def _cross_boxes(rng):
    long_a, long_b = rng.uniform(0.3, 0.5), rng.uniform(0.3, 0.5)
    t1, t2 = rng.uniform(0.04, 0.1, size=2)
    h = rng.uniform(0.04, 0.1)
    off = rng.uniform(-0.1, 0.1, size=2)
    centers = np.array([[0.0, 0.0, off[0]], [off[1], 0.0, 0.0]])
    halves = np.array([[long_a, h, t1], [t2, h, long_b]])
    return centers, halves, ["bar_x", "bar_z"]


def generate_shape(kind: str, rng) -> SyntheticShape:
    if kind == "table":
        centers, halves, labels = _table_boxes(rng)
    elif kind == "chair":
        centers, halves, labels = _table_boxes(rng, with_back=True)
    elif kind == "cross":
        centers, halves, labels = _cross_boxes(rng)
    else:
        raise ValueError(f"unknown shape class {kind!r}")
    centers, halves = _normalize_boxes(centers, halves)
    m = len(centers)
    parts = Assembly(halves, np.tile([1.0, 0, 0, 0], (m, 1)), centers, np.ones(m))
    mesh = union_mesh([(c - h, c + h) for c, h in zip(centers, halves)])
    return SyntheticShape(mesh, parts, labels, label_points(mesh.vertices, parts, labels))


def random_cuboid(rng, lo: float = 0.08, hi: float = 0.4, max_offset: float = 0.08) -> SyntheticShape:
    """A single axis-aligned box, not renormalized, for recovery experiments."""
    halves = rng.uniform(lo, hi, size=3)
    center = rng.uniform(-1, 1, size=3) * np.minimum(max_offset, 0.5 - halves)
    parts = Assembly(halves[None], [[1.0, 0, 0, 0]], center[None], [1.0])
    mesh = box_mesh(center, halves)
    return SyntheticShape(mesh, parts, ["box"], ["box"] * len(mesh.vertices))


def label_points(points, parts: Assembly, labels) -> list:
    """Ground-truth label of the part nearest each point (first part on ties)."""
    from .geom import df_sq_matrix

    d = df_sq_matrix(points, parts, np.ones(parts.M, dtype=bool))
    return [labels[i] for i in np.argmin(d, axis=1)]


def analytic_occupancy(parts: Assembly, res: int) -> np.ndarray:
    from .volume import OccupancyGrid

    c = OccupancyGrid.centers(res)
    occ = np.zeros(c.shape[:3], dtype=bool)
    for center, half in zip(parts.trans, parts.dims):
        occ |= np.all(np.abs(c - center) <= half, axis=-1)
    return occ
