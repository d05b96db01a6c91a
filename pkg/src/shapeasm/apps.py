"""Uses of a fitted assembly: pruning, parsing, descriptors, deformation, export."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geom import Assembly, cuboid_df_sq, df_sq_matrix, local_points, normalize_quat
from .volume import OccupancyGrid, TriangleMesh, write_obj

PARSE_TIE_TOL = 1e-9
GROUPS = ("dims", "rot", "trans")


# -- occupancy and IoU --------------------------------------------------------

def assembly_occupancy(asm: Assembly, mask, res: int = 64, chunk: int = 65536) -> np.ndarray:
    """Voxel-centre occupancy of the union of existing primitives."""
    mask = np.asarray(mask, dtype=bool)
    pts = OccupancyGrid.centers(res).reshape(-1, 3)
    occ = np.zeros(len(pts), dtype=bool)
    if mask.any():
        sub = Assembly(asm.dims[mask], asm.quat[mask], asm.trans[mask], asm.prob[mask])
        for s in range(0, len(pts), chunk):
            d = cuboid_df_sq(local_points(pts[s:s + chunk], sub), sub.dims[:, None])
            occ[s:s + chunk] = np.any(d == 0.0, axis=0)
    return occ.reshape(res, res, res)


def iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.count_nonzero(a | b)
    return 1.0 if union == 0 else np.count_nonzero(a & b) / union


def _inside(points, asm: Assembly, mask) -> np.ndarray:
    if not np.any(mask):
        return np.zeros(len(points), dtype=bool)
    return np.any(df_sq_matrix(points, asm, mask) == 0.0, axis=1)


def sampled_iou(a: Assembly, mask_a, b: Assembly, mask_b, n: int = 1_000_000, seed=0,
                chunk: int = 100_000) -> float:
    """Volume IoU of two assemblies from uniform samples over their joint bounding box.

    Free of the voxel quantization of :func:`iou` on occupancy grids, which
    can flip a whole layer of a thin part for a sub-voxel shift.
    """
    mask_a = np.asarray(mask_a, dtype=bool)
    mask_b = np.asarray(mask_b, dtype=bool)
    corners = []
    for asm, mask in ((a, mask_a), (b, mask_b)):
        rot = asm.rotations()
        for m in np.nonzero(mask)[0]:
            corners.append((_BOX_CORNERS * asm.dims[m]) @ rot[m].T + asm.trans[m])
    if not corners:
        return 1.0
    corners = np.concatenate(corners)
    lo, hi = corners.min(0), corners.max(0)
    rng = np.random.default_rng(seed)
    both = either = 0
    for s in range(0, n, chunk):
        pts = lo + (hi - lo) * rng.random((min(chunk, n - s), 3))
        ia, ib = _inside(pts, a, mask_a), _inside(pts, b, mask_b)
        both += np.count_nonzero(ia & ib)
        either += np.count_nonzero(ia | ib)
    return 1.0 if either == 0 else both / either


# -- redundant primitive removal ---------------------------------------------

def remove_redundant(asm: Assembly, mask, overlap_threshold: float = 0.75, n_samples: int = 1000,
                     seed=0) -> np.ndarray:
    """Drop primitives mostly covered by the others, smallest volume first.

    For each candidate, ``n_samples`` points drawn uniformly inside it are
    tested against the union of the other primitives still kept.
    """
    keep = np.asarray(mask, dtype=bool).copy()
    rng = np.random.default_rng(seed)
    rot = asm.rotations()
    order = np.argsort(asm.volumes(), kind="stable")
    for m in order:
        if not keep[m]:
            continue
        local = rng.uniform(-1.0, 1.0, size=(n_samples, 3)) * asm.dims[m]
        world = local @ rot[m].T + asm.trans[m]
        others = keep.copy()
        others[m] = False
        if not others.any():
            continue
        inside = np.any(df_sq_matrix(world, asm, others) == 0.0, axis=1)
        if inside.mean() >= overlap_threshold:
            keep[m] = False
    return keep


# -- parsing -----------------------------------------------------------------

@dataclass
class PartLabeling:
    points: np.ndarray
    index: np.ndarray
    gt: list | None = None


def parse_points(points, asm: Assembly, mask) -> np.ndarray:
    """Primitive index with the lowest squared DF per point.

    Values within ``PARSE_TIE_TOL`` of the minimum tie; ties go to the larger
    volume, then to the lower index.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("no existing primitive to parse against")
    d = df_sq_matrix(np.atleast_2d(points), asm, mask)
    cand = d <= d.min(axis=1, keepdims=True) + PARSE_TIE_TOL
    vol = np.where(cand, asm.volumes()[None], -np.inf)
    best = cand & (vol == vol.max(axis=1, keepdims=True))
    return np.argmax(best, axis=1)


def label_mapping(labelings) -> dict:
    """Majority ground-truth label of each primitive index over all labelings."""
    votes: dict = {}
    for lab in labelings:
        if lab.gt is None:
            raise ValueError("labeling has no ground truth")
        for i, g in zip(lab.index.tolist(), lab.gt):
            votes.setdefault(i, Counter())[g] += 1
    # most votes, then the smallest label, so the mapping is deterministic
    return {i: min(c.items(), key=lambda kv: (-kv[1], kv[0]))[0] for i, c in votes.items()}


def parsing_accuracy(labelings) -> float:
    if isinstance(labelings, PartLabeling):
        labelings = [labelings]
    mapping = label_mapping(labelings)
    hits = total = 0
    for lab in labelings:
        hits += sum(mapping[i] == g for i, g in zip(lab.index.tolist(), lab.gt))
        total += len(lab.gt)
    if total == 0:
        raise ValueError("no labeled points")
    return hits / total


def write_labeling_csv(path, lab: PartLabeling) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        header = ["x", "y", "z", "prim_index"] + (["gt_label"] if lab.gt is not None else [])
        w.writerow(header)
        for n, (p, i) in enumerate(zip(lab.points.tolist(), lab.index.tolist())):
            row = [repr(p[0]), repr(p[1]), repr(p[2]), i]
            if lab.gt is not None:
                row.append(lab.gt[n])
            w.writerow(row)


# -- descriptors -------------------------------------------------------------

@dataclass
class Selection:
    prims: tuple | None = None
    groups: tuple = GROUPS

    def __post_init__(self):
        bad = set(self.groups) - set(GROUPS)
        if bad or not self.groups:
            raise ValueError(f"invalid parameter groups {sorted(bad) or self.groups}")


def canonical_quat(q) -> np.ndarray:
    """Unit quaternion with its first non-zero component positive."""
    q = normalize_quat(q)
    lead = np.take_along_axis(q, np.argmax(np.abs(q) > 1e-12, axis=-1)[..., None], axis=-1)
    return np.where(lead < 0, -q, q)


def descriptor(asm: Assembly, mask, selection: Selection | None = None) -> np.ndarray:
    selection = selection or Selection()
    mask = np.asarray(mask, dtype=bool)
    prims = range(asm.M) if selection.prims is None else selection.prims
    blocks = {"dims": asm.dims, "rot": canonical_quat(asm.quat), "trans": asm.trans}
    out = []
    for m in prims:
        if not 0 <= m < asm.M:
            raise ValueError(f"primitive index {m} out of range")
        for g in selection.groups:
            out.append(blocks[g][m] if mask[m] else np.zeros_like(blocks[g][m]))
    return np.concatenate(out)


def descriptor_distance(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)))


def distance_matrix(descs) -> np.ndarray:
    x = np.asarray(descs, dtype=float)
    return np.sqrt(np.sum((x[:, None] - x[None]) ** 2, axis=-1))


def nearest_neighbors(dist, k: int) -> np.ndarray:
    """k nearest other items per row; ties resolved by index."""
    dist = np.array(dist, dtype=float)
    np.fill_diagonal(dist, np.inf)
    return np.argsort(dist, axis=1, kind="stable")[:, :k]


def write_matrix_csv(path, names, matrix) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow([""] + list(names))
        for name, row in zip(names, np.asarray(matrix).tolist()):
            w.writerow([name] + [repr(v) for v in row])


# -- deformation -------------------------------------------------------------

@dataclass
class DeformationSpec:
    source: Assembly
    target: Assembly
    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.source.M != self.target.M or len(self.mask) != self.source.M:
            raise ValueError("source and target assemblies must have the same primitive count")


def deform_points(points, spec: DeformationSpec, index=None) -> np.ndarray:
    """Carry each point with its primitive from the source to the target frame."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if index is None:
        index = parse_points(pts, spec.source, spec.mask)
    rs, rt = spec.source.rotations(), spec.target.rotations()
    local = np.einsum("nj,nji->ni", pts - spec.source.trans[index], rs[index]) / spec.source.dims[index]
    out = np.einsum("nij,nj->ni", rt[index], local * spec.target.dims[index]) + spec.target.trans[index]
    # unchanged primitives carry their points exactly, not up to rounding
    same = np.all(spec.source.dims == spec.target.dims, axis=1) \
        & np.all(spec.source.quat == spec.target.quat, axis=1) \
        & np.all(spec.source.trans == spec.target.trans, axis=1)
    keep = same[index]
    out[keep] = pts[keep]
    return out


def deform_mesh(mesh: TriangleMesh, spec: DeformationSpec) -> TriangleMesh:
    return TriangleMesh(deform_points(mesh.vertices, spec), mesh.triangles.copy())


# -- assembly export ---------------------------------------------------------

_BOX_CORNERS = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=float)
# outward-facing, two triangles per face
_BOX_TRIS = np.array([
    [0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5],
    [0, 4, 5], [0, 5, 1], [2, 3, 7], [2, 7, 6],
    [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3],
])


def assembly_mesh(asm: Assembly, mask):
    """Triangle mesh of the existing cuboids and a group per cuboid."""
    mask = np.asarray(mask, dtype=bool)
    rot = asm.rotations()
    verts, tris, groups = [], [], {}
    for m in np.nonzero(mask)[0]:
        verts.append((_BOX_CORNERS * asm.dims[m]) @ rot[m].T + asm.trans[m])
        start = 12 * len(groups)
        tris.append(_BOX_TRIS + 8 * len(groups))
        groups[f"cuboid_{m}"] = range(start, start + 12)
    if not groups:
        return None, {}
    return TriangleMesh(np.concatenate(verts), np.concatenate(tris)), groups


def write_assembly_obj(path, asm: Assembly, mask) -> int:
    """Write existing cuboids as one OBJ group each; returns the cuboid count."""
    mesh, groups = assembly_mesh(asm, mask)
    if mesh is None:
        Path(path).write_text("")
        return 0
    write_obj(path, mesh, groups)
    return len(groups)
