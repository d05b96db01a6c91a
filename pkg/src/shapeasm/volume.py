"""Target-shape ingestion: OBJ meshes, occupancy grids, surface samples and
an interpolable unsigned distance-field grid."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DFG_MAGIC = b"DFG1"
# irrational-ish offsets keep parity rays off shared triangle edges
_RAY_NUDGE = np.array([1.1102230246251565e-7 * np.sqrt(2), 1.1102230246251565e-7 * np.sqrt(3)])


class MeshError(ValueError):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) == 0:
            raise MeshError("empty mesh")
        if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
            raise MeshError("triangle index out of range")

    @property
    def corners(self) -> np.ndarray:
        return self.vertices[self.triangles]

    def areas(self) -> np.ndarray:
        c = self.corners
        return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)

    def normalized(self) -> TriangleMesh:
        """Centre the bounding box at the origin and scale the longest side to 1."""
        lo, hi = self.vertices.min(0), self.vertices.max(0)
        span = float((hi - lo).max())
        if span <= 0:
            raise MeshError("degenerate mesh extent")
        return TriangleMesh((self.vertices - 0.5 * (lo + hi)) / span, self.triangles.copy())


def parse_obj(text: str, source: str = "<string>") -> TriangleMesh:
    verts, tris = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
                if len(verts[-1]) != 3:
                    raise ValueError("vertex needs 3 coordinates")
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    i = int(tok.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                if len(idx) < 3:
                    raise ValueError("face needs at least 3 vertices")
                for k in range(1, len(idx) - 1):
                    tris.append([idx[0], idx[k], idx[k + 1]])
        except ValueError as exc:
            raise MeshError(f"{source}:{lineno}: {exc}") from None
    if not tris:
        raise MeshError("empty mesh")
    return TriangleMesh(np.array(verts), np.array(tris))


def load_mesh(path, normalize: bool = True) -> TriangleMesh:
    path = Path(path)
    mesh = parse_obj(path.read_text(), str(path))
    return mesh.normalized() if normalize else mesh


def write_obj(path, mesh: TriangleMesh, groups=None) -> None:
    """Write an OBJ; ``groups`` optionally maps names to triangle index lists."""
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    if groups is None:
        groups = {None: range(len(mesh.triangles))}
    for name, tri_ids in groups.items():
        if name is not None:
            lines.append(f"g {name}")
        for t in tri_ids:
            a, b, c = (mesh.triangles[t] + 1).tolist()
            lines.append(f"f {a} {b} {c}")
    Path(path).write_text("\n".join(lines) + "\n")


# -- inside test -------------------------------------------------------------

def _crossings(corners, origins, axis):
    """Ray-axis coordinates where rays parallel to ``axis`` pierce each triangle.

    ``origins`` are the two perpendicular coordinates of each ray. Returns an
    ``(R, T)`` array with +inf where a ray misses the triangle.
    """
    a, b = [i for i in range(3) if i != axis]
    p0, p1, p2 = corners[:, 0], corners[:, 1], corners[:, 2]
    oy = origins[:, 0:1]
    oz = origins[:, 1:2]
    e1y, e1z = p1[:, a] - p0[:, a], p1[:, b] - p0[:, b]
    e2y, e2z = p2[:, a] - p0[:, a], p2[:, b] - p0[:, b]
    det = e1y * e2z - e1z * e2y
    ok = np.abs(det) > 1e-300
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    dy = oy - p0[:, a]
    dz = oz - p0[:, b]
    s = (dy * e2z - dz * e2y) * inv
    t = (e1y * dz - e1z * dy) * inv
    hit = ok & (s >= 0) & (t >= 0) & (s + t <= 1)
    x = p0[:, axis] + s * (p1[:, axis] - p0[:, axis]) + t * (p2[:, axis] - p0[:, axis])
    return np.where(hit, x, np.inf)


def _parity_along(corners, points, axis, chunk=2048):
    others = [i for i in range(3) if i != axis]
    perp = points[:, others] + _RAY_NUDGE
    rays, inverse = np.unique(perp, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    coord = points[:, axis]
    counts = np.empty(len(points), dtype=np.int64)
    for r0 in range(0, len(rays), chunk):
        cross = np.sort(_crossings(corners, rays[r0:r0 + chunk], axis), axis=1)
        n_rows, n_tri = cross.shape
        finite = np.isfinite(cross)
        n_hit = finite.sum(axis=1)
        # lay rows end to end so one searchsorted serves every ray
        span = 2.0 * (np.abs(cross[finite]).max(initial=0.0) + np.abs(coord).max()) + 1.0
        offset = span * np.arange(n_rows)
        flat = np.where(finite, cross, 0.75 * span) + offset[:, None]
        sel = np.nonzero((inverse >= r0) & (inverse < r0 + n_rows))[0]
        row = inverse[sel] - r0
        le = np.searchsorted(flat.ravel(), coord[sel] + offset[row], side="right") - row * n_tri
        counts[sel] = n_hit[row] - le
    return counts % 2 == 1


def inside_mesh(mesh: TriangleMesh, points, majority: bool = True) -> np.ndarray:
    """Ray-parity inside test; majority vote over +x, +y and +z rays."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    corners = mesh.corners
    if not majority:
        return _parity_along(corners, points, 0)
    votes = sum(_parity_along(corners, points, ax).astype(int) for ax in range(3))
    return votes >= 2


# -- occupancy ---------------------------------------------------------------

@dataclass
class OccupancyGrid:
    bits: np.ndarray

    @property
    def resolution(self) -> int:
        return self.bits.shape[0]

    @staticmethod
    def centers(res: int) -> np.ndarray:
        """Voxel centres, indexed ``[i, j, k]`` with i along x."""
        c = -0.5 + (np.arange(res) + 0.5) / res
        return np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1)


def voxelize(mesh: TriangleMesh, res: int = 32) -> OccupancyGrid:
    pts = OccupancyGrid.centers(res).reshape(-1, 3)
    return OccupancyGrid(inside_mesh(mesh, pts).reshape(res, res, res))


def sample_surface(mesh: TriangleMesh, n: int, rng) -> np.ndarray:
    """Area-weighted uniform surface samples, shape ``(n, 3)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(rng)
    areas = mesh.areas()
    tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    c = mesh.corners[tri]
    return ((1 - r1)[:, None] * c[:, 0] + (r1 * (1 - r2))[:, None] * c[:, 1]
            + (r1 * r2)[:, None] * c[:, 2])


# -- point / triangle distance ----------------------------------------------

def _dot(u, v):
    return u[..., 0] * v[..., 0] + u[..., 1] * v[..., 1] + u[..., 2] * v[..., 2]


def _closest_dist_sq(p, a, b, c):
    """Squared point/triangle distance via Voronoi-region classification.

    All arguments broadcast against each other with a trailing axis of 3.
    """
    ab, ac, ap = b - a, c - a, p - a
    bp, cp = p - b, p - c
    d1, d2 = _dot(ab, ap), _dot(ac, ap)
    d3, d4 = _dot(ab, bp), _dot(ac, bp)
    d5, d6 = _dot(ab, cp), _dot(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = 1.0 / (va + vb + vc)
        v_in, w_in = vb * denom, vc * denom
    conds = [
        (d1 <= 0) & (d2 <= 0),
        (d3 >= 0) & (d4 <= d3),
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),
        (d6 >= 0) & (d5 <= d6),
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),
        (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0),
    ]
    shape = np.broadcast_shapes(d1.shape, a.shape[:-1])
    coef_b = np.select(conds, [0.0, 1.0, t_ab, 0.0, 0.0, 1.0 - t_bc], v_in)
    coef_c = np.select(conds, [0.0, 0.0, 0.0, 1.0, t_ac, t_bc], w_in)
    coef_b = np.broadcast_to(coef_b, shape)[..., None]
    coef_c = np.broadcast_to(coef_c, shape)[..., None]
    diff = ap - coef_b * ab - coef_c * ac
    out = _dot(diff, diff)
    bad = ~np.isfinite(out)
    if bad.any():
        # zero-area triangles: fall back to the edge segments
        pb = np.broadcast_to(p, diff.shape)[bad]
        ab_, bb, cb = (np.broadcast_to(x, diff.shape)[bad] for x in (a, b, c))
        out[bad] = np.minimum(np.minimum(_segment_dist_sq(pb, ab_, bb), _segment_dist_sq(pb, bb, cb)),
                              _segment_dist_sq(pb, cb, ab_))
    return out


def _segment_dist_sq(p, a, b):
    ab = b - a
    t = np.clip(_dot(p - a, ab) / np.maximum(_dot(ab, ab), 1e-300), 0.0, 1.0)
    d = p - (a + t[..., None] * ab)
    return _dot(d, d)


def point_triangle_dist_sq(points, corners):
    """Exact squared distances, shape ``(N, T)``, between points and triangles."""
    p = np.asarray(points, dtype=float)[:, None, :]
    return _closest_dist_sq(p, corners[None, :, 0], corners[None, :, 1], corners[None, :, 2])


def mesh_distance(mesh: TriangleMesh, points, block: int = 4, chunk: int = 1 << 20) -> np.ndarray:
    """Exact unsigned distance from points to the mesh surface.

    Points are bucketed into a uniform grid of blocks. Distances from each
    block centre give an upper bound on the block's nearest-surface distance
    and a lower bound per triangle, so each block only tests the triangles
    that can still hold its nearest point.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    corners = mesh.corners
    tlo, thi = corners.min(1), corners.max(1)
    lo, hi = points.min(0), points.max(0)
    nb = max(1, int(np.ceil(len(points) ** (1 / 3) / block)))
    size = np.maximum((hi - lo) / nb, 1e-12)
    key = np.minimum(((points - lo) / size).astype(np.int64), nb - 1)
    flat = (key[:, 0] * nb + key[:, 1]) * nb + key[:, 2]
    order = np.argsort(flat, kind="stable")
    block_id, n_pts = np.unique(flat, return_counts=True)
    pstart = np.concatenate([[0], np.cumsum(n_pts)[:-1]])
    sorted_pts = points[order]
    blo = np.minimum.reduceat(sorted_pts, pstart, axis=0)
    bhi = np.maximum.reduceat(sorted_pts, pstart, axis=0)
    centre = 0.5 * (blo + bhi)
    half_diag = 0.5 * np.linalg.norm(bhi - blo, axis=1)
    dc = np.sqrt(point_triangle_dist_sq(centre, corners))
    ub = dc.min(1) + half_diag
    gap = np.maximum(0.0, np.maximum(tlo[None] - bhi[:, None], blo[:, None] - thi[None]))
    lb = np.maximum(np.linalg.norm(gap, axis=2), dc - half_diag[:, None])
    cand = lb <= ub[:, None] * (1 + 1e-9) + 1e-12
    n_cand = cand.sum(1)
    cand_tri = np.nonzero(cand)[1]
    cstart = np.concatenate([[0], np.cumsum(n_cand)[:-1]])
    # one (point, triangle) pair per candidate, grouped by point
    per_point = np.repeat(n_cand, n_pts)
    point_block = np.repeat(np.arange(len(block_id)), n_pts)
    first_pair = np.concatenate([[0], np.cumsum(per_point)[:-1]])
    best = np.empty(len(points))
    for p0 in range(0, len(points), max(1, chunk // max(1, int(n_cand.max())))):
        p1 = min(len(points), p0 + max(1, chunk // max(1, int(n_cand.max()))))
        counts = per_point[p0:p1]
        owner = np.repeat(np.arange(p0, p1), counts)
        k = np.arange(len(owner)) - np.repeat(first_pair[p0:p1] - first_pair[p0], counts)
        tri = cand_tri[cstart[point_block[owner]] + k]
        d2 = _closest_dist_sq(sorted_pts[owner], corners[tri, 0], corners[tri, 1], corners[tri, 2])
        best[p0:p1] = np.minimum.reduceat(d2, first_pair[p0:p1] - first_pair[p0])
    out = np.empty(len(points))
    out[order] = np.sqrt(best)
    return out


# -- distance field grid -------------------------------------------------------

@dataclass
class DistanceFieldGrid:
    values: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def spacing(self) -> np.ndarray:
        return (self.hi - self.lo) / (self.resolution - 1)

    def nodes(self) -> np.ndarray:
        axes = [np.linspace(self.lo[i], self.hi[i], self.resolution) for i in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def save(self, path) -> None:
        res = self.resolution
        header = DFG_MAGIC + struct.pack("<I6d", res, *self.lo, *self.hi)
        # x-fastest order
        body = np.ascontiguousarray(self.values.transpose(2, 1, 0)).astype("<f8").tobytes()
        Path(path).write_bytes(header + body)

    @classmethod
    def load(cls, path) -> DistanceFieldGrid:
        data = Path(path).read_bytes()
        if data[:4] != DFG_MAGIC:
            raise ValueError(f"{path}: not a DFG1 file")
        res, *ext = struct.unpack_from("<I6d", data, 4)
        off = 4 + struct.calcsize("<I6d")
        vals = np.frombuffer(data, dtype="<f8", count=res ** 3, offset=off)
        vals = vals.reshape(res, res, res).transpose(2, 1, 0).astype(float)
        return cls(vals, ext[:3], ext[3:])


def build_df_grid(mesh: TriangleMesh, res: int = 64, extent: float = 0.6) -> DistanceFieldGrid:
    """Unsigned distance to the mesh at every node, clamped to 0 inside."""
    lo = np.full(3, -extent)
    hi = np.full(3, extent)
    grid = DistanceFieldGrid(np.zeros((res, res, res)), lo, hi)
    nodes = grid.nodes().reshape(-1, 3)
    inside = inside_mesh(mesh, nodes)
    vals = np.zeros(len(nodes))
    outside = ~inside
    vals[outside] = mesh_distance(mesh, nodes[outside])
    grid.values = vals.reshape(res, res, res)
    return grid


def df_eval(grid: DistanceFieldGrid, p):
    """Trilinear value and its exact gradient at points ``p``.

    Points outside the grid are clamped onto it and the gradient on each
    clamped axis is zero.
    """
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    res = grid.resolution
    h = grid.spacing
    f = (p - grid.lo) / h
    clamped = (f < 0) | (f > res - 1)
    f = np.clip(f, 0, res - 1)
    i0 = np.minimum(np.floor(f).astype(np.int64), res - 2)
    t = f - i0
    v = grid.values
    x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
    c = np.empty((len(p), 2, 2, 2))
    for a in (0, 1):
        for b in (0, 1):
            for d in (0, 1):
                c[:, a, b, d] = v[x0 + a, y0 + b, z0 + d]
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    cx = c[:, 0] * (1 - tx)[:, None, None] + c[:, 1] * tx[:, None, None]
    dcx = c[:, 1] - c[:, 0]
    cxy = cx[:, 0] * (1 - ty)[:, None] + cx[:, 1] * ty[:, None]
    val = cxy[:, 0] * (1 - tz) + cxy[:, 1] * tz
    gz = cxy[:, 1] - cxy[:, 0]
    gy_ = cx[:, 1] - cx[:, 0]
    gy = gy_[:, 0] * (1 - tz) + gy_[:, 1] * tz
    dcxy = dcx[:, 0] * (1 - ty)[:, None] + dcx[:, 1] * ty[:, None]
    gx = dcxy[:, 0] * (1 - tz) + dcxy[:, 1] * tz
    grad = np.stack([gx, gy, gz], axis=1) / h
    grad[clamped] = 0.0
    if single:
        return float(val[0]), grad[0]
    return val, grad


@dataclass
class TargetShape:
    """A preprocessed target: mesh, occupancy grid and distance-field grid."""

    mesh: TriangleMesh
    occupancy: OccupancyGrid
    df: DistanceFieldGrid
    name: str = ""

    @classmethod
    def from_mesh(cls, mesh: TriangleMesh, occ_res: int = 32, df_res: int = 64,
                  df_extent: float = 0.6, name: str = "") -> TargetShape:
        return cls(mesh, voxelize(mesh, occ_res), build_df_grid(mesh, df_res, df_extent), name)

    @classmethod
    def from_obj(cls, path, occ_res: int = 32, df_res: int = 64, df_extent: float = 0.6,
                 use_cache: bool = True) -> TargetShape:
        """Load an OBJ, reusing ``<stem>.dfg`` / ``<stem>.occ.npy`` caches when they match."""
        path = Path(path)
        mesh = load_mesh(path)
        dfg, occ_path = cache_paths(path)
        if use_cache and dfg.exists() and occ_path.exists():
            df = DistanceFieldGrid.load(dfg)
            occ = np.load(occ_path)
            if (df.resolution == df_res and np.allclose(df.hi, df_extent)
                    and occ.shape == (occ_res,) * 3):
                return cls(mesh, OccupancyGrid(occ.astype(bool)), df, path.stem)
        return cls.from_mesh(mesh, occ_res, df_res, df_extent, path.stem)

    def save_cache(self, obj_path) -> tuple:
        dfg, occ_path = cache_paths(obj_path)
        self.df.save(dfg)
        np.save(occ_path, self.occupancy.bits)
        return dfg, occ_path

    def sample_points(self, n: int, rng) -> np.ndarray:
        return sample_surface(self.mesh, n, rng)


def cache_paths(obj_path) -> tuple:
    obj_path = Path(obj_path)
    return obj_path.with_suffix(".dfg"), obj_path.with_suffix(".occ.npy")
