import struct

import numpy as np
import pytest

from conftest import affine_grid
from shapeasm.synthetic import box_mesh, generate_shape, union_mesh
from shapeasm.volume import (DFG_MAGIC, DistanceFieldGrid, MeshError, TargetShape, TriangleMesh,
                             build_df_grid, cache_paths, df_eval, inside_mesh, load_mesh,
                             mesh_distance, parse_obj, point_triangle_dist_sq, sample_surface,
                             voxelize, write_obj)

CUBE_OBJ = """# unit cube
v 0 0 0
v 1 0 0
v 1 1 0
v 0 1 0
v 0 0 1
v 1 0 1
v 1 1 1
v 0 1 1
f 1 4 3
f 1 3 2
f 5 6 7
f 5 7 8
f 1 2 6
f 1 6 5
f 4 8 7
f 4 7 3
f 1 5 8
f 1 8 4
f 2 3 7
f 2 7 6
"""


def box_dist(p, lo, hi):
    return np.linalg.norm(np.maximum(np.maximum(lo - p, p - hi), 0.0), axis=-1)


def test_load_unit_cube_normalized(tmp_path):
    f = tmp_path / "cube.obj"
    f.write_text(CUBE_OBJ.replace("v 1", "v 3"))
    mesh = load_mesh(f)
    assert len(mesh.triangles) == 12
    lo, hi = mesh.vertices.min(0), mesh.vertices.max(0)
    assert (hi - lo).max() == pytest.approx(1.0)
    assert np.allclose(0.5 * (lo + hi), 0)


def test_unit_cube_is_normalization_fixed_point(tmp_path):
    f = tmp_path / "cube.obj"
    f.write_text(CUBE_OBJ)
    mesh = load_mesh(f)
    assert np.array_equal(mesh.vertices.min(0), [-0.5] * 3)
    assert np.array_equal(mesh.vertices.max(0), [0.5] * 3)


def test_quads_fan_triangulated_and_slash_tokens():
    mesh = parse_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1/1 2/2/2 3/3/3 4/4/4\n")
    assert mesh.triangles.tolist() == [[0, 1, 2], [0, 2, 3]]
    neg = parse_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nf -3 -2 -1\n")
    assert neg.triangles.tolist() == [[0, 1, 2]]


def test_parse_errors():
    with pytest.raises(MeshError, match="empty mesh"):
        parse_obj("v 0 0 0\nv 1 0 0\n")
    with pytest.raises(MeshError, match=":2:"):
        parse_obj("v 0 0 0\nv 1 x 0\n")
    with pytest.raises(MeshError, match="out of range"):
        parse_obj("v 0 0 0\nf 1 2 3\n")


def test_write_obj_round_trip(tmp_path, table_shape):
    f = tmp_path / "t.obj"
    write_obj(f, table_shape.mesh)
    back = load_mesh(f, normalize=False)
    assert np.array_equal(back.vertices, table_shape.mesh.vertices)
    assert np.array_equal(back.triangles, table_shape.mesh.triangles)


def test_voxelize_cube_examples():
    full = voxelize(box_mesh([0, 0, 0], [0.5, 0.5, 0.5]), 8)
    assert full.bits.sum() == 512
    half = voxelize(box_mesh([0, 0, 0], [0.25, 0.25, 0.25]), 8)
    assert half.bits.sum() == 64
    assert half.bits[2:6, 2:6, 2:6].all()


def test_inside_outside_bbox():
    mesh = box_mesh([0, 0, 0], [0.2, 0.2, 0.2])
    assert not inside_mesh(mesh, np.array([[0.45, 0.45, 0.45], [-0.3, 0, 0]])).any()


def test_inside_majority_vote_survives_hole():
    mesh = box_mesh([0, 0, 0], [0.25, 0.25, 0.25])
    holed = TriangleMesh(mesh.vertices, mesh.triangles[1:])
    pts = np.array([[0.01, 0.02, 0.03], [0.1, -0.1, 0.05], [0.4, 0.0, 0.0]])
    assert inside_mesh(holed, pts).tolist() == [True, True, False]


def test_voxelize_union_matches_analytic():
    from shapeasm.synthetic import analytic_occupancy
    for kind in ("table", "chair", "cross"):
        s = generate_shape(kind, np.random.default_rng(5))
        assert np.array_equal(voxelize(s.mesh, 32).bits, analytic_occupancy(s.parts, 32))


def test_sample_surface_face_counts():
    mesh = box_mesh([0, 0, 0], [0.5, 0.5, 0.5])
    pts = sample_surface(mesh, 1000, np.random.default_rng(3))
    face = np.argmax(np.abs(pts), axis=1) * 2 + (pts[np.arange(1000), np.argmax(np.abs(pts), 1)] < 0)
    counts = np.bincount(face, minlength=6)
    sigma = np.sqrt(1000 * (1 / 6) * (5 / 6))
    assert np.all(np.abs(counts - 1000 / 6) < 3 * sigma)
    assert np.allclose(np.abs(pts).max(1), 0.5)


def test_sample_surface_single_triangle_and_determinism():
    tri = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0.5]], [[0, 1, 2]])
    a = sample_surface(tri, 200, np.random.default_rng(9))
    b = sample_surface(tri, 200, np.random.default_rng(9))
    assert np.array_equal(a, b)
    # barycentric solve against the triangle plane
    e1, e2 = tri.vertices[1], tri.vertices[2]
    uv, res, *_ = np.linalg.lstsq(np.stack([e1, e2], 1), a.T, rcond=None)
    assert np.abs(np.stack([e1, e2], 1) @ uv - a.T).max() < 1e-9
    assert np.all(uv >= -1e-12) and np.all(uv.sum(0) <= 1 + 1e-12)


def test_point_triangle_distance_regions():
    tri = np.array([[[0, 0, 0], [1, 0, 0], [0, 1, 0]]], dtype=float)
    pts = np.array([[0.2, 0.2, 0.5], [-1, -1, 0], [2, 0, 0], [0.5, -1, 0], [1, 1, 0], [-1, 0.5, 0.3]])
    want = [0.25, 2.0, 1.0, 1.0, 0.5, 1.0 + 0.09]
    assert np.allclose(point_triangle_dist_sq(pts, tri)[:, 0], want)


def test_mesh_distance_matches_analytic_union(rng):
    s = generate_shape("chair", np.random.default_rng(2))
    pts = rng.uniform(-0.6, 0.6, size=(1000, 3))
    lo = s.parts.trans - s.parts.dims
    hi = s.parts.trans + s.parts.dims
    per_box = np.stack([box_dist(pts, l, h) for l, h in zip(lo, hi)], 1)
    outside = per_box.min(1) > 0
    got = mesh_distance(s.mesh, pts[outside])
    assert np.abs(got - per_box.min(1)[outside]).max() < 1e-9


def test_df_grid_examples():
    mesh = box_mesh([0, 0, 0], [0.25, 0.25, 0.25])
    g = build_df_grid(mesh, res=13, extent=0.6)
    nodes = g.nodes()
    i = np.argmin(np.linalg.norm(nodes - [0.5, 0, 0], axis=-1))
    assert g.values.ravel()[i] == pytest.approx(0.25, abs=1e-12)
    j = np.argmin(np.linalg.norm(nodes - [0.0, 0.0, 0.0], axis=-1))
    assert g.values.ravel()[j] == 0.0
    # res 25 puts nodes on the faces at +-0.25
    g2 = build_df_grid(mesh, res=25, extent=0.6)
    on_face = np.isclose(np.abs(g2.nodes()).max(-1), 0.25)
    assert np.abs(g2.values[on_face]).max() < 1e-6
    assert g2.values.min() >= 0


def test_df_grid_matches_analytic_box(rng):
    g = build_df_grid(box_mesh([0.05, 0, -0.05], [0.2, 0.3, 0.1]), res=20)
    lo, hi = np.array([-0.15, -0.3, -0.15]), np.array([0.25, 0.3, 0.05])
    assert np.abs(g.values - box_dist(g.nodes(), lo, hi)).max() < 1e-12


def test_df_eval_nodes_and_linear_reproduction(rng):
    g = affine_grid()
    nodes = g.nodes().reshape(-1, 3)
    v, _ = df_eval(g, nodes)
    assert np.abs(v - g.values.ravel()).max() < 1e-12
    h = g.spacing
    center = g.lo + 2.5 * h
    corners = [g.values[2 + a, 2 + b, 2 + c] for a in (0, 1) for b in (0, 1) for c in (0, 1)]
    assert df_eval(g, center)[0] == pytest.approx(np.mean(corners), abs=1e-12)


def test_df_eval_gradient_fd(cube_target, rng):
    g = cube_target.df
    h = g.spacing[0]
    count = 0
    while count < 100:
        p = rng.uniform(-0.55, 0.55, 3)
        frac = (p - g.lo) / h % 1
        if np.min(np.minimum(frac, 1 - frac)) * h < 1e-4:
            continue
        count += 1
        _, grad = df_eval(g, p)
        eps = 1e-7
        for i in range(3):
            e = np.eye(3)[i] * eps
            fd = (df_eval(g, p + e)[0] - df_eval(g, p - e)[0]) / (2 * eps)
            assert abs(fd - grad[i]) <= 1e-6 * max(1.0, abs(grad[i]))


def test_df_eval_continuity_and_clamp():
    g = affine_grid(res=7)
    face = g.lo[0] + 3 * g.spacing[0]
    a = df_eval(g, [face - 1e-12, 0.1, 0.1])[0]
    b = df_eval(g, [face + 1e-12, 0.1, 0.1])[0]
    assert abs(a - b) < 1e-9
    v, grad = df_eval(g, [5.0, 0.0, 0.0])
    assert grad[0] == 0.0 and grad[1] != 0.0
    assert v == pytest.approx(df_eval(g, [0.6, 0.0, 0.0])[0])


def test_surface_points_near_zero(table_target, rng):
    pts = table_target.sample_points(500, rng)
    v, _ = df_eval(table_target.df, pts)
    assert v.min() >= 0
    assert v.max() <= np.linalg.norm(table_target.df.spacing)


def test_dfg_file_layout(tmp_path, rng):
    g = DistanceFieldGrid(rng.uniform(size=(4, 4, 4)), [-0.6] * 3, [0.6] * 3)
    f = tmp_path / "g.dfg"
    g.save(f)
    data = f.read_bytes()
    assert data[:4] == DFG_MAGIC
    res, *ext = struct.unpack_from("<I6d", data, 4)
    assert res == 4 and ext == [-0.6] * 3 + [0.6] * 3
    off = 4 + struct.calcsize("<I6d")
    i, j, k = 1, 2, 3
    (val,) = struct.unpack_from("<d", data, off + 8 * (i + 4 * (j + 4 * k)))
    assert val == g.values[i, j, k]
    back = DistanceFieldGrid.load(f)
    assert np.array_equal(back.values, g.values)
    assert len(data) == off + 8 * 64


def test_target_cache_round_trip(tmp_path, table_shape):
    f = tmp_path / "t.obj"
    write_obj(f, table_shape.mesh)
    t = TargetShape.from_obj(f, df_res=16)
    t.save_cache(f)
    assert all(p.exists() for p in cache_paths(f))
    again = TargetShape.from_obj(f, df_res=16)
    assert np.array_equal(again.df.values, t.df.values)
    assert np.array_equal(again.occupancy.bits, t.occupancy.bits)
    # mismatched resolution rebuilds instead of reusing
    assert TargetShape.from_obj(f, df_res=12).df.resolution == 12


def test_union_mesh_is_closed_and_oriented(table_shape):
    m = table_shape.mesh
    edges = np.concatenate([m.triangles[:, [0, 1]], m.triangles[:, [1, 2]], m.triangles[:, [2, 0]]])
    fwd = {tuple(e) for e in edges.tolist()}
    # every directed edge has its reverse exactly once
    assert all((b, a) in fwd for a, b in fwd) and len(fwd) == len(edges)
    c = m.corners
    vol = np.einsum("ij,ij->i", c[:, 0], np.cross(c[:, 1], c[:, 2])).sum() / 6
    parts = table_shape.parts
    assert vol == pytest.approx(np.prod(2 * parts.dims, axis=1).sum(), rel=1e-9)
    u = union_mesh([([0, 0, 0], [1, 1, 1]), ([0.5, 0, 0], [1.5, 1, 1])])
    cu = u.corners
    assert np.einsum("ij,ij->i", cu[:, 0], np.cross(cu[:, 1], cu[:, 2])).sum() / 6 == pytest.approx(1.5)
