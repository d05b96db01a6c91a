"""Quaternions, cuboid primitives and exact distance fields.

All point arguments are numpy arrays whose last axis has length 3, so every
function here works on a single point or on a batch. Quaternions are
scalar-first Hamilton quaternions ``(w, x, y, z)``. Cuboid dims are
half-extents.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

QUAT_NORM_EPS = 1e-12
IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def normalize_quat(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < QUAT_NORM_EPS):
        raise ValueError("zero-norm quaternion")
    return q / n


def quat_conjugate(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_multiply(a, b):
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_to_matrix(q):
    """Rotation matrix of a unit quaternion; ``q`` may be batched ``(..., 4)``."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=float), -1, 0)
    r = np.empty(np.shape(w) + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def quat_matrix_jacobian(q):
    """dR/dq_k for the polynomial rotation formula, shape ``(..., 4, 3, 3)``.

    Evaluated at a unit quaternion; compose with :func:`normalize_jacobian`
    to differentiate with respect to an unnormalized quaternion.
    """
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=float), -1, 0)
    zero = np.zeros_like(w)
    dw = np.stack([
        np.stack([zero, -z, y], -1),
        np.stack([z, zero, -x], -1),
        np.stack([-y, x, zero], -1)], -2)
    dx = np.stack([
        np.stack([zero, y, z], -1),
        np.stack([y, -2 * x, -w], -1),
        np.stack([z, w, -2 * x], -1)], -2)
    dy = np.stack([
        np.stack([-2 * y, x, w], -1),
        np.stack([x, zero, z], -1),
        np.stack([-w, z, -2 * y], -1)], -2)
    dz = np.stack([
        np.stack([-2 * z, -w, x], -1),
        np.stack([w, -2 * z, y], -1),
        np.stack([x, y, zero], -1)], -2)
    return 2.0 * np.stack([dw, dx, dy, dz], axis=-3)


def normalize_jacobian(q_raw):
    """d(q/|q|)/dq, shape ``(..., 4, 4)``."""
    q_raw = np.asarray(q_raw, dtype=float)
    n = np.linalg.norm(q_raw, axis=-1)[..., None, None]
    u = q_raw / n[..., 0]
    eye = np.broadcast_to(np.eye(4), u.shape[:-1] + (4, 4))
    return (eye - u[..., :, None] * u[..., None, :]) / n


def matrix_grad_to_quat_raw(grad_r, q_raw):
    """Chain dL/dR ``(..., 3, 3)`` back to the unnormalized quaternion."""
    q = normalize_quat(q_raw)
    dq = np.einsum("...ij,...kij->...k", grad_r, quat_matrix_jacobian(q))
    return np.einsum("...k,...kl->...l", dq, normalize_jacobian(q_raw))


def rotate(p, q):
    """Rotate points ``p`` by unit quaternion ``q`` (q p q^-1)."""
    return np.asarray(p, dtype=float) @ quat_to_matrix(q).T


@dataclass
class PrimitiveParams:
    dims: np.ndarray
    rot: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))
    exist_prob: float = 1.0

    def __post_init__(self):
        self.dims = np.asarray(self.dims, dtype=float)
        self.rot = np.asarray(self.rot, dtype=float)
        self.trans = np.asarray(self.trans, dtype=float)
        self.exist_prob = float(self.exist_prob)

    @property
    def volume(self) -> float:
        return float(8.0 * np.prod(self.dims))


@dataclass
class Assembly:
    """M indexed cuboids stored as stacked arrays.

    ``quat`` holds raw quaternions; they are normalized whenever the
    assembly is evaluated.
    """

    dims: np.ndarray
    quat: np.ndarray
    trans: np.ndarray
    prob: np.ndarray

    def __post_init__(self):
        self.dims = np.atleast_2d(np.asarray(self.dims, dtype=float))
        self.quat = np.atleast_2d(np.asarray(self.quat, dtype=float))
        self.trans = np.atleast_2d(np.asarray(self.trans, dtype=float))
        self.prob = np.atleast_1d(np.asarray(self.prob, dtype=float))
        m = len(self.dims)
        if not (self.quat.shape == (m, 4) and self.trans.shape == (m, 3)
                and self.prob.shape == (m,)):
            raise ValueError("inconsistent assembly array shapes")

    @property
    def M(self) -> int:
        return len(self.dims)

    @classmethod
    def from_primitives(cls, prims) -> Assembly:
        prims = list(prims)
        return cls(
            dims=np.array([p.dims for p in prims]),
            quat=np.array([p.rot for p in prims]),
            trans=np.array([p.trans for p in prims]),
            prob=np.array([p.exist_prob for p in prims]),
        )

    def primitive(self, m: int) -> PrimitiveParams:
        return PrimitiveParams(self.dims[m].copy(), self.quat[m].copy(),
                               self.trans[m].copy(), float(self.prob[m]))

    def copy(self) -> Assembly:
        return Assembly(self.dims.copy(), self.quat.copy(), self.trans.copy(),
                        self.prob.copy())

    def rotations(self) -> np.ndarray:
        return quat_to_matrix(normalize_quat(self.quat))

    def volumes(self) -> np.ndarray:
        return 8.0 * np.prod(self.dims, axis=1)


def world_to_local(p, prim: PrimitiveParams):
    r = quat_to_matrix(normalize_quat(prim.rot))
    return (np.asarray(p, dtype=float) - prim.trans) @ r


def local_to_world(p_local, prim: PrimitiveParams):
    r = quat_to_matrix(normalize_quat(prim.rot))
    return np.asarray(p_local, dtype=float) @ r.T + prim.trans


def cuboid_df_sq(p_local, dims):
    """Squared exterior distance to an origin-centred cuboid; 0 inside."""
    excess = np.maximum(np.abs(np.asarray(p_local, dtype=float)) - dims, 0.0)
    return np.sum(excess * excess, axis=-1)


def cuboid_df_sq_grad(p_local, dims):
    """Gradients of :func:`cuboid_df_sq` with respect to the point and the dims."""
    p_local = np.asarray(p_local, dtype=float)
    excess = np.maximum(np.abs(p_local) - dims, 0.0)
    return 2.0 * excess * np.sign(p_local), -2.0 * excess


def primitive_df_sq(p, prim: PrimitiveParams, exists: bool = True):
    p = np.asarray(p, dtype=float)
    if not exists:
        return np.full(p.shape[:-1], np.inf) if p.ndim > 1 else np.inf
    return cuboid_df_sq(world_to_local(p, prim), prim.dims)


def local_points(points, asm: Assembly):
    """Every point in every primitive frame, shape ``(M, N, 3)``."""
    points = np.asarray(points, dtype=float)
    rot = asm.rotations()
    return np.einsum("mnj,mji->mni", points[None] - asm.trans[:, None], rot)


def df_sq_matrix(points, asm: Assembly, mask):
    """Per-primitive squared DF, shape ``(N, M)``; absent primitives are +inf."""
    d = cuboid_df_sq(local_points(points, asm), asm.dims[:, None]).T
    d[:, ~np.asarray(mask, dtype=bool)] = np.inf
    return d


def assembly_df_sq(points, asm: Assembly, mask):
    """Min-composed squared DF and the index achieving it.

    Ties go to the lowest index. Points get index -1 and value +inf when the
    mask has no existing primitive.
    """
    points = np.asarray(points, dtype=float)
    single = points.ndim == 1
    pts = np.atleast_2d(points)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        val = np.full(len(pts), np.inf)
        idx = np.full(len(pts), -1)
    else:
        d = df_sq_matrix(pts, asm, mask)
        idx = np.argmin(d, axis=1)
        val = d[np.arange(len(pts)), idx]
    if single:
        return float(val[0]), int(idx[0])
    return val, idx


# -- cuboid surface sampling ------------------------------------------------

@dataclass
class FaceSample:
    """Parameter-free sampling coefficients for a cuboid surface.

    ``coords`` are unit-cube surface coordinates: the face axis entry is +-1
    and the other two are uniform in [-1, 1]. Scaling by the dims gives the
    sample on the cuboid, which keeps positions linear in the dims.
    """

    coords: np.ndarray
    axis: np.ndarray
    k_per_face: int

    def __len__(self):
        return len(self.axis)

    @classmethod
    def draw(cls, k_per_face: int, rng: np.random.Generator, batch: int | None = None) -> FaceSample:
        """K samples on each of the 6 faces; ``batch`` adds a leading axis."""
        faces = np.repeat(np.arange(6), k_per_face)
        axis = faces // 2
        sign = np.where(faces % 2 == 0, 1.0, -1.0)
        lead = () if batch is None else (batch,)
        coords = rng.uniform(-1.0, 1.0, size=lead + (len(faces), 3))
        coords[..., np.arange(len(faces)), axis] = sign
        return cls(coords, axis, k_per_face)

    @classmethod
    def single(cls, face: int, u: float, v: float, k_per_face: int = 1) -> FaceSample:
        axis = face // 2
        others = [a for a in range(3) if a != axis]
        c = np.zeros(3)
        c[axis] = 1.0 if face % 2 == 0 else -1.0
        c[others[0]], c[others[1]] = u, v
        return cls(c[None], np.array([axis]), k_per_face)


def face_weights(dims, axis, k_per_face: int):
    """Importance weight per sample: face area / (total area * K)."""
    dims = np.asarray(dims, dtype=float)
    prod_pairs = np.stack([dims[..., 1] * dims[..., 2],
                           dims[..., 0] * dims[..., 2],
                           dims[..., 0] * dims[..., 1]], axis=-1)
    half_total = prod_pairs.sum(axis=-1, keepdims=True)
    return prod_pairs[..., axis] / (2.0 * half_total * k_per_face)


def face_weights_grad(dims, axis, k_per_face: int):
    """d weight / d dims for each sample, shape ``(..., n, 3)``."""
    dims = np.asarray(dims, dtype=float)
    w, h, d = dims[..., 0:1], dims[..., 1:2], dims[..., 2:3]
    s = w * h + h * d + w * d
    ds = np.stack([h + d, w + d, w + h], axis=-1)
    # face-area products and their dims derivatives per axis
    num = np.stack([h * d, w * d, w * h], axis=-1)[..., 0, :]
    zero = np.zeros_like(w)
    dnum = np.stack([
        np.concatenate([zero, d, h], -1),
        np.concatenate([d, zero, w], -1),
        np.concatenate([h, w, zero], -1)], axis=-2)
    num_a = num[..., axis]
    dnum_a = dnum[..., axis, :]
    s = s[..., None]
    return (dnum_a * s - num_a[..., None] * ds) / (2.0 * k_per_face * s * s)


def cuboid_surface_sample(dims, coeffs: FaceSample):
    """Surface points and importance weights for a cuboid with half-extents ``dims``."""
    dims = np.asarray(dims, dtype=float)
    return coeffs.coords * dims, face_weights(dims, coeffs.axis, coeffs.k_per_face)


def cuboid_surface_sample_grad(coeffs: FaceSample, dims):
    """Jacobians of sample point ``(n, 3, 3)`` and weight ``(n, 3)`` w.r.t. dims."""
    dims = np.asarray(dims, dtype=float)
    n = len(coeffs)
    jac_p = np.zeros((n, 3, 3))
    idx = np.arange(3)
    jac_p[:, idx, idx] = coeffs.coords
    return jac_p, face_weights_grad(dims, coeffs.axis, coeffs.k_per_face)
