"""Coverage and consistency losses with analytic parameter gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import (Assembly, FaceSample, face_weights, face_weights_grad,
                   matrix_grad_to_quat_raw)
from .volume import DistanceFieldGrid, TargetShape, df_eval

EMPTY_ASSEMBLY_PENALTY = 1e4


@dataclass
class ParamGradients:
    d_dims: np.ndarray
    d_quat: np.ndarray
    d_trans: np.ndarray

    @classmethod
    def zeros(cls, m: int) -> ParamGradients:
        return cls(np.zeros((m, 3)), np.zeros((m, 4)), np.zeros((m, 3)))

    def __add__(self, other: ParamGradients) -> ParamGradients:
        return ParamGradients(self.d_dims + other.d_dims, self.d_quat + other.d_quat,
                              self.d_trans + other.d_trans)

    def scale(self, a: float) -> ParamGradients:
        return ParamGradients(a * self.d_dims, a * self.d_quat, a * self.d_trans)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.d_dims.ravel(), self.d_quat.ravel(), self.d_trans.ravel()])


@dataclass
class LossReport:
    coverage: float
    consistency: float
    total: float
    per_primitive_consistency: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass
class LossConfig:
    n_points: int = 1000
    k_per_face: int = 25
    coverage_weight: float = 1.0
    consistency_weight: float = 1.0


def coverage_loss(asm: Assembly, mask, target_pts):
    """Mean over target points of the min-composed squared assembly DF.

    Each point's gradient is routed to the single primitive achieving the
    minimum (lowest index on ties). With every primitive absent the loss is a
    fixed penalty and all gradients are zero.
    """
    mask = np.asarray(mask, dtype=bool)
    pts = np.asarray(target_pts, dtype=float)
    grads = ParamGradients.zeros(asm.M)
    if not mask.any():
        return EMPTY_ASSEMBLY_PENALTY, grads
    n = len(pts)
    rot = asm.rotations()
    rel = pts[None] - asm.trans[:, None]
    local = np.einsum("mnj,mji->mni", rel, rot)
    excess = np.maximum(np.abs(local) - asm.dims[:, None], 0.0)
    d = np.sum(excess * excess, axis=-1)
    d[~mask] = np.inf
    owner = np.argmin(d, axis=0)
    value = float(d[owner, np.arange(n)].mean())
    grad_r = np.zeros((asm.M, 3, 3))
    for m in np.nonzero(mask)[0]:
        sel = owner == m
        if not sel.any():
            continue
        e = excess[m, sel]
        g_local = 2.0 * e * np.sign(local[m, sel]) / n
        grads.d_dims[m] = -2.0 * e.sum(0) / n
        grads.d_trans[m] = -(g_local @ rot[m].T).sum(0)
        grad_r[m] = rel[m, sel].T @ g_local
    used = np.nonzero(mask)[0]
    grads.d_quat[used] = matrix_grad_to_quat_raw(grad_r[used], asm.quat[used])
    return value, grads


def consistency_loss(asm: Assembly, mask, df: DistanceFieldGrid, k_per_face: int = 25,
                     rng=None, coeffs: FaceSample | None = None):
    """Importance-weighted squared target DF over primitive surface samples.

    Returns ``(value, grads, per_primitive)``. ``coeffs`` fixes the sampling
    coefficients (batched over primitives) for common-random-number checks;
    otherwise fresh coefficients are drawn from ``rng``.
    """
    mask = np.asarray(mask, dtype=bool)
    m_count = asm.M
    if coeffs is None:
        coeffs = FaceSample.draw(k_per_face, np.random.default_rng(rng), batch=m_count)
    k = coeffs.k_per_face
    rot = asm.rotations()
    local = coeffs.coords * asm.dims[:, None]
    weights = face_weights(asm.dims, coeffs.axis, k)
    world = np.einsum("mnj,mij->mni", local, rot) + asm.trans[:, None]
    n = world.shape[1]
    val, grad = df_eval(df, world.reshape(-1, 3))
    val = val.reshape(m_count, n)
    grad = grad.reshape(m_count, n, 3)
    per_prim = np.where(mask, np.sum(weights * val * val, axis=1), 0.0)

    g_world = (2.0 * weights * val)[..., None] * grad
    g_world[~mask] = 0.0
    grads = ParamGradients.zeros(m_count)
    grads.d_trans = g_world.sum(1)
    g_local = np.einsum("mni,mij->mnj", g_world, rot)
    d_weight = np.where(mask[:, None], val * val, 0.0)
    grads.d_dims = (np.sum(g_local * coeffs.coords, axis=1)
                    + np.einsum("mn,mnj->mj", d_weight,
                                face_weights_grad(asm.dims, coeffs.axis, k)))
    grad_r = np.einsum("mni,mnj->mij", g_world, local)
    grads.d_quat = matrix_grad_to_quat_raw(grad_r, asm.quat)
    grads.d_quat[~mask] = 0.0
    return float(per_prim.sum()), grads, per_prim


def total_loss(asm: Assembly, mask, target: TargetShape, cfg: LossConfig | None = None,
               rng=None, target_pts=None, coeffs: FaceSample | None = None):
    """Weighted sum of coverage and consistency; returns ``(LossReport, ParamGradients)``."""
    cfg = cfg or LossConfig()
    rng = np.random.default_rng(rng)
    if target_pts is None:
        target_pts = target.sample_points(cfg.n_points, rng)
    cov, g_cov = coverage_loss(asm, mask, target_pts)
    con, g_con, per_prim = consistency_loss(asm, mask, target.df, cfg.k_per_face,
                                            rng=rng, coeffs=coeffs)
    wc, wk = cfg.coverage_weight, cfg.consistency_weight
    report = LossReport(cov, con, wc * cov + wk * con, per_prim)
    return report, g_cov.scale(wc) + g_con.scale(wk)
