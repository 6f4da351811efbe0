"""Rigid registration kernels and data association gates.

All transforms here are planar: a rotation about z plus a translation in the
xy plane. Points may carry extra coordinates (e.g. height), which pass
through unchanged but still take part in nearest-neighbour search.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import wrap_angle
from .tunnel import FacilityKind, LandmarkMap, LaneDistMap


class IcpDiverged(RuntimeError):
    pass


class NdtIllConditioned(RuntimeError):
    pass


@dataclass
class RigidCorrection:
    dx: float = 0.0
    dy: float = 0.0
    dpsi: float = 0.0
    converged: bool = False
    score: float = 0.0
    iterations: int = 0
    history: list = field(default_factory=list)
    hessian: np.ndarray | None = None
    n_points: int = 0

    def __post_init__(self):
        self.dpsi = wrap_angle(self.dpsi)

    @property
    def params(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dpsi])


@dataclass
class Association:
    pairs: np.ndarray  # (M, 2) int: source index, target index
    euclidean: np.ndarray
    mahalanobis: np.ndarray | None = None

    def __len__(self):
        return self.pairs.shape[0]

    @classmethod
    def empty(cls) -> "Association":
        return cls(np.zeros((0, 2), dtype=int), np.zeros(0), np.zeros(0))


def apply_planar(points: np.ndarray, dx: float, dy: float, dpsi: float, center=None) -> np.ndarray:
    """Rotate ``points`` by ``dpsi`` about ``center`` (default origin) then translate."""
    pts = np.array(points, dtype=float, copy=True)
    c, s = math.cos(dpsi), math.sin(dpsi)
    cx, cy = (0.0, 0.0) if center is None else (center[0], center[1])
    x = pts[:, 0] - cx
    y = pts[:, 1] - cy
    pts[:, 0] = c * x - s * y + cx + dx
    pts[:, 1] = s * x + c * y + cy + dy
    return pts


def icp(
    source: np.ndarray,
    target: np.ndarray,
    dof: int = 3,
    max_iter: int = 30,
    tol: float = 1e-4,
    max_corr_dist: float | None = None,
    init=(0.0, 0.0, 0.0),
    tree: cKDTree | None = None,
    min_corr_fraction: float = 0.3,
    nearest=None,
) -> RigidCorrection:
    """Point-to-point ICP returning the planar transform that maps ``source`` onto ``target``.

    ``dof=2`` estimates only the x shift and the rotation (y shift fixed at
    the initial value). Each iteration re-matches nearest neighbours, takes
    one Gauss-Newton step and is accepted only if the residual RMS does not
    grow. ``nearest(points, upper)`` may replace the KD-tree search; it
    returns distances (inf when unmatched) and the matched target points.
    """
    source = np.asarray(source, dtype=float)
    target = np.asarray(target, dtype=float)
    if source.shape[0] == 0 or target.shape[0] == 0:
        raise ValueError("icp needs non-empty point sets")
    if dof not in (2, 3):
        raise ValueError("dof must be 2 or 3")
    if nearest is None:
        if tree is None:
            tree = cKDTree(target)

        def nearest(pts, bound):
            d, idx = tree.query(pts, distance_upper_bound=bound)
            return d, target[np.minimum(idx, target.shape[0] - 1)]

    params = np.array(init, dtype=float)
    free = [0, 2] if dof == 2 else [0, 1, 2]
    upper = np.inf if max_corr_dist is None else max_corr_dist

    def match(p):
        moved = apply_planar(source, *p)
        d, matched = nearest(moved, upper)
        ok = np.isfinite(d)
        if ok.mean() < min_corr_fraction:
            raise IcpDiverged(f"only {ok.mean():.0%} of points found a correspondence")
        rms = math.sqrt(np.mean(d[ok] ** 2))
        return moved, matched, ok, rms

    moved, matched, ok, rms = match(params)
    history = [rms]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        q = matched[ok]
        p = moved[ok]
        r = p - q  # residuals, all coordinates
        # Jacobian of the moved xy w.r.t. (dx, dy, dpsi), about the origin
        c0 = params[:2]
        rel = p[:, :2] - c0
        J = np.zeros((p.shape[0], 2, 3))
        J[:, 0, 0] = 1.0
        J[:, 1, 1] = 1.0
        J[:, 0, 2] = -rel[:, 1]
        J[:, 1, 2] = rel[:, 0]
        Jf = J[:, :, free].reshape(-1, len(free))
        rf = r[:, :2].reshape(-1)
        JtJ = Jf.T @ Jf
        try:
            step_f = -np.linalg.solve(JtJ, Jf.T @ rf)
        except np.linalg.LinAlgError:
            break
        step = np.zeros(3)
        step[free] = step_f
        # compose the increment: rotation about the current translation point
        cand = params.copy()
        cand[2] += step[2]
        cand[:2] += step[:2]
        if dof == 2:
            cand[1] = params[1]
        try:
            m2, matched2, ok2, rms2 = match(cand)
        except IcpDiverged:
            break
        if rms2 > rms + 1e-12:
            break
        params, moved, matched, ok, rms = cand, m2, matched2, ok2, rms2
        history.append(rms)
        if np.linalg.norm(step) < tol:
            converged = True
            break
    return RigidCorrection(
        params[0], params[1], params[2], converged, rms, it, history, n_points=int(ok.sum())
    )


# ---------------------------------------------------------------- NDT


def ndt_score(params, points: np.ndarray, means: np.ndarray, inv_covs: np.ndarray, center):
    """Score, gradient and Hessian of sum(exp(-q'Cq/2)) w.r.t. (dx, dy, dpsi).

    ``points`` are paired row-wise with ``means``/``inv_covs``; the rotation
    is about ``center``.
    """
    dx, dy, dpsi = params
    c, s = math.cos(dpsi), math.sin(dpsi)
    rel = points - center
    rx = c * rel[:, 0] - s * rel[:, 1]
    ry = s * rel[:, 0] + c * rel[:, 1]
    q = np.stack([rx + center[0] + dx - means[:, 0], ry + center[1] + dy - means[:, 1]], axis=1)
    Cq = np.einsum("nij,nj->ni", inv_covs, q)
    e = np.exp(-0.5 * np.einsum("ni,ni->n", q, Cq))
    # dq/dpsi and d2q/dpsi2
    j3 = np.stack([-ry, rx], axis=1)
    h33 = np.stack([-rx, -ry], axis=1)
    # first derivatives of q'Cq/2: Cq . dq_k
    a1 = Cq[:, 0]
    a2 = Cq[:, 1]
    a3 = np.einsum("ni,ni->n", Cq, j3)
    A = np.stack([a1, a2, a3], axis=1)
    score = float(e.sum())
    grad = -(e[:, None] * A).sum(axis=0)
    # second derivatives of q'Cq/2: dq_k' C dq_l + q'C d2q_kl
    Cj3 = np.einsum("nij,nj->ni", inv_covs, j3)
    B = np.empty((points.shape[0], 3, 3))
    B[:, 0, 0] = inv_covs[:, 0, 0]
    B[:, 0, 1] = B[:, 1, 0] = inv_covs[:, 0, 1]
    B[:, 1, 1] = inv_covs[:, 1, 1]
    B[:, 0, 2] = B[:, 2, 0] = Cj3[:, 0]
    B[:, 1, 2] = B[:, 2, 1] = Cj3[:, 1]
    B[:, 2, 2] = np.einsum("ni,ni->n", j3, Cj3) + np.einsum("ni,ni->n", Cq, h33)
    hess = (e[:, None, None] * (A[:, :, None] * A[:, None, :] - B)).sum(axis=0)
    return score, grad, hess


def _negative_definite(H: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    """Flip positive curvature and floor small curvature so Newton steps ascend."""
    w, V = np.linalg.eigh(0.5 * (H + H.T))
    scale = np.max(np.abs(w))
    if not np.isfinite(scale) or scale < 1e-12:
        raise NdtIllConditioned("NDT Hessian is numerically zero")
    w = -np.maximum(np.abs(w), floor * scale)
    return (V * w) @ V.T


def ndt_match(
    points: np.ndarray,
    lane_map: LaneDistMap,
    init,
    max_iter: int = 20,
    euclid_gate: float = 2.0,
    maha_gate: float | None = 3.0,
    tol: float = 1e-4,
    min_points: int = 10,
    max_step=(0.5, 0.5, math.radians(1.0)),
) -> RigidCorrection:
    """Point-to-distribution NDT about the predicted vehicle pose ``init``.

    ``points`` are lane points in the vehicle frame (lateral, longitudinal).
    The returned correction (dx, dy, dpsi) is in the local plane, rotation
    taken about the vehicle position, so the corrected pose is simply
    ``init + correction``.
    """
    pts_v = np.asarray(points, dtype=float)[:, :2]
    if pts_v.shape[0] == 0:
        return RigidCorrection()
    center = np.array([init.x, init.y])
    pts = init.to_global(pts_v)
    assoc = associate_lane(pts, lane_map, euclid_gate, maha_gate)
    if len(assoc) < min_points:
        return RigidCorrection(n_points=len(assoc))
    p = pts[assoc.pairs[:, 0]]
    mu = lane_map.means[assoc.pairs[:, 1]]
    C = lane_map.inv_covs[assoc.pairs[:, 1]]
    x = np.zeros(3)
    score, g, H = ndt_score(x, p, mu, C, center)
    history = [score]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        Hn = _negative_definite(H)
        step = -np.linalg.solve(Hn, g)
        step *= min(1.0, float(np.min(np.asarray(max_step) / np.maximum(np.abs(step), 1e-300))))
        alpha = 1.0
        accepted = False
        while alpha * np.linalg.norm(step) >= 0.1 * tol:
            cand = x + alpha * step
            s2, g2, H2 = ndt_score(cand, p, mu, C, center)
            if s2 >= score:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            # no ascent left at the tolerance scale: a local maximum
            converged = True
            break
        moved = np.linalg.norm(alpha * step)
        x, score, g, H = cand, s2, g2, H2
        history.append(score)
        if moved < tol:
            converged = True
            break
    return RigidCorrection(x[0], x[1], x[2], converged, score, it, history, H, len(assoc))


# ---------------------------------------------------------------- association


def associate_lane(
    points: np.ndarray,
    lane_map: LaneDistMap,
    euclid_gate: float = 2.0,
    maha_gate: float | None = 3.0,
) -> Association:
    """Pair each point with its nearest Gaussian mean, then apply both gates."""
    points = np.asarray(points, dtype=float)[:, :2]
    if len(lane_map) == 0 or points.shape[0] == 0:
        return Association.empty()
    d, j = lane_map.tree.query(points, distance_upper_bound=euclid_gate)
    ok = np.isfinite(d)
    i = np.flatnonzero(ok)
    j = j[ok]
    d = d[ok]
    q = points[i] - lane_map.means[j]
    m = np.sqrt(np.einsum("ni,nij,nj->n", q, lane_map.inv_covs[j], q))
    if maha_gate is not None:
        keep = m <= maha_gate
        i, j, d, m = i[keep], j[keep], d[keep], m[keep]
    return Association(np.stack([i, j], axis=1).astype(int), d, m)


def associate_landmarks(
    kinds,
    positions: np.ndarray,
    landmark_map: LandmarkMap,
    gate: float = 3.0,
) -> Association:
    """Greedy one-to-one pairing of detections to same-kind landmarks within ``gate``."""
    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    cands = []
    for i, (kind, p) in enumerate(zip(kinds, positions)):
        idx = landmark_map.indices(FacilityKind(kind))
        if idx.size == 0:
            continue
        d = np.hypot(*(landmark_map.positions[idx] - p).T)
        for j, dj in zip(idx[d <= gate], d[d <= gate]):
            cands.append((float(dj), i, int(j)))
    cands.sort()
    used_src, used_tgt, pairs, dists = set(), set(), [], []
    for d, i, j in cands:
        if i in used_src or j in used_tgt:
            continue
        used_src.add(i)
        used_tgt.add(j)
        pairs.append((i, j))
        dists.append(d)
    if not pairs:
        return Association.empty()
    return Association(np.array(pairs, dtype=int), np.array(dists))
