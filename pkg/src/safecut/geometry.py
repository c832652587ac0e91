"""Convex polytope hypothesis spaces and maximum-volume inscribed ellipsoids.

A hypothesis space is a bounded polytope {theta : N theta <= c}.  Each
directional correction contributes a two-half-space cut; the next query
parameter is the center of the maximum-volume ellipsoid (MVE) inscribed in
the updated polytope.  The MVE is computed by a damped-Newton log-barrier
path following on

    minimize  -log det H   s.t.  ||H n_j|| + d . n_j <= c_j,  H > 0,

which is validated against analytic cases in the test suite.  A 2D
polygon-area routine provides the exact volume oracle used by the
volume-reduction checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .constraints import FeatureConstraint, feature_values_and_gradients
from .errors import (
    DegenerateCorrection,
    DimensionError,
    EmptyBox,
    InfeasiblePolytope,
    UnboundedPolytope,
)
from .trajopt import CostSpec, Trajectory, cost_gradient


@dataclass(frozen=True)
class Polytope:
    """Intersection of half-spaces {theta : normals @ theta <= offsets}."""

    normals: np.ndarray  # (k, r)
    offsets: np.ndarray  # (k,)

    @property
    def dim(self) -> int:
        return self.normals.shape[1]

    @property
    def num_rows(self) -> int:
        return self.normals.shape[0]

    def to_rows(self) -> list[list[float]]:
        return [[*map(float, n), float(b)] for n, b in zip(self.normals, self.offsets)]

    @staticmethod
    def from_rows(rows: list[list[float]]) -> "Polytope":
        arr = np.asarray(rows, dtype=float)
        return Polytope(normals=arr[:, :-1], offsets=arr[:, -1])


@dataclass(frozen=True)
class Cut:
    """Two half-spaces implied by one correction on one solved plan.

    The primary half-space {theta . n <= b} encodes that the correction
    descends the penalized objective; the feasibility half-space
    {theta . phi < -phi0} encodes that the corrected plan was safe under
    the intended constraint.  Strictness of the second inequality only
    excludes a zero-measure boundary, so it is stored closed.
    """

    primary_normal: np.ndarray
    primary_offset: float
    feasibility_normal: np.ndarray
    feasibility_offset: float


@dataclass(frozen=True)
class Ellipsoid:
    """Affine image {H v + d : ||v|| <= 1} of the unit ball, H symmetric PD."""

    shape: np.ndarray  # (r, r)
    center: np.ndarray  # (r,)

    @property
    def log_det(self) -> float:
        L = np.linalg.cholesky(self.shape)
        return float(2.0 * np.log(np.diag(L)).sum())


def initial_box(c_l: np.ndarray, c_h: np.ndarray) -> Polytope:
    """Axis-aligned box {c_l <= theta <= c_h} as 2r half-spaces."""
    c_l = np.asarray(c_l, dtype=float).reshape(-1)
    c_h = np.asarray(c_h, dtype=float).reshape(-1)
    if c_l.shape != c_h.shape:
        raise DimensionError("box bounds have different shapes")
    if np.any(c_l >= c_h):
        raise EmptyBox(f"lower bound not strictly below upper bound: {c_l} vs {c_h}")
    r = c_l.size
    eye = np.eye(r)
    normals = np.vstack([eye, -eye])
    offsets = np.concatenate([c_h, -c_l])
    return Polytope(normals=normals, offsets=offsets)


def contains(poly: Polytope, theta: np.ndarray, slack: float = 0.0) -> bool:
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if theta.size != poly.dim:
        raise DimensionError(f"theta has dim {theta.size}, polytope has dim {poly.dim}")
    return bool(np.all(poly.normals @ theta <= poly.offsets + slack))


def build_cut(
    plan: Trajectory,
    correction: np.ndarray,
    gamma: float,
    constraint: FeatureConstraint,
    cost: CostSpec,
) -> Cut:
    """Construct the two-half-space cut implied by one correction.

    The correction is embedded at the first control step only; with
    a_bar = (a, 0, ..., 0) the primary half-space is

        theta . ( -<a_bar, dJ/du> phi + gamma (dphi/du) a_bar )
            <= <a_bar, dJ/du> phi0 - gamma <a_bar, dphi0/du>,

    and the feasibility half-space is theta . phi <= -phi0, all quantities
    evaluated at the solved plan.
    """
    a = np.asarray(correction, dtype=float).reshape(-1)
    m = plan.controls.shape[1]
    if a.size != m:
        raise DimensionError(f"correction has dim {a.size}, controls have dim {m}")
    if not np.any(a):
        raise DegenerateCorrection("correction direction is zero")

    grad_j = cost_gradient(constraint.dynamics, cost, plan)
    phi0, grad_phi0, phi, dphi = feature_values_and_gradients(constraint, plan)
    # a_bar has support only on the first control block
    a_dot_gj = float(a @ grad_j[:m])
    normal = -a_dot_gj * phi + gamma * (dphi[:, :m] @ a)
    offset = a_dot_gj * phi0 - gamma * float(a @ grad_phi0[:m])
    return Cut(
        primary_normal=normal,
        primary_offset=float(offset),
        feasibility_normal=phi.copy(),
        feasibility_offset=float(-phi0),
    )


def apply_cut(poly: Polytope, cut: Cut) -> Polytope:
    """Append both cut half-spaces; the result is a subset of the input.

    The primary row is rescaled to a unit normal (a pure rescaling of an
    inequality) to keep the ellipsoid solver well conditioned.
    """
    scale = float(np.linalg.norm(cut.primary_normal))
    if scale < 1e-14:
        raise DegenerateCorrection("cut normal is numerically zero")
    rows_n = [poly.normals, cut.primary_normal.reshape(1, -1) / scale]
    rows_b = [poly.offsets, np.array([cut.primary_offset / scale])]
    if float(np.linalg.norm(cut.feasibility_normal)) >= 1e-14:
        rows_n.append(cut.feasibility_normal.reshape(1, -1))
        rows_b.append(np.array([cut.feasibility_offset]))
    return Polytope(normals=np.vstack(rows_n), offsets=np.concatenate(rows_b))


# --------------------------------------------------------------------------
# exact 2D area oracle
# --------------------------------------------------------------------------

_BIG = 1e6


def _clip(polygon: list[np.ndarray], normal: np.ndarray, offset: float) -> list[np.ndarray]:
    if not polygon:
        return polygon
    out: list[np.ndarray] = []
    k = len(polygon)
    vals = [float(normal @ v - offset) for v in polygon]
    for i in range(k):
        v1, v2 = polygon[i], polygon[(i + 1) % k]
        f1, f2 = vals[i], vals[(i + 1) % k]
        if f1 <= 0.0:
            out.append(v1)
            if f2 > 0.0:
                t = f1 / (f1 - f2)
                out.append(v1 + t * (v2 - v1))
        elif f2 <= 0.0:
            t = f1 / (f1 - f2)
            out.append(v1 + t * (v2 - v1))
    return out


def polygon_vertices_2d(poly: Polytope) -> list[np.ndarray]:
    """Ordered vertices of a bounded 2D polytope (empty list if empty)."""
    if poly.dim != 2:
        raise DimensionError("vertex enumeration implemented for dim 2 only")
    # Seed from the polytope's own axis-aligned rows when they bound a
    # rectangle; this keeps box-plus-cuts instances exact in floating point.
    lo = np.full(2, -_BIG)
    hi = np.full(2, _BIG)
    general: list[int] = []
    for idx, (n, b) in enumerate(zip(poly.normals, poly.offsets)):
        nz = np.nonzero(n)[0]
        if nz.size == 1:
            j = nz[0]
            bound = b / n[j]
            if n[j] > 0:
                hi[j] = min(hi[j], bound)
            else:
                lo[j] = max(lo[j], bound)
        elif nz.size == 0:
            if b < 0:
                return []
        else:
            general.append(idx)
    if np.any(lo >= hi):
        return []
    polygon = [
        np.array([lo[0], lo[1]]),
        np.array([hi[0], lo[1]]),
        np.array([hi[0], hi[1]]),
        np.array([lo[0], hi[1]]),
    ]
    for idx in general:
        polygon = _clip(polygon, poly.normals[idx], float(poly.offsets[idx]))
        if not polygon:
            return []
    for v in polygon:
        if np.any(np.abs(v) >= 0.5 * _BIG):
            raise UnboundedPolytope("2D polytope is not bounded")
    return polygon


def polygon_area_2d(poly: Polytope) -> float:
    """Exact area by half-space clipping and the shoelace formula."""
    vertices = polygon_vertices_2d(poly)
    if len(vertices) < 3:
        return 0.0
    area = 0.0
    k = len(vertices)
    for i in range(k):
        x1, y1 = vertices[i]
        x2, y2 = vertices[(i + 1) % k]
        area += x1 * y2 - x2 * y1
    return abs(area) / 2.0


# --------------------------------------------------------------------------
# maximum-volume inscribed ellipsoid
# --------------------------------------------------------------------------


def _sym_basis(r: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lower-triangular index pairs (p, q) and the off-diagonal mask."""
    P, Q = [], []
    for p in range(r):
        for q in range(p + 1):
            P.append(p)
            Q.append(q)
    P = np.asarray(P)
    Q = np.asarray(Q)
    w2 = (P != Q).astype(float)
    return P, Q, w2


def _h_from_z(z_h: np.ndarray, P: np.ndarray, Q: np.ndarray, r: int) -> np.ndarray:
    H = np.zeros((r, r))
    H[P, Q] = z_h
    H[Q, P] = z_h
    return H


def _chol_or_none(H: np.ndarray) -> np.ndarray | None:
    try:
        return np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        return None


def _strictly_feasible_start(normals: np.ndarray, offsets: np.ndarray) -> tuple[np.ndarray, float]:
    """Chebyshev center of the (row-normalized) polytope via an LP."""
    k, r = normals.shape
    cap = 10.0 * _BIG
    A_ub = np.hstack([normals, np.ones((k, 1))])
    c = np.zeros(r + 1)
    c[-1] = -1.0
    bounds = [(None, None)] * r + [(None, cap)]
    res = linprog(c, A_ub=A_ub, b_ub=offsets, bounds=bounds, method="highs")
    if not res.success:
        raise InfeasiblePolytope(f"feasibility LP failed: {res.message}")
    radius = float(res.x[-1])
    if radius >= 0.99 * cap:
        raise UnboundedPolytope("polytope admits arbitrarily large inscribed balls")
    if radius <= 1e-12:
        raise InfeasiblePolytope("polytope has (numerically) empty interior")
    return res.x[:r].copy(), radius


class _MveNewton:
    """Damped Newton minimization of -t*logdet(H) - sum log s_j."""

    def __init__(self, normals: np.ndarray, offsets: np.ndarray):
        self.A = normals
        self.b = offsets
        self.k, self.r = normals.shape
        self.P, self.Q, self.w2 = _sym_basis(self.r)
        self.dim_h = self.P.size
        # G[j, i, :] = S_i a_j for every symmetric basis matrix S_i
        G = np.zeros((self.k, self.dim_h, self.r))
        idx = np.arange(self.dim_h)
        G[:, idx, self.P] += self.A[:, self.Q]
        G[:, idx, self.Q] += self.w2 * self.A[:, self.P]
        self.G = G
        # precomputed index grids for the weighted sum_j c_j G_j G_j^T
        P, Q, w2 = self.P, self.Q, self.w2
        self._eq_pp = (P[:, None] == P[None, :]).astype(float)
        self._eq_pq = (P[:, None] == Q[None, :]).astype(float) * w2[None, :]
        self._eq_qp = (Q[:, None] == P[None, :]).astype(float) * w2[:, None]
        self._eq_qq = (Q[:, None] == Q[None, :]).astype(float) * (w2[:, None] * w2[None, :])

    def _weighted_gram(self, c: np.ndarray) -> np.ndarray:
        """sum_j c_j (S_i a_j) . (S_l a_j) assembled from M = A^T diag(c) A."""
        M = self.A.T @ (c[:, None] * self.A)
        P, Q = self.P, self.Q
        out = self._eq_pp * M[np.ix_(Q, Q)]
        out += self._eq_pq * M[np.ix_(Q, P)]
        out += self._eq_qp * M[np.ix_(P, Q)]
        out += self._eq_qq * M[np.ix_(P, P)]
        return out

    def slacks(self, H: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        U = self.A @ H
        n = np.linalg.norm(U, axis=1)
        s = self.b - self.A @ d - n
        return U, n, s

    def value(self, L: np.ndarray, s: np.ndarray, t: float) -> float:
        logdet = 2.0 * np.log(np.diag(L)).sum()
        return -t * logdet - np.log(s).sum()

    def grad_hess(self, H: np.ndarray, d: np.ndarray, t: float):
        L = np.linalg.cholesky(H)
        A_inv = np.linalg.inv(H)
        U, n, s = self.slacks(H, d)
        uhat = U / n[:, None]
        inv_s = 1.0 / s
        inv_s2 = inv_s**2

        V = np.einsum("jir,jr->ji", self.G, uhat)  # d n_j / d z_H

        g_logdet = A_inv[self.P, self.Q] * (1.0 + self.w2)
        g_h = -t * g_logdet + inv_s @ V
        g_d = self.A.T @ inv_s
        grad = np.concatenate([g_h, g_d])

        # K[i, l] = tr(A_inv S_i A_inv S_l) over the symmetric basis
        P, Q, w2 = self.P, self.Q, self.w2
        M_pq = A_inv[np.ix_(P, Q)]
        E1 = M_pq * M_pq.T
        E2 = A_inv[np.ix_(P, P)] * A_inv[np.ix_(Q, Q)]
        K = E1 * (1.0 + np.outer(w2, w2)) + E2 * (w2[:, None] + w2[None, :])

        c_p = inv_s / n
        hh = t * K
        hh += self._weighted_gram(c_p)
        hh += np.einsum("j,ji,jl->il", inv_s2 - c_p, V, V)
        hd = np.einsum("j,ji,jc->ic", inv_s2, V, self.A)
        dd = np.einsum("j,ji,jc->ic", inv_s2, self.A, self.A)

        hess = np.block([[hh, hd], [hd.T, dd]])
        return grad, hess, L, s

    def _try_point(self, z_h, d, delta, alpha):
        z_try = z_h + alpha * delta[: self.dim_h]
        d_try = d + alpha * delta[self.dim_h :]
        H_try = _h_from_z(z_try, self.P, self.Q, self.r)
        L_try = _chol_or_none(H_try)
        if L_try is None:
            return None
        _, _, s_try = self.slacks(H_try, d_try)
        if not np.all(s_try > 0):
            return None
        return z_try, d_try, L_try, s_try

    def solve(
        self,
        H0: np.ndarray,
        d0: np.ndarray,
        gap_tol: float,
        mu: float = 30.0,
        max_newton: int = 2000,
    ) -> tuple[np.ndarray, np.ndarray]:
        z_h = H0[self.P, self.Q].copy()
        d = d0.copy()
        t = 1.0
        steps = 0
        while True:
            ties = 0
            for _ in range(200):
                H = _h_from_z(z_h, self.P, self.Q, self.r)
                grad, hess, L, s = self.grad_hess(H, d, t)
                try:
                    delta = np.linalg.solve(hess, -grad)
                except np.linalg.LinAlgError:
                    reg = 1e-10 * (1.0 + abs(np.trace(hess)) / hess.shape[0])
                    delta = np.linalg.solve(hess + reg * np.eye(hess.shape[0]), -grad)
                decrement = float(-grad @ delta)
                if not np.isfinite(decrement) or decrement <= 0:
                    break
                f0 = self.value(L, s, t)
                # damped Newton: backtrack on the barrier value, guarding
                # positive definiteness and slack positivity
                accepted = None
                alpha = 1.0
                for _ in range(60):
                    cand = self._try_point(z_h, d, delta, alpha)
                    if cand is not None:
                        f_try = self.value(cand[2], cand[3], t)
                        if f_try <= f0 - 0.25 * alpha * decrement:
                            accepted = cand
                            break
                    alpha *= 0.5
                if accepted is None and ties < 5:
                    # objective differences below float resolution near the
                    # stage center: accept a feasible full/short step as a tie
                    tie_tol = 8.0 * np.finfo(float).eps * (1.0 + abs(f0))
                    alpha = 1.0
                    for _ in range(30):
                        cand = self._try_point(z_h, d, delta, alpha)
                        if cand is not None and self.value(cand[2], cand[3], t) <= f0 + tie_tol:
                            accepted = cand
                            ties += 1
                            break
                        alpha *= 0.5
                if accepted is None:
                    break
                step_rel = max(
                    float(np.max(np.abs(accepted[0] - z_h))) / (1.0 + float(np.max(np.abs(z_h)))),
                    float(np.max(np.abs(accepted[1] - d))) / (1.0 + float(np.max(np.abs(d)))),
                )
                z_h, d = accepted[0], accepted[1]
                steps += 1
                if steps > max_newton:
                    raise InfeasiblePolytope("ellipsoid solver failed to converge")
                if float(np.max(np.abs(z_h))) > 1e9:
                    raise UnboundedPolytope("inscribed ellipsoid grows without bound")
                if step_rel <= 1e-12:
                    break
            if self.k / t < gap_tol:
                break
            t *= mu
        return _h_from_z(z_h, self.P, self.Q, self.r), d


def mve(poly: Polytope, gap_tol: float = 1e-11, warm: Ellipsoid | None = None) -> Ellipsoid:
    """Maximum-volume inscribed ellipsoid of a bounded polytope.

    Raises InfeasiblePolytope when the interior is empty and
    UnboundedPolytope when the polytope is unbounded.  ``warm`` (for
    incremental cut updates) is shrunk onto the new feasible set and used
    as the Newton starting point when valid.
    """
    norms = np.linalg.norm(poly.normals, axis=1)
    keep = norms > 1e-14
    if np.any(~keep & (poly.offsets < 0)):
        raise InfeasiblePolytope("row with zero normal and negative offset")
    A = poly.normals[keep] / norms[keep, None]
    b = poly.offsets[keep] / norms[keep]
    if A.shape[0] == 0 or A.shape[0] < A.shape[1] + 1:
        raise UnboundedPolytope("too few half-spaces to bound a polytope")

    solver = _MveNewton(A, b)
    H0 = d0 = None
    if warm is not None:
        d_w = warm.center
        margins = b - A @ d_w
        scale = 1.0 + np.abs(b)
        if np.all(margins > 1e-6 * scale):
            # shrink the previous ellipsoid until it fits strictly inside;
            # cornered starts (tiny margins) converge poorly, so they fall
            # back to a fresh start instead
            radii = np.linalg.norm(A @ warm.shape, axis=1)
            factor = min(1.0, 0.5 * float(np.min(margins / np.maximum(radii, 1e-300))))
            if factor > 0.05:
                H_w = warm.shape * factor
                _, _, s_w = solver.slacks(H_w, d_w)
                if np.all(s_w > 1e-12) and _chol_or_none(H_w) is not None:
                    H0, d0 = H_w.copy(), d_w.copy()
    if H0 is None:
        center, radius = _strictly_feasible_start(A, b)
        H0 = 0.5 * radius * np.eye(A.shape[1])
        d0 = center

    H, d = solver.solve(H0, d0, gap_tol=gap_tol)
    H = 0.5 * (H + H.T)
    return Ellipsoid(shape=H, center=d)


def mve_containment_residual(poly: Polytope, ell: Ellipsoid) -> float:
    """max_j ||H n_j|| + d . n_j - c_j  (<= 0 means contained)."""
    lhs = np.linalg.norm(poly.normals @ ell.shape, axis=1) + poly.normals @ ell.center
    return float(np.max(lhs - poly.offsets))
