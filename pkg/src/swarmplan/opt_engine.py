"""Shared numerical core: convex QP, max flow, and binary ILP solvers.

The QP solver is a first-order operator-splitting (ADMM) method in the style
of OSQP: Ruiz equilibration, a cached factorization of the reduced KKT
system with adaptive penalty updates, and a direct polish solve on the
detected active set so that returned solutions meet tight KKT tolerances.
A vectorized variant solves many small inequality-only QPs of identical
shape in one pass; the separating-hyperplane stage issues thousands of
4-variable problems per refinement iteration and would otherwise be bound
by Python overhead.

Max flow is plain Edmonds-Karp on unit-capacity networks.  The ILP solver
is branch and bound over the LP relaxation with most-fractional branching.
The LP relaxations are solved with scipy's HiGHS interface rather than the
ADMM loop: branching needs vertex solutions and certified bounds, and a
first-order method on a degenerate flow polytope provides neither.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.optimize import linprog


class SolverError(Exception):
    """Base class for solver failures."""


class QPInfeasibleError(SolverError):
    """The QP constraints admit no solution."""


class QPUnboundedError(SolverError):
    """The QP objective is unbounded below on the feasible set."""


class QPMaxIterationsError(SolverError):
    """ADMM hit the iteration cap before reaching tolerance."""

    def __init__(self, message, primal_residual, dual_residual):
        super().__init__(message)
        self.primal_residual = primal_residual
        self.dual_residual = dual_residual


class ILPInfeasibleError(SolverError):
    """No binary assignment satisfies the constraints."""


class ILPBudgetExceededError(SolverError):
    """Branch and bound exceeded its node budget."""


# ---------------------------------------------------------------------------
# problem containers
# ---------------------------------------------------------------------------


def _as_matrix(a, n, name):
    if a is None:
        return np.zeros((0, n))
    if sp.issparse(a):
        a = a.tocsr()
        if a.shape[1] != n:
            raise ValueError(f"{name} has {a.shape[1]} columns, expected {n}")
        return a
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.size == 0:
        return np.zeros((0, n))
    if a.shape[1] != n:
        raise ValueError(f"{name} has {a.shape[1]} columns, expected {n}")
    return a


def _as_vector(b, m, name):
    if b is None:
        b = np.zeros(0)
    b = np.atleast_1d(np.asarray(b, dtype=float)).ravel()
    if b.shape[0] != m:
        raise ValueError(f"{name} has length {b.shape[0]}, expected {m}")
    return b


@dataclass
class QuadraticProgram:
    """min 0.5 x'Hx + g'x  s.t.  A_eq x = b_eq,  A_in x <= b_in.

    H must be symmetric positive semidefinite (within 1e-8 relative).
    """

    H: np.ndarray
    g: np.ndarray
    A_eq: object = None
    b_eq: object = None
    A_in: object = None
    b_in: object = None

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=float)
        if self.H.ndim != 2 or self.H.shape[0] != self.H.shape[1]:
            raise ValueError("H must be square")
        n = self.H.shape[0]
        self.g = _as_vector(self.g, n, "g")
        self.A_eq = _as_matrix(self.A_eq, n, "A_eq")
        self.b_eq = _as_vector(self.b_eq, self.A_eq.shape[0], "b_eq")
        self.A_in = _as_matrix(self.A_in, n, "A_in")
        self.b_in = _as_vector(self.b_in, self.A_in.shape[0], "b_in")

    @property
    def n(self):
        return self.H.shape[0]

    def check_psd(self):
        """Raise if H is not symmetric PSD within 1e-8 relative tolerance."""
        h_norm = np.abs(self.H).max() if self.H.size else 0.0
        if h_norm and np.abs(self.H - self.H.T).max() > 1e-8 * h_norm:
            raise ValueError("H is not symmetric")
        shift = 1e-8 * max(h_norm, 1.0)
        try:
            np.linalg.cholesky(self.H + shift * np.eye(self.n))
        except np.linalg.LinAlgError:
            raise ValueError("H is not positive semidefinite") from None

    def objective(self, x):
        return 0.5 * float(x @ (self.H @ x)) + float(self.g @ x)


@dataclass
class QPResult:
    x: np.ndarray
    objective: float
    iterations: int
    primal_residual: float
    dual_residual: float
    duals: np.ndarray  # stacked [eq; in] multipliers
    polished: bool


@dataclass
class BinaryILP:
    """max c'z  s.t.  A_eq z = b_eq,  A_in z <= b_in,  z binary."""

    c: np.ndarray
    A_eq: object = None
    b_eq: object = None
    A_in: object = None
    b_in: object = None

    def __post_init__(self):
        self.c = np.atleast_1d(np.asarray(self.c, dtype=float)).ravel()
        n = self.c.shape[0]
        self.A_eq = _as_matrix(self.A_eq, n, "A_eq")
        self.b_eq = _as_vector(self.b_eq, self.A_eq.shape[0], "b_eq")
        self.A_in = _as_matrix(self.A_in, n, "A_in")
        self.b_in = _as_vector(self.b_in, self.A_in.shape[0], "b_in")

    @property
    def n(self):
        return self.c.shape[0]

    def feasible(self, z, tol=1e-6):
        z = np.asarray(z, dtype=float)
        if self.A_eq.shape[0] and np.abs(self.A_eq @ z - self.b_eq).max() > tol:
            return False
        if self.A_in.shape[0] and (self.A_in @ z - self.b_in).max() > tol:
            return False
        return True


@dataclass
class ILPResult:
    z: np.ndarray
    objective: float
    nodes: int
    gap: float


@dataclass
class FlowNetwork:
    """Directed unit-capacity network."""

    num_vertices: int
    edges: list  # list of (tail, head)
    source: int
    sink: int

    def __post_init__(self):
        for t, h in self.edges:
            if t == h:
                raise ValueError("self loops are not allowed")
            if not (0 <= t < self.num_vertices and 0 <= h < self.num_vertices):
                raise ValueError("edge endpoint out of range")
        if self.source == self.sink:
            raise ValueError("source and sink must differ")


# ---------------------------------------------------------------------------
# Ruiz equilibration
# ---------------------------------------------------------------------------


def _ruiz_equilibrate(H, g, A, iters=10):
    """Scale variables/constraints so the stacked KKT matrix has rows and
    columns of roughly unit infinity norm.  Returns (Hs, gs, As, d, e, c)
    with x = d * x_scaled, y = e * y_scaled / c."""
    n = H.shape[0]
    m = A.shape[0]
    d = np.ones(n)
    e = np.ones(m)
    c = 1.0
    Hs = H.copy()
    gs = g.copy()
    As = A.copy() if not sp.issparse(A) else A.copy().tocsr()
    for _ in range(iters):
        if sp.issparse(As):
            col_a = np.asarray(abs(As).max(axis=0).todense()).ravel() if m else np.zeros(n)
            row_a = np.asarray(abs(As).max(axis=1).todense()).ravel() if m else np.zeros(0)
        else:
            col_a = np.abs(As).max(axis=0) if m else np.zeros(n)
            row_a = np.abs(As).max(axis=1) if m else np.zeros(0)
        col_h = np.abs(Hs).max(axis=0) if n else np.zeros(0)
        dn = np.sqrt(np.maximum(col_h, col_a))
        dn[dn < 1e-12] = 1.0
        dd = 1.0 / np.sqrt(dn)
        en = np.sqrt(row_a)
        en[en < 1e-12] = 1.0
        ee = 1.0 / np.sqrt(en)
        Hs = Hs * dd[:, None] * dd[None, :]
        gs = gs * dd
        if m:
            if sp.issparse(As):
                As = sp.diags(ee) @ As @ sp.diags(dd)
            else:
                As = As * ee[:, None] * dd[None, :]
        d *= dd
        e *= ee
        # cost scaling keeps the quadratic and linear parts comparable
        h_cols = np.abs(Hs).max(axis=0) if n else np.zeros(1)
        denom = max(np.mean(h_cols), np.abs(gs).max() if gs.size else 0.0)
        if denom > 1e-12:
            gamma = 1.0 / denom
            gamma = min(max(gamma, 1e-6), 1e6)
            Hs = Hs * gamma
            gs = gs * gamma
            c *= gamma
    return Hs, gs, As, d, e, c


# ---------------------------------------------------------------------------
# ADMM QP solver
# ---------------------------------------------------------------------------

_RHO_MIN = 1e-6
_RHO_MAX = 1e6
_EQ_RHO_FACTOR = 1e3


def _admm_factor(Hs, As, sigma, rho):
    n = Hs.shape[0]
    if As.shape[0]:
        if sp.issparse(As):
            AtRA = (As.multiply(rho[:, None])).T @ As
            AtRA = np.asarray(AtRA.todense())
        else:
            AtRA = As.T @ (As * rho[:, None])
    else:
        AtRA = np.zeros((n, n))
    M = Hs + sigma * np.eye(n) + AtRA
    return scipy.linalg.cho_factor(M, check_finite=False)


def _kkt_residuals(H, g, A, l, u, x, y, z):
    """Unscaled primal/dual residuals for the l <= Ax <= u formulation."""
    ax = A @ x if A.shape[0] else np.zeros(0)
    r_prim = np.abs(ax - z).max() if z.size else 0.0
    dual_vec = H @ x + g
    if A.shape[0]:
        dual_vec = dual_vec + A.T @ y
    r_dual = np.abs(dual_vec).max() if dual_vec.size else 0.0
    return r_prim, r_dual, ax


def solve_qp(qp, x0=None, eps_abs=1e-6, eps_rel=1e-6, max_iter=20000):
    """Solve a convex QP to the requested KKT tolerance.

    Returns a QPResult.  Raises QPInfeasibleError / QPUnboundedError when a
    certificate is found, QPMaxIterationsError when the iteration budget is
    exhausted without convergence.
    """
    qp.check_psd()
    n = qp.n
    m_eq = qp.A_eq.shape[0]
    m_in = qp.A_in.shape[0]
    m = m_eq + m_in

    if m == 0:
        # unconstrained: solve the regularized normal equations
        try:
            x = np.linalg.lstsq(qp.H, -qp.g, rcond=None)[0]
        except np.linalg.LinAlgError:
            raise QPUnboundedError("unconstrained QP with singular H") from None
        resid = qp.H @ x + qp.g
        if np.abs(resid).max() > 1e-8 * max(1.0, np.abs(qp.g).max()):
            raise QPUnboundedError("objective unbounded below (g not in range of H)")
        return QPResult(x, qp.objective(x), 0, 0.0, 0.0, np.zeros(0), False)

    if sp.issparse(qp.A_eq) or sp.issparse(qp.A_in):
        A = sp.vstack([sp.csr_matrix(qp.A_eq), sp.csr_matrix(qp.A_in)]).tocsr()
    else:
        A = np.vstack([qp.A_eq, qp.A_in])
    l = np.concatenate([qp.b_eq, np.full(m_in, -np.inf)])
    u = np.concatenate([qp.b_eq, qp.b_in])
    is_eq = np.zeros(m, dtype=bool)
    is_eq[:m_eq] = True

    Hs, gs, As, d_scale, e_scale, c_scale = _ruiz_equilibrate(qp.H, qp.g, A)
    ls = l * e_scale
    us = u * e_scale

    sigma = 1e-6
    alpha = 1.6
    rho_base = 0.1
    rho = np.full(m, rho_base)
    rho[is_eq] *= _EQ_RHO_FACTOR
    factor = _admm_factor(Hs, As, sigma, rho)

    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float) / d_scale
    z = As @ x if m else np.zeros(0)
    z = np.clip(z, ls, us)
    y = np.zeros(m)

    eps_pinf = 1e-7
    eps_dinf = 1e-7
    check_every = 25
    x_prev_u = d_scale * x
    y_prev_u = e_scale * y / c_scale

    def _accept(cand):
        """KKT residuals of a candidate against the loop's stopping rule."""
        rp_c, rd_c, ax_c = _kkt_residuals(qp.H, qp.g, A, l, u, *cand)
        hx_c = qp.H @ cand[0]
        aty_c = A.T @ cand[1] if m else np.zeros(n)
        ep_c = eps_abs + eps_rel * max(
            np.abs(ax_c).max() if ax_c.size else 0.0,
            np.abs(cand[2]).max() if cand[2].size else 0.0,
        )
        ed_c = eps_abs + eps_rel * max(
            np.abs(hx_c).max() if hx_c.size else 0.0,
            np.abs(aty_c).max() if aty_c.size else 0.0,
            np.abs(qp.g).max() if qp.g.size else 0.0,
        )
        return (rp_c <= ep_c and rd_c <= ed_c), rp_c, rd_c

    def _finish(x_cur, y_cur, z_cur):
        """Direct finishers: cheap active-set pass, then barrier fallback."""
        cand = _polish(qp, A, l, u, is_eq, x_cur, y_cur, z_cur)
        if cand is not None:
            ok, rp_c, rd_c = _accept(cand)
            if ok:
                return (*cand, rp_c, rd_c)
        nonlocal ipm_tried
        if not ipm_tried:
            ipm_tried = True
            cand = _ipm_solve(qp, A, l, u, is_eq)
            if cand is not None:
                ok, rp_c, rd_c = _accept(cand)
                if ok:
                    return (*cand, rp_c, rd_c)
        return None

    it = 0
    status = "max_iter"
    r_prim = r_dual = np.inf
    next_polish = 250
    polish_state = None
    ipm_tried = False
    for it in range(1, max_iter + 1):
        rhs = sigma * x - gs + (As.T @ (rho * z - y) if m else 0.0)
        x_t = scipy.linalg.cho_solve(factor, rhs, check_finite=False)
        z_t = As @ x_t if m else np.zeros(0)
        x = alpha * x_t + (1 - alpha) * x
        w = alpha * z_t + (1 - alpha) * z
        z = np.clip(w + y / rho, ls, us)
        y = y + rho * (w - z)

        if it % check_every != 0 and it != max_iter:
            continue

        x_u = d_scale * x
        y_u = e_scale * y / c_scale
        z_u = z / e_scale
        r_prim, r_dual, ax_u = _kkt_residuals(qp.H, qp.g, A, l, u, x_u, y_u, z_u)
        norm_ax = np.abs(ax_u).max() if ax_u.size else 0.0
        norm_z = np.abs(z_u).max() if z_u.size else 0.0
        hx = qp.H @ x_u
        aty = A.T @ y_u if m else np.zeros(n)
        eps_p = eps_abs + eps_rel * max(norm_ax, norm_z)
        eps_d = eps_abs + eps_rel * max(
            np.abs(hx).max() if hx.size else 0.0,
            np.abs(aty).max() if aty.size else 0.0,
            np.abs(qp.g).max() if qp.g.size else 0.0,
        )
        if r_prim <= eps_p and r_dual <= eps_d:
            status = "solved"
            break

        # tail convergence can be sublinear; once the iterate is in the
        # right basin a direct finisher gets the rest of the way
        if it >= next_polish:
            next_polish *= 2
            fin = _finish(x_u, y_u, z_u)
            if fin is not None:
                polish_state = fin
                status = "solved"
                break

        # infeasibility certificates from one-step differences
        dy = y_u - y_prev_u
        dy_norm = np.abs(dy).max() if dy.size else 0.0
        if dy_norm > 1e-12:
            aty_d = A.T @ dy
            ineq = ~is_eq
            ok_cone = not np.any(dy[ineq] < -eps_pinf * dy_norm)
            support = float(u[is_eq] @ dy[is_eq]) + float(
                u[ineq] @ np.maximum(dy[ineq], 0.0)
            )
            if (
                ok_cone
                and np.abs(aty_d).max() <= eps_pinf * dy_norm
                and support <= -eps_pinf * dy_norm
            ):
                raise QPInfeasibleError("primal infeasibility certificate found")
        dx = d_scale * x - x_prev_u
        dx_norm = np.abs(dx).max() if dx.size else 0.0
        if dx_norm > 1e-12 and float(qp.g @ dx) <= -eps_dinf * dx_norm:
            hdx = qp.H @ dx
            adx = A @ dx if m else np.zeros(0)
            in_cone = not (
                np.any(np.abs(adx[is_eq]) > eps_dinf * dx_norm)
                or np.any(adx[~is_eq] > eps_dinf * dx_norm)
            )
            if in_cone and np.abs(hdx).max() <= eps_dinf * dx_norm:
                raise QPUnboundedError("dual infeasibility certificate found")
        x_prev_u = d_scale * x
        y_prev_u = y_u

        # adaptive penalty: rebalance primal vs dual progress
        if it % 100 == 0 and r_prim > 0 and r_dual > 0:
            num = r_prim / max(norm_ax, norm_z, 1e-12)
            den = r_dual / max(
                np.abs(hx).max(), np.abs(aty).max(), np.abs(qp.g).max(), 1e-12
            )
            ratio = math.sqrt(num / max(den, 1e-16))
            if ratio > 5.0 or ratio < 0.2:
                rho_base = min(max(rho_base * ratio, _RHO_MIN), _RHO_MAX)
                rho = np.full(m, rho_base)
                rho[is_eq] *= _EQ_RHO_FACTOR
                factor = _admm_factor(Hs, As, sigma, rho)

    if polish_state is not None:
        x_u, y_u, z_u, r_prim, r_dual = polish_state
        return QPResult(x_u, qp.objective(x_u), it, r_prim, r_dual, y_u, True)

    x_u = d_scale * x
    y_u = e_scale * y / c_scale
    z_u = z / e_scale

    polished = False
    fin = _finish(x_u, y_u, z_u)
    if fin is not None:
        x_u, y_u, z_u, r_prim, r_dual = fin
        polished = True
        status = "solved"

    if status != "solved":
        raise QPMaxIterationsError(
            f"ADMM did not converge in {max_iter} iterations "
            f"(primal {r_prim:.2e}, dual {r_dual:.2e})",
            r_prim,
            r_dual,
        )
    return QPResult(x_u, qp.objective(x_u), it, r_prim, r_dual, y_u, polished)


def _polish(qp, A, l, u, is_eq, x, y, z):
    """Active-set finisher seeded from an ADMM iterate.

    Solves the KKT system with the working set pinned as equalities,
    drops rows whose multipliers come out negative, and admits the few
    most-violated rows, until the set is consistent.  Adding rows in
    small batches keeps the working set near the true active set (which
    is tiny for these problems); flooding it with every violated row
    makes the KKT system degenerate and the multipliers meaningless.
    The regularizer is anchored at the ADMM iterate rather than the
    origin so that directions the objective barely penalizes stay where
    the iterate put them instead of drifting out of the feasible set.
    Returns (x, y, z) or None; the caller re-verifies the KKT residuals
    before trusting the result.
    """
    m = A.shape[0]
    n = qp.n
    if m == 0:
        return None
    A_dense = A.toarray() if sp.issparse(A) else np.asarray(A)
    delta = 1e-7 * max(1.0, float(np.abs(qp.H).max()))
    feas_tol = 1e-8 * np.maximum(1.0, np.abs(u))
    cap = max(n - int(is_eq.sum()), 8)
    batch = 8
    anchor = x

    ax = A_dense @ x
    y_scale = np.abs(y).max() if y.size else 0.0
    work = (~is_eq) & (
        (y > 1e-6 * y_scale) | (u - ax <= 1e-7 * np.maximum(1.0, np.abs(u)))
    )
    seen = set()
    for _ in range(12):
        key = work.tobytes()
        if key in seen or int(work.sum()) > cap:
            return None
        seen.add(key)
        idx = np.flatnonzero(is_eq | work)
        A_act = A_dense[idx]
        k = idx.size
        kkt = np.block(
            [
                [qp.H + delta * np.eye(n), A_act.T],
                [A_act, -delta * np.eye(k)],
            ]
        )
        rhs = np.concatenate([-qp.g + delta * anchor, u[idx]])
        try:
            lu_piv = scipy.linalg.lu_factor(kkt, check_finite=False)
        except (np.linalg.LinAlgError, ValueError):
            return None
        sol = scipy.linalg.lu_solve(lu_piv, rhs, check_finite=False)
        # the -delta block lets pinned rows slip by O(delta*|y|), so refine
        # against the unregularized system with the regularized LU as the
        # preconditioner; best-iterate tracking bounds the damage when the
        # working set is dependent and the refinement stalls
        kkt0 = np.block([[qp.H, A_act.T], [A_act, np.zeros((k, k))]])
        rhs0 = np.concatenate([-qp.g, u[idx]])
        rhs_scale = max(1.0, float(np.abs(rhs0).max()))
        best_res, best_sol = np.inf, sol
        for _ in range(30):
            res = rhs0 - kkt0 @ sol
            r_now = float(np.abs(res).max())
            if r_now < best_res:
                best_res, best_sol = r_now, sol
            if r_now <= 1e-13 * rhs_scale:
                break
            sol = sol + scipy.linalg.lu_solve(lu_piv, res, check_finite=False)
        sol = best_sol
        x_p = sol[:n]
        y_p = np.zeros(m)
        y_p[idx] = sol[n:]
        ax = A_dense @ x_p
        viol = ax - u
        neg = (~is_eq) & work & (y_p < -1e-9)
        newly = (~is_eq) & ~work & (viol > feas_tol)
        if not neg.any() and not newly.any():
            return x_p, y_p, np.clip(ax, l, u)
        work = work & ~neg
        n_new = int(newly.sum())
        if n_new > batch:
            order = np.argsort(np.where(newly, viol, -np.inf))[::-1][:batch]
            newly = np.zeros(m, dtype=bool)
            newly[order] = True
        work |= newly
    return None


def _ipm_solve(qp, A, l, u, is_eq, max_iter=50):
    """Dense predictor-corrector interior-point fallback.

    The smoothness objectives weight several derivative orders whose
    magnitudes differ by many decades, so the Hessian restricted to the
    equality manifold can carry near-zero eigenvalues.  Active-set
    identification is unreliable on such flat faces, but a barrier
    method is indifferent to them: it converges to a well-centered
    point of the optimal face without ever naming the active rows.
    Returns (x, y, z) in the same convention as the ADMM loop, or None.
    """
    n = qp.n
    m = A.shape[0]
    m_eq = int(is_eq.sum())
    m_in = m - m_eq
    if m_in == 0:
        return None
    Aeq = qp.A_eq.toarray() if sp.issparse(qp.A_eq) else np.asarray(qp.A_eq)
    Aeq = Aeq.reshape(m_eq, n)
    Ain = sp.csr_matrix(qp.A_in)
    AinT = Ain.T.tocsr()
    b_eq = np.asarray(qp.b_eq, dtype=float).reshape(m_eq)
    b_in = np.asarray(qp.b_in, dtype=float).reshape(m_in)

    x = np.linalg.lstsq(Aeq, b_eq, rcond=None)[0] if m_eq else np.zeros(n)
    s_raw = b_in - Ain @ x
    s = s_raw + max(0.0, -1.5 * float(s_raw.min())) + 1.0
    zi = np.ones(m_in)
    ye = np.zeros(m_eq)

    scale = max(
        1.0,
        np.abs(qp.g).max() if qp.g.size else 0.0,
        np.abs(b_eq).max() if m_eq else 0.0,
        np.abs(b_in).max(),
    )
    delta = 1e-11
    best = None
    best_res = np.inf
    stall = 0
    for _ in range(max_iter):
        r_d = qp.H @ x + qp.g + (Aeq.T @ ye if m_eq else 0.0) + AinT @ zi
        r_eq = Aeq @ x - b_eq if m_eq else np.zeros(0)
        r_in = Ain @ x + s - b_in
        mu = float(s @ zi) / m_in
        res = max(
            np.abs(r_d).max(),
            np.abs(r_eq).max() if m_eq else 0.0,
            np.abs(r_in).max(),
            mu,
        )
        if res < best_res:
            best_res = res
            best = (x.copy(), ye.copy(), zi.copy())
            stall = 0
        else:
            stall += 1
        if res <= 1e-9 * scale or stall >= 5:
            break

        w = zi / s
        M = qp.H + (AinT.multiply(w) @ Ain).toarray()
        kkt = np.block([[M, Aeq.T], [Aeq, -delta * np.eye(m_eq)]])
        try:
            lu_piv = scipy.linalg.lu_factor(kkt, check_finite=False)
        except (np.linalg.LinAlgError, ValueError):
            break

        def newton(r_cs):
            rhs_x = -r_d - AinT @ ((zi * r_in - r_cs) / s)
            rhs = np.concatenate([rhs_x, -r_eq])
            sol = scipy.linalg.lu_solve(lu_piv, rhs, check_finite=False)
            # refine against the unregularized operator so the equality
            # residual is not floored at delta * |y|
            for _ in range(2):
                res_x = rhs_x - (M @ sol[:n] + (Aeq.T @ sol[n:] if m_eq else 0.0))
                res_y = -r_eq - (Aeq @ sol[:n]) if m_eq else np.zeros(0)
                corr = scipy.linalg.lu_solve(
                    lu_piv, np.concatenate([res_x, res_y]), check_finite=False
                )
                sol = sol + corr
            dx = sol[:n]
            dy = sol[n:]
            ds = -r_in - Ain @ dx
            dz = -(r_cs + zi * ds) / s
            return dx, dy, ds, dz

        def max_step(v, dv):
            negm = dv < 0
            if not negm.any():
                return 1.0
            return min(1.0, float((-v[negm] / dv[negm]).min()))

        dx, dy, ds, dz = newton(s * zi)
        ap = max_step(s, ds)
        ad = max_step(zi, dz)
        mu_aff = float((s + ap * ds) @ (zi + ad * dz)) / m_in
        sigma = min(1.0, (mu_aff / max(mu, 1e-300)) ** 3)
        dx, dy, ds, dz = newton(s * zi + ds * dz - sigma * mu)
        ap = 0.995 * max_step(s, ds)
        ad = 0.995 * max_step(zi, dz)
        x += ap * dx
        s += ap * ds
        ye += ad * dy
        zi += ad * dz

    if best is None:
        return None
    x, ye, zi = best
    y_full = np.concatenate([ye, zi])
    return x, y_full, np.clip(A @ x, l, u)


# ---------------------------------------------------------------------------
# batched small-QP solver (inequality-only, identical shapes)
# ---------------------------------------------------------------------------


def solve_qp_batch(H, g, A, b, eps_abs=1e-6, eps_rel=1e-6, max_iter=20000):
    """Solve T small QPs  min 0.5 x'Hx + g'x  s.t.  A[t] x <= b[t]  at once.

    H and g are shared across the batch; A has shape (T, m, n) and b has
    shape (T, m).  Returns (x, objective, status) where status[t] is one of
    "solved", "infeasible", "max_iter".  Each solved instance is polished
    individually so active constraints hold to direct-solve accuracy.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    T, m, n = A.shape
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)

    # normalize rows so a shared penalty works across the batch
    row_norm = np.maximum(np.abs(A).max(axis=2), 1e-12)
    An = A / row_norm[:, :, None]
    bn = b / row_norm

    sigma = 1e-6
    alpha = 1.6

    def factor(An_w, rho_vec):
        M = H[None, :, :] + sigma * np.eye(n)[None, :, :] + rho_vec[
            :, None, None
        ] * np.einsum("tmi,tmj->tij", An_w, An_w)
        return np.linalg.inv(M)

    # full-size outputs; the working arrays below shrink as instances finish
    x_full = np.zeros((T, n))
    y_full = np.zeros((T, m))
    status = np.full(T, "max_iter", dtype=object)

    live = np.arange(T)
    An_w = An
    bn_w = bn
    rho = np.full(T, 0.1)
    Minv = factor(An_w, rho)
    x = np.zeros((T, n))
    z = np.minimum(np.einsum("tmn,tn->tm", An_w, x), bn_w)
    y = np.zeros((T, m))
    y_prev = y.copy()

    eps_pinf = 1e-7
    check_every = 25
    next_polish = 500
    for it in range(1, max_iter + 1):
        rhs = sigma * x - g[None, :] + np.einsum(
            "tmn,tm->tn", An_w, rho[:, None] * z - y
        )
        x_t = np.einsum("tij,tj->ti", Minv, rhs)
        z_t = np.einsum("tmn,tn->tm", An_w, x_t)
        x = alpha * x_t + (1 - alpha) * x
        w = alpha * z_t + (1 - alpha) * z
        z = np.minimum(w + y / rho[:, None], bn_w)
        y = y + rho[:, None] * (w - z)

        if it % check_every != 0 and it != max_iter:
            continue

        ax = np.einsum("tmn,tn->tm", An_w, x)
        r_prim = np.abs(ax - z).max(axis=1) if m else np.zeros(live.size)
        dual_vec = x @ H.T + g[None, :] + np.einsum("tmn,tm->tn", An_w, y)
        r_dual = np.abs(dual_vec).max(axis=1)
        eps_p = eps_abs + eps_rel * np.maximum(
            np.abs(ax).max(axis=1), np.abs(z).max(axis=1)
        )
        eps_d = eps_abs + eps_rel * np.maximum(
            np.abs(x @ H.T).max(axis=1),
            np.maximum(
                np.abs(np.einsum("tmn,tm->tn", An_w, y)).max(axis=1),
                np.abs(g).max() if g.size else 0.0,
            ),
        )
        done = (r_prim <= eps_p) & (r_dual <= eps_d)
        status[live[done]] = "solved"

        dy = y - y_prev
        dy_norm = np.abs(dy).max(axis=1)
        with np.errstate(invalid="ignore"):
            aty = np.abs(np.einsum("tmn,tm->tn", An_w, dy)).max(axis=1)
            support = np.sum(bn_w * np.maximum(dy, 0.0), axis=1)
            cone_ok = (
                dy >= -eps_pinf * np.maximum(dy_norm, 1e-300)[:, None]
            ).all(axis=1)
            infeas = (
                ~done
                & (dy_norm > 1e-12)
                & cone_ok
                & (aty <= eps_pinf * dy_norm)
                & (support <= -eps_pinf * dy_norm)
            )
        status[live[infeas]] = "infeasible"
        done = done | infeas
        y_prev = y.copy()

        # finish lingering instances directly rather than iterating them out
        if it >= next_polish and not done.all():
            next_polish *= 2
            for k in np.flatnonzero(~done):
                res = _polish_small(H, g, An_w[k], bn_w[k], x[k], y[k])
                if res is not None:
                    x[k] = res
                    status[live[k]] = "solved"
                    done[k] = True

        if it % 200 == 0:
            scale_p = np.maximum(np.abs(ax).max(axis=1), np.abs(z).max(axis=1))
            scale_d = np.maximum(np.abs(x @ H.T).max(axis=1), 1e-12)
            ratio = np.sqrt(
                (r_prim / np.maximum(scale_p, 1e-12))
                / np.maximum(r_dual / scale_d, 1e-16)
            )
            ratio = np.clip(ratio, 1.0 / 100.0, 100.0)
            upd = ~done & ((ratio > 5.0) | (ratio < 0.2))
            if upd.any():
                rho = np.where(upd, np.clip(rho * ratio, _RHO_MIN, _RHO_MAX), rho)
                Minv = factor(An_w, rho)

        if done.any():
            x_full[live[done]] = x[done]
            y_full[live[done]] = y[done]
            keep = ~done
            if not keep.any():
                break
            live = live[keep]
            An_w = An_w[keep]
            bn_w = bn_w[keep]
            rho = rho[keep]
            Minv = Minv[keep]
            x = x[keep]
            z = z[keep]
            y = y[keep]
            y_prev = y_prev[keep]

    x_full[live] = x
    y_full[live] = y

    obj = 0.5 * np.einsum("ti,ij,tj->t", x_full, H, x_full) + x_full @ g

    # per-instance polish on entries the loop finished without one
    for t in range(T):
        if status[t] != "solved":
            continue
        res = _polish_small(H, g, An[t], bn[t], x_full[t], y_full[t])
        if res is not None:
            x_full[t] = res
            obj[t] = 0.5 * float(res @ H @ res) + float(g @ res)
    return x_full, obj, status


def _polish_small(H, g, A, b, x, y):
    n = H.shape[0]
    ax = A @ x
    active = b - ax < 1e-6 * np.maximum(1.0, np.abs(b))
    if y is not None:
        active |= y > 1e-8 * max(1.0, y.max(initial=0.0))
    for _ in range(12):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            try:
                x_p = np.linalg.solve(H, -g)
            except np.linalg.LinAlgError:
                return None
            viol = A @ x_p - b
            new = viol > 1e-8 * np.maximum(1.0, np.abs(b))
            if not new.any():
                return x_p
            active |= new
            continue
        A_act = A[idx]
        k = idx.size
        kkt = np.block(
            [[H + 1e-12 * np.eye(n), A_act.T], [A_act, -1e-12 * np.eye(k)]]
        )
        rhs = np.concatenate([-g, b[idx]])
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
        x_p = sol[:n]
        nu = sol[n:]
        if (nu < -1e-9).any():
            active[idx[nu < -1e-9]] = False
            continue
        viol = A @ x_p - b
        if (viol > 1e-8 * np.maximum(1.0, np.abs(b))).any():
            new = viol > 1e-8 * np.maximum(1.0, np.abs(b))
            if not (new & ~active).any():
                return None
            active |= new
            continue
        stat = H @ x_p + g + A_act.T @ nu
        scale = max(1.0, np.abs(g).max() if g.size else 0.0, np.abs(nu).max(initial=0.0))
        if np.abs(stat).max() <= 1e-7 * scale:
            return x_p
        return None
    return None


# ---------------------------------------------------------------------------
# Edmonds-Karp max flow
# ---------------------------------------------------------------------------


def max_flow(network):
    """Edmonds-Karp on a unit-capacity network.

    Returns (value, flows) where flows[i] is the 0/1 flow on edges[i].
    """
    nv = network.num_vertices
    adj = [[] for _ in range(nv)]
    to = []
    cap = []
    for t, h in network.edges:
        adj[t].append(len(to))
        to.append(h)
        cap.append(1)
        adj[h].append(len(to))
        to.append(t)
        cap.append(0)
    s, k = network.source, network.sink
    value = 0
    parent_edge = [-1] * nv
    while True:
        for i in range(nv):
            parent_edge[i] = -1
        parent_edge[s] = -2
        queue = deque([s])
        found = False
        while queue:
            v = queue.popleft()
            if v == k:
                found = True
                break
            for eid in adj[v]:
                w = to[eid]
                if cap[eid] > 0 and parent_edge[w] == -1:
                    parent_edge[w] = eid
                    queue.append(w)
        if not found:
            break
        v = k
        while v != s:
            eid = parent_edge[v]
            cap[eid] -= 1
            cap[eid ^ 1] += 1
            v = to[eid ^ 1]
        value += 1
    flows = [cap[2 * i + 1] for i in range(len(network.edges))]
    return value, flows


# ---------------------------------------------------------------------------
# branch and bound for binary ILPs
# ---------------------------------------------------------------------------


def _lp_relaxation(ilp, lb, ub):
    bounds = list(zip(lb, ub))
    res = linprog(
        -ilp.c,
        A_ub=ilp.A_in if ilp.A_in.shape[0] else None,
        b_ub=ilp.b_in if ilp.A_in.shape[0] else None,
        A_eq=ilp.A_eq if ilp.A_eq.shape[0] else None,
        b_eq=ilp.b_eq if ilp.A_eq.shape[0] else None,
        bounds=bounds,
        method="highs",
    )
    if res.status == 2:
        return None
    if res.status != 0:
        raise SolverError(f"LP relaxation failed with status {res.status}")
    return res.x, -res.fun


def solve_ilp(ilp, node_limit=100000, gap_tol=1e-6):
    """Branch and bound with most-fractional branching (DFS, fixed child
    order for determinism).  Returns an ILPResult with gap <= gap_tol."""
    n = ilp.n
    if n == 0:
        # a fully presolved program is feasible exactly when its constant
        # rows already hold
        z = np.zeros(0)
        if ilp.feasible(z):
            return ILPResult(z.astype(int), 0.0, 0, 0.0)
        raise ILPInfeasibleError("no feasible binary assignment")
    best_z = None
    best_obj = -np.inf
    nodes = 0
    pruned_bound = -np.inf
    # stack entries: (lb, ub); the z=1 child is pushed last so it pops first
    stack = [(np.zeros(n), np.ones(n))]
    while stack:
        if nodes >= node_limit:
            raise ILPBudgetExceededError(
                f"node limit {node_limit} reached (incumbent {best_obj})"
            )
        lb, ub = stack.pop()
        nodes += 1
        rel = _lp_relaxation(ilp, lb, ub)
        if rel is None:
            continue
        x, bound = rel
        if bound <= best_obj + gap_tol:
            pruned_bound = max(pruned_bound, bound)
            continue
        frac = np.abs(x - np.round(x))
        if frac.max() <= 1e-6:
            z = np.round(x)
            if ilp.feasible(z):
                obj = float(ilp.c @ z)
                if obj > best_obj:
                    best_obj = obj
                    best_z = z
                continue
            # integral but infeasible after rounding: branch on the largest
            # residual coordinate to split the node
            j = int(np.argmax(frac))
        else:
            # most fractional: largest distance to the nearest integer,
            # lowest index on ties
            j = int(np.argmax(np.minimum(frac, 1.0 - frac)))
        if lb[j] == ub[j]:
            # cannot branch further; treat as pruned
            continue
        lb0, ub0 = lb.copy(), ub.copy()
        ub0[j] = 0.0
        lb1, ub1 = lb.copy(), ub.copy()
        lb1[j] = 1.0
        stack.append((lb0, ub0))
        stack.append((lb1, ub1))
    if best_z is None:
        raise ILPInfeasibleError("no feasible binary assignment")
    gap = max(0.0, pruned_bound - best_obj)
    return ILPResult(best_z.astype(int), best_obj, nodes, gap)


def export_lp(ilp, path):
    """Write the ILP in CPLEX LP text format."""

    def term(coef, j, first):
        sign = "-" if coef < 0 else ("" if first else "+")
        mag = abs(coef)
        return f" {sign} {mag:.17g} z{j}" if not first else f" {sign}{mag:.17g} z{j}"

    def row(a):
        a = np.asarray(a.todense()).ravel() if sp.issparse(a) else np.asarray(a).ravel()
        parts = []
        first = True
        for j in np.flatnonzero(a):
            parts.append(term(a[j], j, first))
            first = False
        return "".join(parts) if parts else " 0 z0"

    lines = ["Maximize", f" obj:{row(ilp.c)}", "Subject To"]
    for i in range(ilp.A_in.shape[0]):
        a = ilp.A_in[i] if not sp.issparse(ilp.A_in) else ilp.A_in.getrow(i)
        lines.append(f" c{i}:{row(a)} <= {ilp.b_in[i]:.17g}")
    for i in range(ilp.A_eq.shape[0]):
        a = ilp.A_eq[i] if not sp.issparse(ilp.A_eq) else ilp.A_eq.getrow(i)
        lines.append(f" e{i}:{row(a)} = {ilp.b_eq[i]:.17g}")
    lines.append("Binaries")
    names = " ".join(f"z{j}" for j in range(ilp.n))
    lines.append(f" {names}")
    lines.append("End")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
