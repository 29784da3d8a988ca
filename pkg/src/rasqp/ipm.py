"""Dense primal-dual interior-point solver for the LPs and convex QPs
arising in robust-SQP subproblems and the KKT-residual metric.

A single Mehrotra-style predictor-corrector path handles both LPs (zero
Hessian plus a tiny diagonal regularization) and QPs, so iteration counts
are comparable across subproblem families.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from .counters import Counters
from .errors import NumericalFailure

_REG = 1e-10          # diagonal regularization (makes pure LPs nonsingular)
_DIVERGE = 1e8        # dual blow-up threshold for infeasibility detection
_FRACTION = 0.995     # fraction-to-boundary


@dataclass
class ConvexProgram:
    """min 1/2 x'Hx + g'x  s.t.  A_eq x = b_eq,  A_in x <= b_in,
    lower <= x <= upper. H is symmetric PSD (None or zeros for an LP)."""
    g: np.ndarray
    H: Optional[np.ndarray] = None
    A_eq: Optional[np.ndarray] = None
    b_eq: Optional[np.ndarray] = None
    A_in: Optional[np.ndarray] = None
    b_in: Optional[np.ndarray] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def dims(self):
        n = len(self.g)
        p = 0 if self.A_eq is None else np.atleast_2d(self.A_eq).shape[0]
        q = 0 if self.A_in is None else np.atleast_2d(self.A_in).shape[0]
        return n, p, q


@dataclass
class ProgramSolution:
    x: np.ndarray
    objective: float
    duals: dict
    iterations: int
    status: str  # "optimal" | "infeasible" | "max_iter"


def _assemble(prog: ConvexProgram):
    """Fold bounds into inequality rows; return (H, g, A, b, C, d, groups)."""
    n, p, q = prog.dims()
    g = np.asarray(prog.g, dtype=float)
    H = np.zeros((n, n)) if prog.H is None else np.asarray(prog.H, dtype=float)
    A = np.zeros((p, n)) if p == 0 else np.atleast_2d(np.asarray(prog.A_eq, float))
    b = np.zeros(p) if p == 0 else np.atleast_1d(np.asarray(prog.b_eq, float))

    rows, rhs, groups = [], [], []
    if q:
        rows.append(np.atleast_2d(np.asarray(prog.A_in, float)))
        rhs.append(np.atleast_1d(np.asarray(prog.b_in, float)))
        groups += [("in", i) for i in range(q)]
    if prog.lower is not None:
        lo = np.asarray(prog.lower, dtype=float)
        idx = np.where(np.isfinite(lo))[0]
        if idx.size:
            E = np.zeros((idx.size, n))
            E[np.arange(idx.size), idx] = -1.0
            rows.append(E)
            rhs.append(-lo[idx])
            groups += [("lb", int(i)) for i in idx]
    if prog.upper is not None:
        up = np.asarray(prog.upper, dtype=float)
        idx = np.where(np.isfinite(up))[0]
        if idx.size:
            E = np.zeros((idx.size, n))
            E[np.arange(idx.size), idx] = 1.0
            rows.append(E)
            rhs.append(up[idx])
            groups += [("ub", int(i)) for i in idx]
    C = np.vstack(rows) if rows else np.zeros((0, n))
    d = np.concatenate(rhs) if rhs else np.zeros(0)
    return H, g, A, b, C, d, groups


def solve_program(prog: ConvexProgram, tol: float = 1e-9, max_iter: int = 100,
                  counters: Optional[Counters] = None) -> ProgramSolution:
    """Mehrotra predictor-corrector on the folded program.

    Iterations are added to the barrier counter. Infeasibility is reported
    when the dual iterates diverge while the primal residual stays bounded
    away from zero.
    """
    H, g, A, b, C, d, groups = _assemble(prog)
    n = len(g)
    p, q = A.shape[0], C.shape[0]

    x = np.zeros(n)
    if p:
        x = np.linalg.lstsq(A, b, rcond=None)[0]
    y = np.zeros(p)
    if q:
        slack0 = d - C @ x
        s = np.maximum(1.0, np.abs(slack0))
        z = np.ones(q)
    else:
        s = np.zeros(0)
        z = np.zeros(0)

    scale = 1.0 + max(np.linalg.norm(g, np.inf) if n else 0.0,
                      np.linalg.norm(b, np.inf) if p else 0.0,
                      np.linalg.norm(d, np.inf) if q else 0.0)

    Hreg = H + _REG * np.eye(n)
    status = "max_iter"
    it = 0
    for it in range(1, max_iter + 1):
        rd = Hreg @ x + g + (A.T @ y if p else 0.0) + (C.T @ z if q else 0.0)
        rp = A @ x - b if p else np.zeros(0)
        ri = C @ x + s - d if q else np.zeros(0)
        mu = float(s @ z / q) if q else 0.0

        feas = max(np.linalg.norm(rd, np.inf) if n else 0.0,
                   np.linalg.norm(rp, np.inf) if p else 0.0,
                   np.linalg.norm(ri, np.inf) if q else 0.0)
        if feas <= tol * scale and mu <= tol * scale:
            status = "optimal"
            it -= 1  # this pass performed no Newton step
            break
        if q and max(np.linalg.norm(z, np.inf),
                     np.linalg.norm(y, np.inf) if p else 0.0) > _DIVERGE:
            status = "infeasible"
            break

        # KKT matrix with inequalities eliminated through the slacks
        if q:
            zs = z / s
            M = Hreg + C.T @ (zs[:, None] * C)
        else:
            M = Hreg
        K = np.zeros((n + p, n + p))
        K[:n, :n] = M
        if p:
            K[:n, n:] = A.T
            K[n:, :n] = A
            K[n:, n:] = -_REG * np.eye(p)

        def newton(t):
            # t is the complementarity target vector (length q)
            if q:
                top = -rd - C.T @ ((t + z * ri) / s)
            else:
                top = -rd
            rhs = np.concatenate([top, -rp])
            try:
                # the system turns near-singular by design as the barrier
                # shrinks; the conditioning warning carries no information
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore",
                                          scipy.linalg.LinAlgWarning)
                    sol = scipy.linalg.solve(K, rhs, assume_a="sym")
            except (scipy.linalg.LinAlgError, np.linalg.LinAlgError):
                # singular when the optimal face is a subspace; take the
                # minimum-norm Newton step instead
                sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
            dx, dy = sol[:n], sol[n:]
            if q:
                ds = -ri - C @ dx
                dz = (t - z * ds) / s
            else:
                ds = np.zeros(0)
                dz = np.zeros(0)
            return dx, dy, ds, dz

        if q:
            # predictor
            dxa, dya, dsa, dza = newton(-s * z)
            a_p = _max_step(s, dsa)
            a_d = _max_step(z, dza)
            mu_aff = float((s + a_p * dsa) @ (z + a_d * dza) / q)
            sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
            # corrector
            t = -s * z - dsa * dza + sigma * mu * np.ones(q)
            dx, dy, ds, dz = newton(t)
            a_p = _FRACTION * _max_step(s, ds)
            a_d = _FRACTION * _max_step(z, dz)
        else:
            dx, dy, ds, dz = newton(np.zeros(0))
            a_p = a_d = 1.0

        if not all(np.all(np.isfinite(v)) for v in (dx, dy, ds, dz)):
            raise NumericalFailure("interior-point step is non-finite")
        x = x + a_p * dx
        s = s + a_p * ds
        y = y + a_d * dy
        z = z + a_d * dz

    if counters is not None:
        counters.barrier_iters += it

    duals = {"eq": y.copy(), "in": np.zeros(0), "lb": {}, "ub": {}}
    if q:
        n_in = sum(1 for kind, _ in groups if kind == "in")
        duals["in"] = np.zeros(n_in)
        for zi, (kind, i) in zip(z, groups):
            if kind == "in":
                duals["in"][i] = zi
            else:
                duals[kind][i] = zi
    obj = float(0.5 * x @ (H @ x) + g @ x)
    return ProgramSolution(x=x, objective=obj, duals=duals,
                           iterations=it, status=status)


def _max_step(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def kkt_residual(x: np.ndarray, grad_f: np.ndarray, c_I: np.ndarray,
                 J_E: np.ndarray, J_I: np.ndarray,
                 counters: Optional[Counters] = None) -> float:
    """Smallest t such that some multipliers put the stationarity residual
    and the complementarity products within t in the max norm.

    Solved as an LP over (t, lambda_E, lambda_I) with the max-norm
    constraints expanded into paired inequalities.
    """
    grad_f = np.asarray(grad_f, dtype=float)
    c_I = np.atleast_1d(np.asarray(c_I, dtype=float))
    n = grad_f.size
    J_E = np.asarray(J_E, dtype=float).reshape(-1, n)
    J_I = np.asarray(J_I, dtype=float).reshape(-1, n)
    m_E, m_I = J_E.shape[0], J_I.shape[0]

    nv = 1 + m_E + m_I  # [t, lambda_E, lambda_I]
    gvec = np.zeros(nv)
    gvec[0] = 1.0

    rows, rhs = [], []
    # |grad_f + J_E' lam_E + J_I' lam_I| <= t, componentwise
    stat = np.zeros((n, nv))
    stat[:, 1:1 + m_E] = J_E.T
    stat[:, 1 + m_E:] = J_I.T
    te = np.zeros((n, nv))
    te[:, 0] = 1.0
    rows.append(stat - te)
    rhs.append(-grad_f)
    rows.append(-stat - te)
    rhs.append(grad_f)
    # |lam_I * c_I| <= t, componentwise
    if m_I:
        comp = np.zeros((m_I, nv))
        comp[np.arange(m_I), 1 + m_E + np.arange(m_I)] = c_I
        tm = np.zeros((m_I, nv))
        tm[:, 0] = 1.0
        rows.append(comp - tm)
        rhs.append(np.zeros(m_I))
        rows.append(-comp - tm)
        rhs.append(np.zeros(m_I))

    lower = np.full(nv, -np.inf)
    lower[0] = 0.0
    lower[1 + m_E:] = 0.0  # lambda_I >= 0

    prog = ConvexProgram(g=gvec, A_in=np.vstack(rows), b_in=np.concatenate(rhs),
                         lower=lower)
    sol = solve_program(prog, counters=counters)
    if sol.status != "optimal":
        raise NumericalFailure(f"KKT-residual LP ended with status {sol.status}")
    return max(0.0, float(sol.x[0]))
