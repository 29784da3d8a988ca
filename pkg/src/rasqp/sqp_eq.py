"""One inner iteration of the line-search SQP method for equality-constrained
subsampled problems: KKT step (exact or truncated-MINRES), merit-parameter
management, and Armijo backtracking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .counters import Counters
from .errors import LineSearchFailure, MeritCollapse
from .linalg import (KrylovReport, LbfgsModel, SymmetricOperator, lbfgs_apply,
                     lbfgs_update, make_kkt_operator, minres_solve)


@dataclass
class EqInnerContext:
    x: np.ndarray
    lam: np.ndarray
    F_S: float
    g_S: np.ndarray
    c: np.ndarray
    J: np.ndarray
    tau_prev: float
    hessian: Optional[LbfgsModel] = None  # None means identity

    def h_apply(self, v):
        return v if self.hessian is None else lbfgs_apply(self.hessian, v)

    def kkt_vector(self):
        return np.concatenate([self.g_S + self.J.T @ self.lam, self.c])


@dataclass
class EqStepResult:
    d: np.ndarray
    delta: np.ndarray
    rho: np.ndarray
    r: np.ndarray
    acceptance: str  # "exact" | "inexact_cond1" | "inexact_cond2"
    minres_iterations: int = 0


@dataclass
class EqSqpConfig:
    exact: bool = True
    minres_tol: float = 1e-6
    minres_max_iter: int = 2000
    # inexactness conditions
    kappa_T: float = 1e-1
    kappa_prime: float = 1e3
    eps_feas: float = 1e-4
    eps_opt: float = 1e-4
    # merit parameter / line search
    eps_sigma: float = 0.5
    eps_tau: float = 0.01
    # lower bound on the model curvature relative to ||d||^2; must stay
    # below the smallest Rayleigh quotient of the Hessian model or the
    # merit parameter collapses on quasi-Newton models
    eps_d: float = 1e-4
    eta: float = 1e-4
    eps_alpha: float = 0.5
    alpha_min: float = 1e-12
    tau_init: float = 1.0


def compute_step(ctx: EqInnerContext, config: EqSqpConfig,
                 counters: Optional[Counters] = None) -> EqStepResult:
    """Solve the SQP KKT system [[H, J'], [J, 0]] (d, delta) = -T + (rho, r).

    Exact mode truncates MINRES at the relative-residual tolerance; inexact
    mode accepts the first iterate passing inexactness condition I (merit
    model decrease) or II (linearized-constraint decrease), falling back to
    the exact tolerance if neither triggers.
    """
    n = ctx.x.size
    T = ctx.kkt_vector()
    K = make_kkt_operator(ctx.h_apply, ctx.J)
    rhs = -T

    acceptance_kind = {}

    def accept(z, resid):
        d, rho, r = z[:n], -resid[:n], -resid[n:]
        c1 = np.linalg.norm(ctx.c, 1)
        r1 = np.linalg.norm(r, 1)
        # condition II: decrease in the linear constraint model
        cnorm = np.linalg.norm(ctx.c)
        if (np.linalg.norm(r) <= config.eps_feas * cnorm
                and np.linalg.norm(rho) <= config.eps_opt * cnorm):
            acceptance_kind["kind"] = "inexact_cond2"
            return True
        # condition I: sufficient decrease in the merit model at tau_prev
        gTd = float(ctx.g_S @ d)
        dHd = float(d @ ctx.h_apply(d))
        curv = max(dHd, config.eps_d * float(d @ d))
        dl = -ctx.tau_prev * gTd + c1 - r1
        bound = (config.eps_sigma * (1 - config.eps_feas)
                 * max(c1, np.linalg.norm(r) - c1)
                 + config.eps_sigma * (1 - config.eps_feas)
                 * ctx.tau_prev * curv)
        resid_norm = np.linalg.norm(np.concatenate([rho, r]))
        if (dl >= bound
                and resid_norm <= config.kappa_T * min(np.linalg.norm(T),
                                                       np.linalg.norm(d))
                and np.linalg.norm(rho) <= config.kappa_prime
                * max(np.linalg.norm(ctx.J), np.linalg.norm(ctx.g_S))):
            acceptance_kind["kind"] = "inexact_cond1"
            return True
        return False

    callback = None if config.exact else accept
    report = minres_solve(K, rhs, config.minres_tol, config.minres_max_iter,
                          acceptance=callback, counters=counters)
    if not config.exact and report.stop_reason == "max_iter":
        # no iterate passed the inexactness tests; continue to the exact tol
        report = minres_solve(K, rhs, config.minres_tol,
                              10 * config.minres_max_iter, counters=counters)

    z = report.solution
    resid_vec = rhs - K.apply(z)
    if report.stop_reason == "inexactness_accepted":
        kind = acceptance_kind.get("kind", "inexact_cond1")
    else:
        kind = "exact"
    return EqStepResult(d=z[:n], delta=z[n:], rho=-resid_vec[:n],
                        r=-resid_vec[n:], acceptance=kind,
                        minres_iterations=report.iterations)


def trial_tau(gTd: float, dHd: float, d_norm_sq: float, c_l1: float,
              r_l1: float, eps_sigma: float, eps_d: float) -> float:
    """Trial merit parameter; infinity when the direction is already a
    sufficient-descent direction for the objective model."""
    curv = max(dHd, eps_d * d_norm_sq)
    denom = gTd + curv
    # the sum cancels at the step-solver residual scale when the direction
    # is an exact minimizer of the objective model, hence a relative guard
    if denom <= 1e-8 * (abs(gTd) + curv):
        return np.inf
    return (1.0 - eps_sigma) * max(c_l1 - r_l1, 0.0) / denom


def update_tau(tau_prev: float, tau_tr: float, eps_tau: float) -> float:
    if tau_tr == 0.0:
        raise MeritCollapse("trial merit parameter is zero")
    if tau_prev <= tau_tr:
        return tau_prev
    return (1.0 - eps_tau) * tau_tr


def model_decrease(tau: float, gTd: float, c_l1: float, r_l1: float) -> float:
    """Reduction of the linear merit model: -tau g'd + ||c||_1 - ||r||_1."""
    return -tau * gTd + c_l1 - r_l1


def armijo_backtrack(merit_eval: Callable[[float], float], phi0: float,
                     delta_l: float, eta: float, eps_alpha: float,
                     alpha_min: float) -> float:
    """Largest alpha in {1, eps_alpha, eps_alpha^2, ...} with
    phi(alpha) <= phi0 - eta * alpha * delta_l."""
    if delta_l <= 0.0:
        raise ValueError("armijo_backtrack requires a positive model decrease")
    alpha = 1.0
    while alpha >= alpha_min:
        if merit_eval(alpha) <= phi0 - eta * alpha * delta_l:
            return alpha
        alpha *= eps_alpha
    raise LineSearchFailure(
        f"no step above {alpha_min:g} gave sufficient decrease")


@dataclass
class EqEvaluator:
    """Evaluation hooks the inner iteration needs beyond the context values:
    subsampled objective (value only, and value+gradient) and constraints."""
    value: Callable[[np.ndarray], float]
    value_grad: Callable[[np.ndarray], tuple]
    constraints: Callable[[np.ndarray], tuple]  # x -> (c, J)


def inner_iteration(ctx: EqInnerContext, config: EqSqpConfig,
                    evaluator: EqEvaluator,
                    counters: Optional[Counters] = None,
                    step: Optional[EqStepResult] = None):
    """One SQP inner iteration: step, merit update, Armijo line search,
    primal/dual update, quasi-Newton update.

    Returns (new_ctx, step_result, alpha). `step` may be passed in when the
    caller already solved the KKT system for a termination probe.

    Raises MeritCollapse or LineSearchFailure, which the outer loop treats
    as a signal to resample.
    """
    if step is None:
        step = compute_step(ctx, config, counters=counters)
    d, delta = step.d, step.delta

    if np.linalg.norm(d) <= 1e-15 * (1.0 + np.linalg.norm(ctx.x)):
        return ctx, step, 0.0

    gTd = float(ctx.g_S @ d)
    c_l1 = float(np.linalg.norm(ctx.c, 1))
    r_l1 = float(np.linalg.norm(step.r, 1))

    if step.acceptance == "inexact_cond1":
        # condition I certifies descent at the previous merit parameter
        tau = ctx.tau_prev
    else:
        dHd = float(d @ ctx.h_apply(d))
        tau_tr = trial_tau(gTd, dHd, float(d @ d), c_l1, r_l1,
                           config.eps_sigma, config.eps_d)
        tau = update_tau(ctx.tau_prev, tau_tr, config.eps_tau)

    delta_l = model_decrease(tau, gTd, c_l1, r_l1)
    phi0 = tau * ctx.F_S + c_l1

    def merit_eval(alpha):
        xt = ctx.x + alpha * d
        ct, _ = evaluator.constraints(xt)
        return tau * evaluator.value(xt) + float(np.linalg.norm(ct, 1))

    alpha = armijo_backtrack(merit_eval, phi0, delta_l, config.eta,
                             config.eps_alpha, config.alpha_min)

    x_new = ctx.x + alpha * d
    lam_new = ctx.lam + alpha * delta
    F_new, g_new = evaluator.value_grad(x_new)
    c_new, J_new = evaluator.constraints(x_new)

    hessian = ctx.hessian
    if hessian is not None:
        s = x_new - ctx.x
        y = (g_new + J_new.T @ lam_new) - (ctx.g_S + ctx.J.T @ lam_new)
        hessian = lbfgs_update(hessian, s, y)

    new_ctx = EqInnerContext(x=x_new, lam=lam_new, F_S=F_new, g_S=g_new,
                             c=c_new, J=J_new, tau_prev=tau, hessian=hessian)
    return new_ctx, step, alpha
