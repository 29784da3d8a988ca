"""Outer loop of the retrospective-approximation solver: batch sizing,
inner-loop termination rules, dual initialization, budget enforcement,
and trace recording."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .counters import Counters
from .errors import ConfigError, LineSearchFailure, MeritCollapse, RankDeficient
from .ipm import kkt_residual
from .linalg import LbfgsModel, least_squares_dual
from .problems import (FiniteSum, ProblemSpec, SampleSet, _sums_over,
                       draw_samples, eval_constraints, eval_subsampled,
                       eval_subsampled_value, gradient_stats)
from .sqp_eq import (EqEvaluator, EqInnerContext, EqSqpConfig, compute_step,
                     inner_iteration, model_decrease, trial_tau, update_tau)
from .sqp_ineq import (RobustEvaluator, RobustInnerContext, RobustSqpConfig,
                       direction_step, feasibility_step, robust_inner_iteration,
                       sigma_bounds, violation_norms)

INNER_CAP = 500


# ------------------------------------------------------------------
# configuration types
# ------------------------------------------------------------------

@dataclass
class TerminationRule:
    """Inner-loop stopping test: current <= gamma * snapshot0 + eps, where
    snapshot0 is the rule's metric at the first inner iteration.

    kind selects the metric: "kkt" (KKT error norm), "dnorm" (step norm),
    "dl" (merit model decrease, snapshot clipped at kappa_d * ||d0||^2),
    "robust_dnorm" (step norm of the robust solver).
    """
    kind: str = "kkt"
    gamma: float = 0.5
    eps: float = 1e-6
    kappa_d: float = 1e8

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must be in [0, 1)")
        if self.eps < 0.0 or self.kappa_d <= 0.0:
            raise ConfigError("eps must be >= 0 and kappa_d > 0")


def default_termination(kind: str) -> TerminationRule:
    gamma = 0.1 if kind == "dl" else 0.5
    return TerminationRule(kind=kind, gamma=gamma)


@dataclass
class SamplingRule:
    """Batch-size schedule: "adaptive" (variance-based norm test with
    growth factor beta_hat), "geometric" (fixed-rate growth), "full"
    (whole dataset every outer iteration), or "fixed" (initial_size every
    outer iteration)."""
    kind: str = "adaptive"
    theta: float = 0.5
    beta_hat: float = 5.0
    initial_size: int = 32
    beta: float = 0.5         # geometric, finite-sum
    beta_tilde: float = 0.5   # geometric, expectation

    def __post_init__(self):
        if self.theta <= 0 or self.beta_hat <= 1:
            raise ConfigError("theta > 0 and beta_hat > 1 required")
        if not 0.0 < self.beta < 1.0 or not 0.0 < self.beta_tilde < 1.0:
            raise ConfigError("beta and beta_tilde must be in (0, 1)")
        if self.initial_size < 1:
            raise ConfigError("initial_size must be >= 1")


@dataclass
class Budget:
    max_gradient_evals: int = 10 ** 6
    max_outer: int = 10 ** 9
    wall_clock: float = math.inf


@dataclass
class DriverConfig:
    solver: str = "equality"           # "equality" | "robust"
    termination: TerminationRule = field(default_factory=TerminationRule)
    sampling: SamplingRule = field(default_factory=SamplingRule)
    dual_mode: str = "carryover"       # "carryover" | "reinit"
    eq: EqSqpConfig = field(default_factory=EqSqpConfig)
    robust: RobustSqpConfig = field(default_factory=RobustSqpConfig)
    use_lbfgs: bool = False
    inner_cap: int = INNER_CAP
    tau_bar: float = 1.0
    # optional metric-threshold stopping (both must hold); None = budget only
    stop_violation: Optional[float] = None
    stop_stationarity: Optional[float] = None
    mc_metric_samples: int = 10 ** 5


@dataclass
class OuterRecord:
    k: int
    batch_size: int
    inner_iterations: int
    updates: int                      # inner iterations that moved x
    estimation_size: int              # fresh-set size used for batch sizing
    violation_inf: float
    stationarity: float
    grad_evals_cum: int
    minres_iters_cum: int
    barrier_iters_cum: int
    tau_exit: float
    term_cause: str
    metric_mc: bool = False
    x: Optional[np.ndarray] = None    # iterate at the outer exit (not in CSV)


@dataclass
class SolveOutcome:
    status: str                       # Converged | InfeasibleStationary | BudgetExhausted
    x: np.ndarray
    lam: Optional[np.ndarray]
    trace: list
    counters: Counters


# ------------------------------------------------------------------
# building blocks
# ------------------------------------------------------------------

def dual_initialize(mode: str, lam_prev: np.ndarray, g_S: np.ndarray,
                    c: np.ndarray, J: np.ndarray) -> np.ndarray:
    """Dual warm start for an outer iteration.

    "carryover" keeps lam_prev. "reinit" computes the least-squares
    multipliers and keeps them only if they give a KKT error no worse than
    lam_prev; a rank-deficient Jacobian falls back to carryover.
    """
    if mode == "carryover":
        return lam_prev
    if mode != "reinit":
        raise ConfigError(f"unknown dual mode {mode!r}")
    try:
        lam_ls, _ = least_squares_dual(J, g_S)
    except RankDeficient:
        return lam_prev

    def kkt_norm(lam):
        return np.linalg.norm(np.concatenate([g_S + J.T @ lam, c]))

    return lam_ls if kkt_norm(lam_ls) <= kkt_norm(lam_prev) else lam_prev


def termination_check(rule: TerminationRule, snapshot0: float,
                      current: float) -> bool:
    return current <= rule.gamma * snapshot0 + rule.eps


def adaptive_batch_size(prev_size: int, variance_est: float, Z_est: float,
                        theta: float, beta_hat: float,
                        dataset_cap: Optional[int]) -> int:
    """min{cap, beta_hat * prev, max{prev, ceil(var / (theta Z)^2)}} with the
    variance term treated as infinite when Z vanishes and as prev when the
    variance vanishes."""
    if variance_est <= 0.0:
        candidate = prev_size
    elif Z_est <= 0.0:
        candidate = math.inf
    else:
        candidate = math.ceil(variance_est / (theta * theta * Z_est * Z_est))
    size = max(prev_size, candidate)
    size = min(size, math.ceil(beta_hat * prev_size))
    if dataset_cap is not None:
        size = min(size, dataset_cap)
    return int(size)


def geometric_batch_size(k: int, rule: SamplingRule,
                         dataset_cap: Optional[int],
                         prev_size: Optional[int] = None) -> int:
    """Finite-sum: ceil((1 - beta^k) |S|); expectation: grow the previous
    size by 1 / beta_tilde^2. Clipped to [1, cap] and non-decreasing."""
    if dataset_cap is not None:
        size = math.ceil((1.0 - rule.beta ** k) * dataset_cap)
        size = min(max(size, 1), dataset_cap)
    else:
        if k == 0 or prev_size is None:
            size = rule.initial_size
        else:
            size = math.ceil(prev_size / (rule.beta_tilde ** 2))
    if prev_size is not None:
        size = max(size, prev_size)
    return int(size)


def epsilon_schedule(mode: str, variance_est: float, batch_size: int,
                     omega: float = 1.0, fixed: float = 1e-6) -> float:
    """Additive termination tolerance: a constant, or a multiple of the
    subsampled-gradient standard error."""
    if mode == "fixed":
        return fixed
    if mode == "variance":
        return omega * math.sqrt(max(variance_est, 0.0) / batch_size)
    raise ConfigError(f"unknown epsilon mode {mode!r}")


@dataclass
class ConditionEstimate:
    variance: float
    Z: float
    fresh_set: SampleSet
    value_sum: float
    gradient_sum: np.ndarray
    degenerate: bool = False


def estimate_condition_inputs(problem: ProblemSpec, x: np.ndarray,
                              lam: np.ndarray, prev_batch: SampleSet,
                              config: DriverConfig,
                              hessian: Optional[LbfgsModel],
                              rng: np.random.Generator,
                              counters: Counters) -> ConditionEstimate:
    """Variance and progress estimates on a fresh sample set of the previous
    batch size, drawn independently of the current iterate.

    The progress measure Z matches the termination rule: the KKT error norm
    directly, or the step norm / model decrease from one probe step solve
    that performs no updates. Per-sample gradient sums are retained so the
    fresh set can be folded into the next batch at no extra gradient cost.
    """
    if prev_batch.size < 1:
        raise ConfigError("previous batch is empty")
    fresh = draw_samples(problem, prev_batch.size, rng)
    vsum, gsum, sqsum = gradient_stats(problem, x, fresh.items, counters)
    m = fresh.size
    gbar = gsum / m
    if m == 1:
        variance, degenerate = 0.0, True
    else:
        variance = max(0.0, (sqsum - m * float(gbar @ gbar)) / (m - 1))
        degenerate = False

    c_E, c_I, J_E, J_I = eval_constraints(problem, x)
    rule = config.termination.kind
    if config.solver == "equality":
        ctx = EqInnerContext(x=x, lam=lam, F_S=vsum / m, g_S=gbar, c=c_E,
                             J=J_E, tau_prev=config.tau_bar, hessian=hessian)
        if rule == "kkt":
            Z = float(np.linalg.norm(ctx.kkt_vector()))
        else:
            step = compute_step(ctx, config.eq, counters)
            if rule == "dnorm":
                Z = float(np.linalg.norm(step.d))
            elif rule == "dl":
                try:
                    tau, dl = plan_merit(ctx, config.eq, step)
                    Z = max(dl, 0.0)
                except MeritCollapse:
                    Z = 0.0
            else:
                raise ConfigError(f"unknown termination kind {rule!r}")
    else:
        v_inf, v_l1 = violation_norms(c_E, c_I)
        mode = config.robust.mode
        violation = v_inf if mode == "linf" else v_l1
        sigma_p, sigma_d = sigma_bounds(v_inf, v_l1, mode, x.size)
        feas = feasibility_step(c_E, c_I, J_E, J_I, sigma_p, mode,
                                counters=counters)
        H = None if hessian is None else hessian.as_matrix()
        step = direction_step(gbar, H, c_E, c_I, J_E, J_I, feas.relaxation,
                              sigma_d, mode, violation, feas.lp_objective,
                              counters=counters)
        Z = float(np.linalg.norm(step.d))

    return ConditionEstimate(variance=variance, Z=Z, fresh_set=fresh,
                             value_sum=vsum, gradient_sum=gsum,
                             degenerate=degenerate)


def plan_merit(ctx: EqInnerContext, eq_config: EqSqpConfig, step):
    """Merit parameter and model decrease the inner iteration will use for a
    given step, without performing the iteration."""
    gTd = float(ctx.g_S @ step.d)
    c_l1 = float(np.linalg.norm(ctx.c, 1))
    r_l1 = float(np.linalg.norm(step.r, 1))
    if step.acceptance == "inexact_cond1":
        tau = ctx.tau_prev
    else:
        dHd = float(step.d @ ctx.h_apply(step.d))
        tau_tr = trial_tau(gTd, dHd, float(step.d @ step.d), c_l1, r_l1,
                           eq_config.eps_sigma, eq_config.eps_d)
        tau = update_tau(ctx.tau_prev, tau_tr, eq_config.eps_tau)
    return tau, model_decrease(tau, gTd, c_l1, r_l1)


# ------------------------------------------------------------------
# true-problem metrics
# ------------------------------------------------------------------

def true_gradient_at(problem: ProblemSpec, x: np.ndarray,
                     mc_samples: int) -> tuple:
    """Gradient of the underlying objective at x, outside any budget: the
    analytic gradient when known, the full-dataset average for finite sums,
    or a fixed-seed Monte Carlo surrogate (flagged) otherwise."""
    if problem.true_gradient is not None:
        return problem.true_gradient(x), False
    if isinstance(problem.mode, FiniteSum):
        full = SampleSet(tuple(range(problem.mode.dataset_size)))
        _, g = eval_subsampled(problem, x, full, counters=None)
        return g, False
    rng = np.random.default_rng(987654321)
    S = draw_samples(problem, mc_samples, rng)
    _, g = eval_subsampled(problem, x, S, counters=None)
    return g, True


def true_metrics(problem: ProblemSpec, x: np.ndarray, solver: str,
                 mc_samples: int = 10 ** 5):
    """(violation_inf, stationarity, monte_carlo_flag) for the underlying
    problem: max-norm violation of (c_E, [c_I]_+), and either the best-dual
    Lagrangian gradient norm (equality) or the KKT residual (general)."""
    c_E, c_I, J_E, J_I = eval_constraints(problem, x)
    v_inf, _ = violation_norms(c_E, c_I)
    g, mc = true_gradient_at(problem, x, mc_samples)
    if solver == "equality":
        if problem.m_E == 0:
            stat = float(np.linalg.norm(g, np.inf))
        else:
            lam = np.linalg.lstsq(J_E.T, -g, rcond=None)[0]
            stat = float(np.linalg.norm(g + J_E.T @ lam, np.inf))
    else:
        stat = kkt_residual(x, g, c_I, J_E, J_I, counters=None)
    return v_inf, stat, mc


# ------------------------------------------------------------------
# the outer loop
# ------------------------------------------------------------------

def run(problem: ProblemSpec, config: DriverConfig, budget: Budget,
        rng: np.random.Generator) -> SolveOutcome:
    """Retrospective-approximation outer loop.

    Each outer iteration draws a (non-decreasing) batch, warm-starts the
    inner solver from the previous solution, runs it until the termination
    rule fires or a cap is hit, and records true-problem metrics. Gradient
    evaluations on subsampled problems are budgeted; metric evaluations are
    not.
    """
    if config.solver == "equality" and problem.m_I > 0:
        raise ConfigError("equality solver requires a problem with m_I = 0")
    if config.solver not in ("equality", "robust"):
        raise ConfigError(f"unknown solver {config.solver!r}")

    counters = Counters()
    x = np.asarray(problem.x_init, dtype=float).copy()
    lam = np.zeros(problem.m_E)
    hessian = (LbfgsModel(dim=problem.n, capacity=min(problem.n, 10))
               if config.use_lbfgs else None)
    cap = (problem.mode.dataset_size
           if isinstance(problem.mode, FiniteSum) else None)

    trace = []
    v0, s0, mc0 = true_metrics(problem, x, config.solver,
                               config.mc_metric_samples)
    trace.append(OuterRecord(
        k=-1, batch_size=0, inner_iterations=0, updates=0, estimation_size=0,
        violation_inf=v0, stationarity=s0,
        grad_evals_cum=counters.gradient_evals,
        minres_iters_cum=counters.minres_iters,
        barrier_iters_cum=counters.barrier_iters,
        tau_exit=config.tau_bar, term_cause="initial", metric_mc=mc0,
        x=x.copy()))

    status = "BudgetExhausted"
    prev_S: Optional[SampleSet] = None
    start = time.monotonic()
    k = 0
    while True:
        if (counters.gradient_evals >= budget.max_gradient_evals
                or k >= budget.max_outer
                or time.monotonic() - start >= budget.wall_clock):
            status = "BudgetExhausted"
            break

        # batch sizing
        estimate = None
        if config.sampling.kind == "full":
            if cap is None:
                raise ConfigError("full sampling requires a finite-sum problem")
            size = cap
        elif config.sampling.kind == "fixed":
            size = config.sampling.initial_size
            if cap is not None:
                size = min(size, cap)
        elif prev_S is None:
            size = config.sampling.initial_size
            if cap is not None:
                size = min(size, cap)
        elif config.sampling.kind == "adaptive":
            estimate = estimate_condition_inputs(problem, x, lam, prev_S,
                                                 config, hessian, rng,
                                                 counters)
            size = adaptive_batch_size(prev_S.size, estimate.variance,
                                       estimate.Z, config.sampling.theta,
                                       config.sampling.beta_hat, cap)
        elif config.sampling.kind == "geometric":
            size = geometric_batch_size(k, config.sampling, cap, prev_S.size)
        else:
            raise ConfigError(f"unknown sampling kind {config.sampling.kind!r}")

        S = draw_samples(problem, size, rng,
                         superset_of=None if estimate is None
                         else estimate.fresh_set)

        # subsampled objective at the warm-start point, reusing fresh-set sums
        if estimate is not None and S.items[:estimate.fresh_set.size] \
                == estimate.fresh_set.items:
            tail = S.items[estimate.fresh_set.size:]
            if tail:
                t_v, t_g = _sums_over(problem, x, tail)
                counters.gradient_evals += len(tail)
                counters.function_evals += len(tail)
            else:
                t_v, t_g = 0.0, np.zeros(problem.n)
            F_S = (estimate.value_sum + t_v) / S.size
            g_S = (estimate.gradient_sum + t_g) / S.size
        else:
            F_S, g_S = eval_subsampled(problem, x, S, counters)

        c_E, c_I, J_E, J_I = eval_constraints(problem, x)
        est_size = 0 if estimate is None else estimate.fresh_set.size

        if config.solver == "equality":
            result = _equality_outer(problem, config, budget, S, x, lam,
                                     F_S, g_S, c_E, J_E, hessian, counters)
        else:
            result = _robust_outer(problem, config, budget, S, x,
                                   F_S, g_S, c_E, c_I, J_E, J_I, hessian,
                                   counters)
        x, lam, hessian, tau_exit, inner_iters, updates, term_cause = result

        v, s, mc = true_metrics(problem, x, config.solver,
                                config.mc_metric_samples)
        trace.append(OuterRecord(
            k=k, batch_size=S.size, inner_iterations=inner_iters,
            updates=updates, estimation_size=est_size,
            violation_inf=v, stationarity=s,
            grad_evals_cum=counters.gradient_evals,
            minres_iters_cum=counters.minres_iters,
            barrier_iters_cum=counters.barrier_iters,
            tau_exit=tau_exit, term_cause=term_cause, metric_mc=mc,
            x=x.copy()))

        if term_cause == "infeasible_stationary":
            status = "InfeasibleStationary"
            break
        if (config.stop_violation is not None
                and config.stop_stationarity is not None
                and v <= config.stop_violation
                and s <= config.stop_stationarity):
            status = "Converged"
            break

        prev_S = S
        k += 1

    return SolveOutcome(status=status, x=x,
                        lam=lam if config.solver == "equality" else None,
                        trace=trace, counters=counters)


def _eq_constraints(problem, x):
    c_E, _, J_E, _ = eval_constraints(problem, x)
    return c_E, J_E


def _equality_outer(problem, config, budget, S, x, lam, F_S, g_S, c_E, J_E,
                    hessian, counters):
    lam = dual_initialize(config.dual_mode, lam, g_S, c_E, J_E)
    ctx = EqInnerContext(x=x, lam=lam, F_S=F_S, g_S=g_S, c=c_E, J=J_E,
                         tau_prev=config.tau_bar, hessian=hessian)
    evaluator = EqEvaluator(
        value=lambda xt: eval_subsampled_value(problem, xt, S, counters),
        value_grad=lambda xt: eval_subsampled(problem, xt, S, counters),
        constraints=lambda xt: _eq_constraints(problem, xt))

    rule = config.termination
    snapshot = None
    updates = 0
    inner_iters = 0
    term_cause = "inner_cap"
    for j in range(config.inner_cap):
        if counters.gradient_evals >= budget.max_gradient_evals:
            term_cause = "budget"
            break
        step = None
        try:
            if rule.kind == "kkt":
                current = float(np.linalg.norm(ctx.kkt_vector()))
                snap_val = current
            else:
                step = compute_step(ctx, config.eq, counters)
                dnorm = float(np.linalg.norm(step.d))
                if rule.kind == "dnorm":
                    current, snap_val = dnorm, dnorm
                else:
                    _, dl = plan_merit(ctx, config.eq, step)
                    current = dl
                    snap_val = min(dl, rule.kappa_d * dnorm * dnorm)
            if snapshot is None:
                snapshot = snap_val
            if termination_check(rule, snapshot, current):
                term_cause = "terminated"
                break
            ctx, step, alpha = inner_iteration(ctx, config.eq, evaluator,
                                               counters, step=step)
        except MeritCollapse:
            term_cause = "merit_collapse"
            break
        except LineSearchFailure:
            term_cause = "line_search_failure"
            break
        inner_iters = j + 1
        if alpha > 0.0:
            updates += 1
    return (ctx.x, ctx.lam, ctx.hessian, ctx.tau_prev, inner_iters, updates,
            term_cause)


def _robust_outer(problem, config, budget, S, x, F_S, g_S, c_E, c_I, J_E,
                  J_I, hessian, counters):
    ctx = RobustInnerContext(x=x, F_S=F_S, g_S=g_S, c_E=c_E, c_I=c_I,
                             J_E=J_E, J_I=J_I, tau_prev=config.tau_bar,
                             hessian=hessian)
    evaluator = RobustEvaluator(
        value=lambda xt: eval_subsampled_value(problem, xt, S, counters),
        value_grad=lambda xt: eval_subsampled(problem, xt, S, counters),
        constraints=lambda xt: eval_constraints(problem, xt))

    rule = config.termination
    state = {"snapshot": None}

    def term_cb(dnorm):
        if state["snapshot"] is None:
            state["snapshot"] = dnorm
        return termination_check(rule, state["snapshot"], dnorm)

    updates = 0
    inner_iters = 0
    term_cause = "inner_cap"
    for j in range(config.inner_cap):
        if counters.gradient_evals >= budget.max_gradient_evals:
            term_cause = "budget"
            break
        try:
            out = robust_inner_iteration(ctx, config.robust, evaluator,
                                         term_cb, counters)
        except MeritCollapse:
            term_cause = "merit_collapse"
            break
        except LineSearchFailure:
            term_cause = "line_search_failure"
            break
        if out.kind == "termination":
            term_cause = "terminated"
            break
        if out.kind == "infeasible_stationary":
            term_cause = "infeasible_stationary"
            break
        ctx = out.ctx
        inner_iters = j + 1
        updates += 1
    return (ctx.x, None, ctx.hessian, ctx.tau_prev, inner_iters, updates,
            term_cause)
