"""Benchmark harness: problem registry, method table, run orchestration,
CSV trace emission, metrics, performance profiles, and active-set reports."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import Optional

import numpy as np

from .counters import Counters
from .driver import (Budget, DriverConfig, SamplingRule, SolveOutcome,
                     TerminationRule, default_termination, run, true_metrics)
from .errors import ConfigError
from .problems import (Dataset, ProblemSpec, Expectation, build_logreg_problem,
                       eval_constraints)
from .sqp_eq import EqSqpConfig
from .sqp_ineq import RobustSqpConfig

METHODS = ("ra-sqp-kkt", "ra-sqp-dnorm", "ra-sqp-dl", "ra-sqp-dl-lbfgs",
           "ra-sqp-dl-inexact", "ra-sqp-linf", "ra-sqp-l1", "det-sqp")

EPS_TOL_GRID = (1e-1, 1e-2, 1e-3, 1e-4)

TRACE_COLUMNS = ("k", "batch_size", "inner_iters", "grad_evals_cum",
                 "minres_iters_cum", "barrier_iters_cum", "violation_inf",
                 "stationarity", "tau_exit", "term_cause")


# ------------------------------------------------------------------
# problem registry
# ------------------------------------------------------------------

def make_synthetic_dataset(n_samples: int = 5000, n_features: int = 10,
                           n_classes: int = 3, data_seed: int = 0) -> Dataset:
    """Gaussian class clusters: class k has its mean shifted along feature k.
    n_features counts the appended constant bias feature."""
    rng = np.random.default_rng(data_seed)
    raw = n_features - 1
    rows, labels = [], []
    for i in range(n_samples):
        k = i % n_classes
        v = rng.standard_normal(raw)
        v[k % raw] += 2.0
        rows.append([(j, float(v[j])) for j in range(raw)] + [(raw, 1.0)])
        labels.append(k)
    return Dataset(rows=rows, labels=np.array(labels, dtype=np.int64),
                   n_features=n_features, n_classes=n_classes)


def make_noisy_quadratic(n: int = 20, m: int = 5, noise: float = 0.01,
                         data_seed: int = 0) -> ProblemSpec:
    """Equality-constrained strongly convex quadratic whose sampled gradient
    is the true gradient scaled by (1 + xi), xi uniform on [-noise, noise]."""
    rng = np.random.default_rng(data_seed)
    A = rng.standard_normal((n, n))
    Q = A @ A.T / n + np.eye(n)
    J = rng.standard_normal((m, n))
    b = rng.standard_normal(m)

    def f(x):
        return 0.5 * float(x @ (Q @ x))

    def gf(x):
        return Q @ x

    def sampler(gen, count):
        return tuple(gen.uniform(-noise, noise, size=count))

    def batch_stats(x, samples):
        xi = np.fromiter(samples, dtype=float, count=len(samples))
        cnt = len(samples)
        v, g = f(x), gf(x)
        gg = float(g @ g)
        vsum = v * float(np.sum(1.0 + xi))
        gsum = g * float(np.sum(1.0 + xi))
        sqsum = gg * float(np.sum((1.0 + xi) ** 2))
        return vsum, gsum, sqsum

    return ProblemSpec(
        n=n, m_E=m, m_I=0, mode=Expectation(sampler),
        objective_eval=lambda x, xi: (1.0 + xi) * f(x),
        gradient_eval=lambda x, xi: (1.0 + xi) * gf(x),
        constraint_eval=lambda x: (J @ x - b, np.zeros(0)),
        jacobian_eval=lambda x: (J, np.zeros((0, n))),
        x_init=np.ones(n),
        batch_eval=lambda x, s: batch_stats(x, s)[:2],
        batch_stats=batch_stats,
        true_value=f, true_gradient=gf, name="synth-eq-quad")


def make_infeasible_1d() -> ProblemSpec:
    """1-D problem whose two equality constraints x = 0 and x = 1 cannot be
    met; the constant objective makes every point penalty-stationary."""
    def sampler(gen, count):
        return tuple(0.0 for _ in range(count))

    return ProblemSpec(
        n=1, m_E=2, m_I=0, mode=Expectation(sampler),
        objective_eval=lambda x, xi: 0.0,
        gradient_eval=lambda x, xi: np.zeros(1),
        constraint_eval=lambda x: (np.array([x[0], x[0] - 1.0]), np.zeros(0)),
        jacobian_eval=lambda x: (np.array([[1.0], [1.0]]), np.zeros((0, 1))),
        x_init=np.array([0.3]),
        true_value=lambda x: 0.0,
        true_gradient=lambda x: np.zeros(1),
        name="infeasible-1d")


def build_problem(name: str, data_seed: int = 0) -> ProblemSpec:
    if name == "synth-logreg-eq":
        return build_logreg_problem(make_synthetic_dataset(data_seed=data_seed),
                                    "equality")
    if name == "synth-logreg-ineq":
        return build_logreg_problem(make_synthetic_dataset(data_seed=data_seed),
                                    "inequality")
    if name == "synth-eq-quad":
        return make_noisy_quadratic(data_seed=data_seed)
    if name == "infeasible-1d":
        return make_infeasible_1d()
    raise ConfigError(f"unknown problem {name!r}")


PROBLEMS = ("synth-logreg-eq", "synth-logreg-ineq", "synth-eq-quad",
            "infeasible-1d")


# ------------------------------------------------------------------
# run configuration
# ------------------------------------------------------------------

@dataclass
class RunConfig:
    problem: str = "synth-logreg-eq"
    method: str = "ra-sqp-dl"
    seed: int = 0
    data_seed: int = 0
    sampling: str = "adaptive"          # adaptive | geometric (RA methods)
    initial_size: int = 32
    beta: float = 0.5
    max_gradient_evals: int = 10 ** 6
    max_outer: int = 10 ** 9
    stop_violation: Optional[float] = None
    stop_stationarity: Optional[float] = None
    output: Optional[str] = None


def method_driver_config(method: str, problem: ProblemSpec,
                         config: RunConfig) -> DriverConfig:
    """Translate a method label into a driver configuration for a problem."""
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}")
    equality_only = ("ra-sqp-kkt", "ra-sqp-dnorm", "ra-sqp-dl",
                     "ra-sqp-dl-lbfgs", "ra-sqp-dl-inexact")
    if method in equality_only and problem.m_I > 0:
        raise ConfigError(f"{method} requires a problem without inequalities")
    if method in ("ra-sqp-linf", "ra-sqp-l1") and problem.m_I == 0 \
            and problem.m_E == 0:
        raise ConfigError(f"{method} requires a constrained problem")

    sampling = SamplingRule(kind=config.sampling,
                            initial_size=config.initial_size,
                            beta=config.beta, beta_tilde=config.beta)
    common = dict(sampling=sampling,
                  stop_violation=config.stop_violation,
                  stop_stationarity=config.stop_stationarity)

    if method == "ra-sqp-kkt":
        return DriverConfig(solver="equality", dual_mode="reinit",
                            termination=default_termination("kkt"), **common)
    if method == "ra-sqp-dnorm":
        return DriverConfig(solver="equality", dual_mode="carryover",
                            termination=default_termination("dnorm"), **common)
    if method == "ra-sqp-dl":
        return DriverConfig(solver="equality", dual_mode="carryover",
                            termination=default_termination("dl"), **common)
    if method == "ra-sqp-dl-lbfgs":
        return DriverConfig(solver="equality", dual_mode="carryover",
                            termination=default_termination("dl"),
                            use_lbfgs=True, **common)
    if method == "ra-sqp-dl-inexact":
        return DriverConfig(solver="equality", dual_mode="carryover",
                            termination=default_termination("dl"),
                            eq=EqSqpConfig(exact=False, minres_max_iter=200),
                            **common)
    if method == "ra-sqp-linf":
        return DriverConfig(solver="robust",
                            termination=default_termination("robust_dnorm"),
                            robust=RobustSqpConfig(mode="linf"), **common)
    if method == "ra-sqp-l1":
        return DriverConfig(solver="robust",
                            termination=default_termination("robust_dnorm"),
                            robust=RobustSqpConfig(mode="l1"), **common)
    # det-sqp: full batch every outer iteration (a large fixed batch when
    # the problem is an expectation), no subsampling benefit
    solver = "robust" if problem.m_I > 0 else "equality"
    if isinstance(problem.mode, Expectation):
        full = SamplingRule(kind="fixed", initial_size=10 ** 4)
    else:
        full = SamplingRule(kind="full", initial_size=config.initial_size)
    # halve the inner metric per outer pass so progress is recorded (and
    # stop thresholds are checked) at a useful granularity
    if solver == "equality":
        term = TerminationRule(kind="kkt", gamma=0.5, eps=1e-12)
    else:
        term = TerminationRule(kind="robust_dnorm", gamma=0.5, eps=1e-12)
    return DriverConfig(solver=solver, dual_mode="reinit", termination=term,
                        robust=RobustSqpConfig(mode="linf"),
                        sampling=full,
                        stop_violation=config.stop_violation,
                        stop_stationarity=config.stop_stationarity)


def run_config(config: RunConfig) -> SolveOutcome:
    problem = build_problem(config.problem, config.data_seed)
    driver_cfg = method_driver_config(config.method, problem, config)
    budget = Budget(max_gradient_evals=config.max_gradient_evals,
                    max_outer=config.max_outer)
    rng = np.random.default_rng(config.seed)
    return run(problem, driver_cfg, budget, rng)


# ------------------------------------------------------------------
# metrics and success rules
# ------------------------------------------------------------------

def metrics_eval(problem: ProblemSpec, x: np.ndarray, solver_kind: str):
    """(violation_inf, stationarity) on the true problem."""
    v, s, _ = true_metrics(problem, x, solver_kind)
    return v, s


def success_test(metric_init: float, metric_out: float,
                 eps_tol: float) -> bool:
    """metric_out <= eps_tol * max(1, metric_init)."""
    if not 0.0 < eps_tol < 1.0:
        raise ConfigError("eps_tol must be in (0, 1)")
    return metric_out <= eps_tol * max(1.0, metric_init)


def success_record(trace, eps_tol: float):
    """First outer record where both feasibility and stationarity pass the
    success rule relative to the initial point; None if never."""
    init = trace[0]
    for rec in trace:
        if (success_test(init.violation_inf, rec.violation_inf, eps_tol)
                and success_test(init.stationarity, rec.stationarity,
                                 eps_tol)):
            return rec
    return None


def cost_to_success(trace, eps_tol: float,
                    metric: str = "grad_evals") -> Optional[int]:
    """Cost at the first successful outer exit: cumulative gradient
    evaluations or cumulative solver (MINRES + barrier) iterations."""
    rec = success_record(trace, eps_tol)
    if rec is None:
        return None
    if metric == "grad_evals":
        return max(rec.grad_evals_cum, 1)
    if metric == "solver_iters":
        return max(rec.minres_iters_cum + rec.barrier_iters_cum, 1)
    raise ConfigError(f"unknown profile metric {metric!r}")


# ------------------------------------------------------------------
# performance profiles
# ------------------------------------------------------------------

def performance_profile(costs: dict):
    """Dolan-More profile data.

    `costs` maps (instance, method) -> positive cost or None for failure.
    Returns (methods, instances, ratios) where ratios[method] is the list of
    per-instance cost ratios (math.inf for failures), aligned to instances.
    """
    instances = sorted({key[0] for key in costs})
    methods = sorted({key[1] for key in costs})
    ratios = {m: [] for m in methods}
    for inst in instances:
        vals = [costs.get((inst, m)) for m in methods]
        finite = [v for v in vals if v is not None]
        best = min(finite) if finite else None
        for m, v in zip(methods, vals):
            if v is None or best is None:
                ratios[m].append(math.inf)
            else:
                ratios[m].append(v / best)
    return methods, instances, ratios


def profile_curve(ratio_list, taus):
    """rho(tau) = fraction of instances with ratio <= tau."""
    n = len(ratio_list)
    return [sum(1 for r in ratio_list if r <= t) / n for t in taus]


# ------------------------------------------------------------------
# active sets
# ------------------------------------------------------------------

def active_set(problem: ProblemSpec, x: np.ndarray,
               tol: float = 1e-6) -> frozenset:
    _, c_I, _, _ = eval_constraints(problem, x)
    return frozenset(int(i) for i in np.where(c_I >= -tol)[0])


def jaccard(a: frozenset, b: frozenset) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def active_set_report(problem: ProblemSpec, xs, x_ref: np.ndarray,
                      tol: float = 1e-6):
    """Per-iterate (active set, Jaccard similarity to the reference active
    set, max-norm violation)."""
    ref = active_set(problem, x_ref, tol)
    report = []
    for x in xs:
        a = active_set(problem, x, tol)
        c_E, c_I, _, _ = eval_constraints(problem, x)
        v = np.concatenate([c_E, np.maximum(c_I, 0.0)])
        viol = float(np.linalg.norm(v, np.inf)) if v.size else 0.0
        report.append((a, jaccard(a, ref), viol))
    return report


# ------------------------------------------------------------------
# CSV emission
# ------------------------------------------------------------------

def write_trace_csv(path: str, outcome: SolveOutcome):
    """One row per outer iteration plus the k = -1 initial row. The first
    line is a timestamp comment excluded from determinism comparisons."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# generated {datetime.now(timezone.utc).isoformat()}\n")
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for rec in outcome.trace:
            writer.writerow([
                rec.k, rec.batch_size, rec.inner_iterations,
                rec.grad_evals_cum, rec.minres_iters_cum,
                rec.barrier_iters_cum, f"{rec.violation_inf:.17g}",
                f"{rec.stationarity:.17g}", f"{rec.tau_exit:.17g}",
                rec.term_cause])


def read_trace_csv(path: str):
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


RESULT_COLUMNS = ("problem", "method", "seed", "status", "grad_evals",
                  "violation_final", "stationarity_final") + tuple(
                      f"cost@{t:g}" for t in EPS_TOL_GRID) + tuple(
                      f"iters@{t:g}" for t in EPS_TOL_GRID)


def result_row(config: RunConfig, outcome: SolveOutcome):
    last = outcome.trace[-1]
    row = {
        "problem": config.problem,
        "method": config.method,
        "seed": config.seed,
        "status": outcome.status,
        "grad_evals": outcome.counters.gradient_evals,
        "violation_final": f"{last.violation_inf:.17g}",
        "stationarity_final": f"{last.stationarity:.17g}",
    }
    for t in EPS_TOL_GRID:
        cost = cost_to_success(outcome.trace, t, "grad_evals")
        row[f"cost@{t:g}"] = "" if cost is None else cost
        iters = cost_to_success(outcome.trace, t, "solver_iters")
        row[f"iters@{t:g}"] = "" if iters is None else iters
    return row


def write_results_csv(path: str, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


# ------------------------------------------------------------------
# sweep orchestration
# ------------------------------------------------------------------

def _run_one(config: RunConfig):
    try:
        outcome = run_config(config)
        return config, result_row(config, outcome), outcome, None
    except Exception as exc:  # numerical failures recorded, harness continues
        return config, None, None, f"{type(exc).__name__}: {exc}"


def sweep(configs, workers: Optional[int] = None):
    """Run a list of RunConfigs, optionally in a process pool sized by the
    RA_SQP_THREADS environment variable, collecting result rows serially."""
    if workers is None:
        workers = int(os.environ.get("RA_SQP_THREADS", "1"))
    results = []
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for cfg, row, outcome, err in pool.map(_run_one, configs):
                results.append((cfg, row, outcome, err))
    else:
        for cfg in configs:
            results.append(_run_one(cfg))
    return results
