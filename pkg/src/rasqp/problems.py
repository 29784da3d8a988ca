"""Constrained stochastic problem abstraction, concrete problem families,
and dataset ingestion.

A problem couples a sampled objective (finite-sum over a dataset or an
expectation over a noise distribution) with deterministic nonlinear
constraints. Constraint evaluators are always deterministic functions of x.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .counters import Counters
from .errors import ConfigError, NumericalFailure, ParseError


# ------------------------------------------------------------------
# sampling modes
# ------------------------------------------------------------------

@dataclass(frozen=True)
class FiniteSum:
    dataset_size: int


@dataclass(frozen=True)
class Expectation:
    # sampler(rng, count) -> sequence of noise realizations
    sampler: Callable[[np.random.Generator, int], Sequence]


@dataclass
class SampleSet:
    """An ordered, immutable-by-convention collection of samples.

    For finite-sum problems the items are dataset row ids; for expectation
    problems they are the drawn noise realizations themselves, so that
    re-evaluating over the same SampleSet is deterministic.
    """
    items: tuple

    @property
    def size(self) -> int:
        return len(self.items)


@dataclass
class ProblemSpec:
    n: int
    m_E: int
    m_I: int
    mode: FiniteSum | Expectation
    objective_eval: Callable  # (x, sample) -> float
    gradient_eval: Callable   # (x, sample) -> (n,) array
    constraint_eval: Callable  # x -> (c_E, c_I)
    jacobian_eval: Callable    # x -> (J_E, J_I)
    x_init: np.ndarray
    # optional vectorized path: (x, samples) -> (sum of values, sum of gradients)
    batch_eval: Optional[Callable] = None
    # optional richer path: (x, samples) -> (value sum, gradient sum,
    # sum of squared per-sample gradient norms), used by variance estimates
    batch_stats: Optional[Callable] = None
    # analytically known noiseless objective/gradient, when available
    true_value: Optional[Callable] = None
    true_gradient: Optional[Callable] = None
    name: str = ""


# ------------------------------------------------------------------
# subsampled evaluation
# ------------------------------------------------------------------

def _sums_over(problem: ProblemSpec, x: np.ndarray, samples: Sequence):
    """Sum of per-sample objective values and gradients over `samples`."""
    if problem.batch_eval is not None:
        return problem.batch_eval(x, samples)
    vsum = 0.0
    gsum = np.zeros(problem.n)
    for xi in samples:
        v = problem.objective_eval(x, xi)
        g = problem.gradient_eval(x, xi)
        if not (np.isfinite(v) and np.all(np.isfinite(g))):
            raise NumericalFailure(f"non-finite objective/gradient at sample {xi!r}")
        vsum += v
        gsum += g
    return vsum, gsum


def gradient_stats(problem: ProblemSpec, x: np.ndarray, samples: Sequence,
                   counters: Optional[Counters] = None):
    """Per-sample gradient statistics over `samples`: (value sum, gradient
    sum, sum of squared gradient norms). Counts one gradient evaluation per
    sample."""
    if problem.batch_stats is not None:
        vsum, gsum, sqsum = problem.batch_stats(x, samples)
    else:
        vsum, sqsum = 0.0, 0.0
        gsum = np.zeros(problem.n)
        for xi in samples:
            vsum += problem.objective_eval(x, xi)
            g = problem.gradient_eval(x, xi)
            gsum += g
            sqsum += float(g @ g)
    if not (np.isfinite(vsum) and np.all(np.isfinite(gsum))
            and np.isfinite(sqsum)):
        raise NumericalFailure("non-finite gradient statistics")
    if counters is not None:
        counters.gradient_evals += len(samples)
        counters.function_evals += len(samples)
    return vsum, gsum, sqsum


def eval_subsampled(problem: ProblemSpec, x: np.ndarray, S: SampleSet,
                    counters: Optional[Counters] = None):
    """Sample-average objective value and gradient over S.

    Increments the gradient-evaluation counter by S.size.
    """
    if S.size < 1:
        raise ConfigError("empty sample set")
    if not np.all(np.isfinite(x)):
        raise NumericalFailure("non-finite iterate")
    vsum, gsum = _sums_over(problem, x, S.items)
    if not (np.isfinite(vsum) and np.all(np.isfinite(gsum))):
        raise NumericalFailure("non-finite subsampled objective/gradient")
    if counters is not None:
        counters.gradient_evals += S.size
        counters.function_evals += S.size
    return vsum / S.size, gsum / S.size


def eval_subsampled_value(problem: ProblemSpec, x: np.ndarray, S: SampleSet,
                          counters: Optional[Counters] = None) -> float:
    """Sample-average objective only (used by line searches; no gradient cost)."""
    if problem.batch_eval is not None:
        vsum, _ = problem.batch_eval(x, S.items)
    else:
        vsum = 0.0
        for xi in S.items:
            vsum += problem.objective_eval(x, xi)
    if not np.isfinite(vsum):
        raise NumericalFailure("non-finite subsampled objective")
    if counters is not None:
        counters.function_evals += S.size
    return vsum / S.size


def eval_constraints(problem: ProblemSpec, x: np.ndarray):
    """Deterministic constraint values and Jacobians at x."""
    if not np.all(np.isfinite(x)):
        raise NumericalFailure("non-finite iterate")
    c_E, c_I = problem.constraint_eval(x)
    J_E, J_I = problem.jacobian_eval(x)
    c_E = np.atleast_1d(np.asarray(c_E, dtype=float))
    c_I = np.atleast_1d(np.asarray(c_I, dtype=float))
    J_E = np.asarray(J_E, dtype=float).reshape(problem.m_E, problem.n)
    J_I = np.asarray(J_I, dtype=float).reshape(problem.m_I, problem.n)
    for arr in (c_E, c_I, J_E, J_I):
        if not np.all(np.isfinite(arr)):
            raise NumericalFailure("non-finite constraint value or Jacobian")
    return c_E, c_I, J_E, J_I


def draw_samples(problem: ProblemSpec, size: int, rng: np.random.Generator,
                 superset_of: Optional[SampleSet] = None) -> SampleSet:
    """Draw a sample set, optionally containing a previous one as a prefix."""
    base = superset_of.items if superset_of is not None else ()
    if size < len(base):
        raise ConfigError("requested size smaller than the set to contain")
    if isinstance(problem.mode, FiniteSum):
        total = problem.mode.dataset_size
        if size > total:
            raise ConfigError(f"size {size} exceeds dataset size {total}")
        if size == len(base):
            return superset_of
        taken = set(base)
        pool = np.array([i for i in range(total) if i not in taken])
        extra = rng.choice(pool, size=size - len(base), replace=False)
        return SampleSet(tuple(base) + tuple(int(i) for i in extra))
    else:
        if size == len(base):
            return superset_of
        extra = tuple(problem.mode.sampler(rng, size - len(base)))
        return SampleSet(tuple(base) + extra)


# ------------------------------------------------------------------
# datasets (LIBSVM text format)
# ------------------------------------------------------------------

@dataclass
class Dataset:
    """Sparse classification dataset with an implicit constant bias feature.

    `rows[i]` is a list of (feature index, value) pairs; index
    n_features - 1 is the bias feature with value 1.0. Labels are class
    indices in 0..n_classes-1.
    """
    rows: list
    labels: np.ndarray
    n_features: int
    n_classes: int
    _csr: Optional[sp.csr_matrix] = field(default=None, repr=False, compare=False)

    def __len__(self):
        return len(self.rows)

    def to_csr(self) -> sp.csr_matrix:
        if self._csr is None:
            data, indices, indptr = [], [], [0]
            for row in self.rows:
                for idx, val in row:
                    indices.append(idx)
                    data.append(val)
                indptr.append(len(data))
            self._csr = sp.csr_matrix(
                (np.array(data), np.array(indices, dtype=np.int64),
                 np.array(indptr, dtype=np.int64)),
                shape=(len(self.rows), self.n_features))
        return self._csr


def parse_libsvm(stream) -> Dataset:
    """Parse LIBSVM text ("label idx:val idx:val ...", 1-based indices).

    Appends a constant-1 bias feature and remaps labels to 0..n_classes-1
    in sorted order of the raw label values.
    """
    if isinstance(stream, (str, bytes)):
        lines = (stream.decode() if isinstance(stream, bytes) else stream).splitlines()
    else:
        lines = [ln.decode() if isinstance(ln, bytes) else ln for ln in stream]

    raw_rows, raw_labels = [], []
    max_idx = 0
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        tokens = line.split()
        try:
            label = float(tokens[0])
        except ValueError:
            raise ParseError(f"bad label {tokens[0]!r}", line=lineno)
        feats = []
        prev_idx = 0
        for tok in tokens[1:]:
            if ":" not in tok:
                raise ParseError(f"bad feature token {tok!r}", line=lineno)
            idx_s, val_s = tok.split(":", 1)
            try:
                idx = int(idx_s)
                val = float(val_s)
            except ValueError:
                raise ParseError(f"bad feature token {tok!r}", line=lineno)
            if idx <= prev_idx:
                raise ParseError(f"feature index {idx} not increasing", line=lineno)
            prev_idx = idx
            feats.append((idx, val))
            max_idx = max(max_idx, idx)
        raw_rows.append(feats)
        raw_labels.append(label)

    if not raw_rows:
        raise ParseError("empty dataset")

    classes = sorted(set(raw_labels))
    label_map = {lab: i for i, lab in enumerate(classes)}
    n_raw = max_idx  # highest 1-based raw index; bias gets slot n_raw (0-based)
    rows = []
    for feats in raw_rows:
        row = [(idx - 1, val) for idx, val in feats]
        row.append((n_raw, 1.0))
        rows.append(row)
    labels = np.array([label_map[lab] for lab in raw_labels], dtype=np.int64)
    return Dataset(rows=rows, labels=labels, n_features=n_raw + 1,
                   n_classes=len(classes))


def serialize_libsvm(dataset: Dataset) -> str:
    """Inverse of parse_libsvm on valid datasets (bias feature dropped)."""
    lines = []
    bias = dataset.n_features - 1
    for row, label in zip(dataset.rows, dataset.labels):
        parts = [str(int(label))]
        parts += [f"{idx + 1}:{val:.17g}" for idx, val in row if idx != bias]
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------
# problem families
# ------------------------------------------------------------------

def _sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def build_logreg_problem(dataset: Dataset, constraint_kind: str) -> ProblemSpec:
    """Multi-class logistic regression with per-class norm constraints.

    The objective is the negative cross-entropy under class-wise sigmoids,
    averaged over samples, so that minimization trains the classifier.
    `constraint_kind` is "equality" (per-class squared norm equals 1) or
    "inequality" (at most 1).
    """
    if len(dataset) == 0:
        raise ConfigError("empty dataset")
    if constraint_kind not in ("equality", "inequality"):
        raise ConfigError(f"unknown constraint kind {constraint_kind!r}")

    nf = dataset.n_features
    K = dataset.n_classes
    n = nf * K
    X = dataset.to_csr()
    labels = dataset.labels

    def per_sample_scores(x, i):
        W = x.reshape(K, nf)
        yi = X[i].toarray().ravel()
        return W @ yi, yi

    def objective_eval(x, i):
        a, _ = per_sample_scores(x, i)
        # one-hot label: only the labelled class contributes
        return float(np.logaddexp(0.0, -a[labels[i]]))

    def gradient_eval(x, i):
        a, yi = per_sample_scores(x, i)
        g = np.zeros((K, nf))
        k = labels[i]
        g[k] = (_sigmoid(a[k:k + 1])[0] - 1.0) * yi
        return g.ravel()

    def batch_eval(x, samples):
        idx = np.fromiter(samples, dtype=np.int64, count=len(samples))
        Xs = X[idx]
        W = x.reshape(K, nf)
        A = Xs @ W.T                      # (|S|, K) scores
        lab = labels[idx]
        a_lab = A[np.arange(len(idx)), lab]
        vsum = float(np.sum(np.logaddexp(0.0, -a_lab)))
        coef = _sigmoid(a_lab) - 1.0      # (|S|,)
        gsum = np.zeros((K, nf))
        for k in range(K):
            mask = lab == k
            if np.any(mask):
                gsum[k] = (Xs[mask].T @ coef[mask])
        return vsum, gsum.ravel()

    def batch_stats(x, samples):
        idx = np.fromiter(samples, dtype=np.int64, count=len(samples))
        Xs = X[idx]
        W = x.reshape(K, nf)
        A = Xs @ W.T
        lab = labels[idx]
        a_lab = A[np.arange(len(idx)), lab]
        vsum = float(np.sum(np.logaddexp(0.0, -a_lab)))
        coef = _sigmoid(a_lab) - 1.0
        gsum = np.zeros((K, nf))
        for k in range(K):
            mask = lab == k
            if np.any(mask):
                gsum[k] = (Xs[mask].T @ coef[mask])
        # each per-sample gradient lives in one class block: coef_i * row_i
        row_sq = np.asarray(Xs.multiply(Xs).sum(axis=1)).ravel()
        sqsum = float(np.sum(coef * coef * row_sq))
        return vsum, gsum.ravel(), sqsum

    m = K

    def constraint_eval(x):
        W = x.reshape(K, nf)
        c = np.sum(W * W, axis=1) - 1.0
        if constraint_kind == "equality":
            return c, np.zeros(0)
        return np.zeros(0), c

    def jacobian_eval(x):
        W = x.reshape(K, nf)
        J = np.zeros((K, n))
        for k in range(K):
            J[k, k * nf:(k + 1) * nf] = 2.0 * W[k]
        if constraint_kind == "equality":
            return J, np.zeros((0, n))
        return np.zeros((0, n)), J

    m_E = m if constraint_kind == "equality" else 0
    m_I = m if constraint_kind == "inequality" else 0

    full = SampleSet(tuple(range(len(dataset))))

    def true_value(x):
        vsum, _ = batch_eval(x, full.items)
        return vsum / len(dataset)

    def true_gradient(x):
        _, gsum = batch_eval(x, full.items)
        return gsum / len(dataset)

    return ProblemSpec(
        n=n, m_E=m_E, m_I=m_I, mode=FiniteSum(len(dataset)),
        objective_eval=objective_eval, gradient_eval=gradient_eval,
        constraint_eval=constraint_eval, jacobian_eval=jacobian_eval,
        # start on the constraint boundary: a zero start would zero out the
        # norm-constraint Jacobian and leave the solver without a direction
        x_init=np.full(n, 1.0 / np.sqrt(nf)),
        batch_eval=batch_eval, batch_stats=batch_stats,
        true_value=true_value, true_gradient=true_gradient,
        name=f"logreg-{constraint_kind}")


def build_augmented_problem(value_fn, grad_fn, constraint_eval, jacobian_eval,
                            m_E, m_I, x_init, noise_level,
                            name="augmented") -> ProblemSpec:
    """Expectation-mode problem F(x, xi) = f(x) + xi * ||x - x_init - e||^2
    with xi uniform on [-noise_level, noise_level], so E[F] = f.

    The offset by the all-ones vector keeps the noise term nonzero at the
    starting point.
    """
    if noise_level < 0:
        raise ConfigError("noise_level must be nonnegative")
    x_init = np.asarray(x_init, dtype=float)
    n = x_init.size
    shift = x_init + np.ones(n)

    def sampler(rng, count):
        return tuple(rng.uniform(-noise_level, noise_level, size=count))

    def objective_eval(x, xi):
        d = x - shift
        return value_fn(x) + xi * float(d @ d)

    def gradient_eval(x, xi):
        return grad_fn(x) + 2.0 * xi * (x - shift)

    def batch_eval(x, samples):
        d = x - shift
        dd = float(d @ d)
        s = float(np.sum(np.fromiter(samples, dtype=float, count=len(samples))))
        m = len(samples)
        vsum = m * value_fn(x) + s * dd
        gsum = m * grad_fn(x) + 2.0 * s * d
        return vsum, gsum

    def batch_stats(x, samples):
        d = x - shift
        xi = np.fromiter(samples, dtype=float, count=len(samples))
        m = len(samples)
        g0 = grad_fn(x)
        vsum = m * value_fn(x) + float(np.sum(xi)) * float(d @ d)
        gsum = m * g0 + 2.0 * float(np.sum(xi)) * d
        # ||g0 + 2 xi d||^2 expanded over the sample vector xi
        sqsum = (m * float(g0 @ g0)
                 + 4.0 * float(np.sum(xi)) * float(g0 @ d)
                 + 4.0 * float(np.sum(xi * xi)) * float(d @ d))
        return vsum, gsum, sqsum

    return ProblemSpec(
        n=n, m_E=m_E, m_I=m_I, mode=Expectation(sampler),
        objective_eval=objective_eval, gradient_eval=gradient_eval,
        constraint_eval=constraint_eval, jacobian_eval=jacobian_eval,
        x_init=x_init, batch_eval=batch_eval, batch_stats=batch_stats,
        true_value=value_fn, true_gradient=grad_fn, name=name)
