"""Nonlinear least-squares machinery shared by all calibration stages.

Levenberg-Marquardt over manifold-valued variable blocks with per-factor
robust kernels, a deterministic DIRECT (dividing rectangles) global search,
and a finite-difference Jacobian checker.

Factor protocol (duck-typed): a factor exposes

* ``keys`` -- tuple of variable keys it touches,
* ``linearize(values) -> (res, sigma, jacs)`` where ``res`` is (N, D) raw
  residuals, ``sigma`` is (N, D, D) covariances (or ``None`` for identity)
  and ``jacs`` maps a key to its (N, D, 6) raw Jacobian,
* ``cost_terms(values) -> (res, sigma)`` the same without Jacobians,
* ``residual_raw(values) -> (N, D)`` residuals alone (finite differences),
* ``robust`` -- a :class:`RobustKernel` or ``None`` for quadratic loss.

The covariance is re-evaluated at each linearization point but treated as
locally constant (its derivative is not propagated), the standard treatment
for distribution-to-distribution matching costs.

All Jacobians are with respect to a right-multiplicative perturbation
``T <- T * exp(delta)`` of the owning block, matching the solver update.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import (
    DegenerateGeometryError,
    NonFiniteObjectiveError,
    NumericalFailureError,
    UnconstrainedVariableError,
)
from .se3 import RigidTransform, exp_map


@dataclass
class VariableBlock:
    kind: str  # "pose" | "extrinsic"
    value: RigidTransform
    fixed: bool = False


@dataclass(frozen=True)
class RobustKernel:
    """Huber loss: rho(r) = r^2 inside delta, 2*delta*r - delta^2 outside."""

    delta: float

    def __post_init__(self):
        if self.delta <= 0.0:
            raise ValueError("Huber delta must be positive")


def huber_weight(residual_norm: float, delta: float) -> tuple[float, float]:
    """(rho, IRLS weight rho'(r) / (2 r)) with weight(0) = 1."""
    if residual_norm < 0.0 or delta <= 0.0:
        raise ValueError("need residual_norm >= 0 and delta > 0")
    if residual_norm <= delta:
        return residual_norm * residual_norm, 1.0
    return 2.0 * delta * residual_norm - delta * delta, delta / residual_norm


@dataclass
class SolverReport:
    iterations: int
    initial_cost: float
    final_cost: float
    converged: bool
    termination_reason: str


class Problem:
    """Variable blocks plus residual factors."""

    def __init__(self):
        self.variables: dict = {}
        self.factors: list = []

    def add_variable(self, key, value: RigidTransform, kind: str = "pose", fixed: bool = False):
        self.variables[key] = VariableBlock(kind=kind, value=value, fixed=fixed)

    def add_factor(self, factor):
        self.factors.append(factor)

    def values(self) -> dict:
        return {k: v.value for k, v in self.variables.items()}

    def free_keys(self) -> list:
        return [k for k, v in self.variables.items() if not v.fixed]


def _factor_cost(factor, values) -> float:
    res, sigma = factor.cost_terms(values)
    res = np.atleast_2d(res)
    delta = factor.robust.delta if factor.robust is not None else 0.0
    if res.shape[1] == 3 and sigma is not None:
        return float(_kernels.mahalanobis_costs(res, sigma, delta).sum())
    if sigma is None:
        r2 = np.einsum("ni,ni->n", res, res)
    else:
        x = np.linalg.solve(sigma, res[:, :, None])[:, :, 0]
        r2 = np.einsum("ni,ni->n", res, x)
    r2 = np.maximum(r2, 0.0)
    if delta <= 0.0:
        return float(r2.sum())
    r = np.sqrt(r2)
    return float(np.where(r <= delta, r2, 2.0 * delta * r - delta * delta).sum())


def total_cost(problem: Problem, values=None) -> float:
    values = values if values is not None else problem.values()
    return sum(_factor_cost(f, values) for f in problem.factors)


def _accumulate(factor, values, slots, h, g) -> float:
    """Add this factor's weighted Gauss-Newton terms into (h, g); returns cost."""
    res, sigma, jacs = factor.linearize(values)
    res = np.atleast_2d(res)
    n, dim = res.shape
    free = [k for k in factor.keys if k in slots]
    sig = sigma if sigma is not None else np.broadcast_to(np.eye(dim), (n, dim, dim))
    delta = factor.robust.delta if factor.robust is not None else 0.0
    if not free:
        # nothing to accumulate, but the cost still counts
        if dim == 3:
            return float(_kernels.mahalanobis_costs(res, sig, delta).sum())
        _, _, cost, _ = _dense_normal_equations(res, sig, np.zeros((n, dim, 0)), delta)
        return cost
    jstack = np.concatenate([jacs[k] for k in free], axis=2)  # (N, D, 6F)
    if dim == 3:
        hl, gl, cost, _ = _kernels.robust_normal_equations(res, sig, jstack, delta)
    else:
        hl, gl, cost, _ = _dense_normal_equations(res, sig, jstack, delta)
    for a, ka in enumerate(free):
        sa = slots[ka]
        g[sa : sa + 6] += gl[6 * a : 6 * a + 6]
        for b, kb in enumerate(free):
            sb = slots[kb]
            h[sa : sa + 6, sb : sb + 6] += hl[6 * a : 6 * a + 6, 6 * b : 6 * b + 6]
    return cost


def _dense_normal_equations(res, sigma, jstack, delta):
    """Generic-dimension path for the 6-vector factors (small counts)."""
    x = np.linalg.solve(sigma, res[:, :, None])[:, :, 0]
    r2 = np.maximum(np.einsum("ni,ni->n", res, x), 0.0)
    r = np.sqrt(r2)
    if delta > 0.0:
        w = np.where(r <= delta, 1.0, delta / np.maximum(r, 1e-300))
        cost = float(np.where(r <= delta, r2, 2.0 * delta * r - delta * delta).sum())
    else:
        w = np.ones(len(r))
        cost = float(r2.sum())
    y = np.linalg.solve(sigma, jstack)
    h = np.einsum("nik,nil->kl", jstack, y * w[:, None, None])
    g = np.einsum("nik,ni->k", jstack, x * w[:, None])
    return h, g, cost, r


def lm_minimize(
    problem: Problem,
    max_iterations: int = 100,
    cost_tolerance: float = 1e-9,
    gradient_tolerance: float = 1e-10,
    initial_lambda: float = 1e-4,
    condition_limit: float | None = None,
) -> SolverReport:
    """Levenberg-Marquardt with right-multiplicative manifold updates.

    Accepted steps never increase the robustified cost; terminates on
    relative cost change, gradient norm, or the iteration cap.  When
    ``condition_limit`` is set, the undamped normal equations of the first
    iteration are checked and DegenerateGeometryError is raised beyond it.
    """
    free = problem.free_keys()
    touched = set()
    for f in problem.factors:
        touched.update(f.keys)
    for k in free:
        if k not in touched:
            raise UnconstrainedVariableError(f"variable {k!r} has no factor")

    values = problem.values()
    cost = total_cost(problem, values)
    if not math.isfinite(cost):
        raise NumericalFailureError("non-finite initial cost")
    initial_cost = cost

    if not free:
        return SolverReport(0, initial_cost, cost, True, "all_variables_fixed")

    slots = {k: 6 * i for i, k in enumerate(free)}
    dim = 6 * len(free)
    lam = initial_lambda
    iterations = 0
    reason = "max_iterations"
    converged = False

    first = True
    for _ in range(max_iterations):
        h = np.zeros((dim, dim))
        g = np.zeros(dim)
        lin_cost = 0.0
        for f in problem.factors:
            lin_cost += _accumulate(f, values, slots, h, g)
        if not (np.all(np.isfinite(h)) and np.all(np.isfinite(g))):
            raise NumericalFailureError("non-finite normal equations")
        cost = lin_cost
        if first and condition_limit is not None:
            eig = np.linalg.eigvalsh(h)
            cond = float(eig[-1] / eig[0]) if eig[0] > 0.0 else math.inf
            if cond > condition_limit:
                raise DegenerateGeometryError(
                    f"normal equations condition {cond:.3e} exceeds {condition_limit:.1e}"
                )
        first = False

        if float(np.abs(g).max()) < gradient_tolerance:
            reason, converged = "gradient_tolerance", True
            break

        diag = np.maximum(np.diag(h), 1e-12)
        accepted = False
        for _try in range(16):
            try:
                step = np.linalg.solve(h + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            if not np.all(np.isfinite(step)):
                raise NumericalFailureError("non-finite step")
            trial = dict(values)
            for k in free:
                s = slots[k]
                trial[k] = values[k] @ exp_map(step[s : s + 6])
            trial_cost = total_cost(problem, trial)
            if not math.isfinite(trial_cost):
                raise NumericalFailureError("non-finite trial cost")
            if trial_cost < cost:
                values = trial
                lam = max(lam * 0.5, 1e-12)
                accepted = True
                iterations += 1
                rel_change = (cost - trial_cost) / max(cost, 1e-300)
                cost = trial_cost
                if rel_change < cost_tolerance:
                    reason, converged = "cost_tolerance", True
                break
            lam *= 10.0
        if not accepted:
            reason, converged = "no_progress", True
            break
        if converged:
            break

    for k in free:
        problem.variables[k].value = values[k]
    return SolverReport(iterations, initial_cost, cost, converged, reason)


def check_jacobian(factor, values: dict, step: float = 1e-6) -> float:
    """Max relative error between analytic and central finite-difference
    Jacobians of the raw residual, |analytic - numeric| / max(1, |numeric|)."""
    _, _, jacs = factor.linearize(values)
    worst = 0.0
    for key in factor.keys:
        if key not in jacs:
            continue
        analytic = np.atleast_3d(jacs[key])
        base = values[key]
        for i in range(6):
            e = np.zeros(6)
            e[i] = step
            vp = dict(values)
            vp[key] = base @ exp_map(e)
            vm = dict(values)
            vm[key] = base @ exp_map(-e)
            num = (
                np.atleast_2d(factor.residual_raw(vp))
                - np.atleast_2d(factor.residual_raw(vm))
            ) / (2.0 * step)
            err = np.abs(analytic[:, :, i] - num) / np.maximum(1.0, np.abs(num))
            worst = max(worst, float(err.max()))
    return worst


# ---------------------------------------------------------------------------
# DIRECT global search


@dataclass
class SearchSpace:
    lower: np.ndarray
    upper: np.ndarray
    max_evaluations: int = 2000
    max_iterations: int = 200

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float).reshape(-1)
        self.upper = np.asarray(self.upper, dtype=float).reshape(-1)
        if len(self.lower) != len(self.upper) or np.any(self.lower >= self.upper):
            raise ValueError("need lower < upper elementwise")


@dataclass
class DirectResult:
    argmin: np.ndarray
    value: float
    evaluations: int


class _Rect:
    __slots__ = ("center", "levels", "value", "index")

    def __init__(self, center, levels, value, index):
        self.center = center
        self.levels = levels
        self.value = value
        self.index = index

    def measure(self) -> float:
        return 0.5 * math.sqrt(float(np.sum(3.0 ** (-2.0 * self.levels))))


def direct_search(objective, space: SearchSpace) -> DirectResult:
    """Deterministic DIRECT: potentially-optimal rectangles are the lower
    convex hull of (measure, value) candidates; ties break toward lower
    value, then lower insertion index; trisection along the longest sides."""
    lower, upper = space.lower, space.upper
    span = upper - lower
    ndim = len(lower)

    evals = 0

    def f(unit_x):
        nonlocal evals
        val = float(objective(lower + unit_x * span))
        evals += 1
        if not math.isfinite(val):
            raise NonFiniteObjectiveError(f"objective not finite at {lower + unit_x * span}")
        return val

    center = np.full(ndim, 0.5)
    rects = [_Rect(center, np.zeros(ndim), f(center), 0)]
    best_x, best_v = center.copy(), rects[0].value
    next_index = 1

    for _ in range(space.max_iterations):
        if evals >= space.max_evaluations:
            break
        optimal = _potentially_optimal(rects)
        progressed = False
        for rect in optimal:
            if evals >= space.max_evaluations:
                break
            min_level = rect.levels.min()
            dims = [i for i in range(ndim) if rect.levels[i] == min_level]
            offset = 3.0 ** (-(min_level + 1.0))
            samples = []
            for i in dims:
                lo = rect.center.copy()
                lo[i] -= offset
                hi = rect.center.copy()
                hi[i] += offset
                flo, fhi = f(lo), f(hi)
                samples.append((min(flo, fhi), i, lo, flo, hi, fhi))
                for val, x in ((flo, lo), (fhi, hi)):
                    if val < best_v:
                        best_v, best_x = val, x.copy()
            samples.sort(key=lambda s: (s[0], s[1]))
            levels = rect.levels.copy()
            for _, i, lo, flo, hi, fhi in samples:
                levels = levels.copy()
                levels[i] += 1.0
                rects.append(_Rect(lo, levels.copy(), flo, next_index))
                next_index += 1
                rects.append(_Rect(hi, levels.copy(), fhi, next_index))
                next_index += 1
            rect.levels = levels
            progressed = True
        if not progressed:
            break

    return DirectResult(argmin=lower + best_x * span, value=best_v, evaluations=evals)


def _potentially_optimal(rects):
    by_measure: dict[float, _Rect] = {}
    for r in rects:
        m = round(r.measure(), 12)
        cur = by_measure.get(m)
        if cur is None or (r.value, r.index) < (cur.value, cur.index):
            by_measure[m] = r
    candidates = sorted(by_measure.items())  # ascending measure
    values = [c[1].value for c in candidates]
    start = int(np.argmin(values))  # global best; earlier (smaller) rects are never optimal
    pts = candidates[start:]
    hull = []
    for m, r in pts:
        while len(hull) >= 2:
            (m1, r1), (m2, r2) = hull[-2], hull[-1]
            # keep the lower-right hull: drop r2 if it lies above segment r1->r
            if (r2.value - r1.value) * (m - m1) >= (r.value - r1.value) * (m2 - m1):
                hull.pop()
            else:
                break
        hull.append((m, r))
    return [r for _, r in hull]
