"""Rate computation for empirical-measure deviations of the reinforced chain.

The rate at a simplex point ``m`` is approximated by a finite-horizon,
discretized version of a discounted control problem: choose piecewise
constant controls ``eta_0..eta_{J-1}`` on ``J`` intervals of width
``delta = T/J``, evolve the state by the exact exponential update

    M_{j+1} = eta_j + e^delta (M_j - eta_j),        M_0 = m,

and minimize ``sum_j w_j R(eta_j || M_j A)`` with discount weights
``w_j = e^{-j delta} - e^{-(j+1) delta}``.  The state must stay in the
simplex, which is equivalent to the componentwise cap
``eta_j <= e^delta / (e^delta - 1) * M_j``.

The best value found is reported as ``lower``; adding the discounted tail
allowance ``e^{-T} log(1/delta0)`` (the cost of freezing the trajectory
after ``T``) gives ``upper``.  A separate occupation-measure formulation,
``solve_dv_rate``, computes the pair-measure rate by iterative proportional
fitting and is exposed for cross-checks.

Numerics worth knowing about:

* the forward recursion is evaluated in difference form
  ``D_{j+1} = (eta_j - eta_{j+1}) + e^delta D_j`` with ``D_j = M_j - eta_j``
  (a first-order linear filter), which keeps equilibria exact in floating
  point;
* each node is then nudged along the all-ones direction so its sum is
  exactly 1 -- without this, rounding grows like ``e^T`` through the
  unstable forward dynamics; the adjoint differentiates the corrected map.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.signal import lfilter
from scipy.special import rel_entr

from .errors import (
    ConvergenceError,
    DimensionMismatch,
    InfeasibleTrajectory,
    PreconditionViolation,
)
from .measures import Kernel, ProbVec

FEASIBILITY_ATOL = 1e-9      # node entries below -this mark the node infeasible
BOUNDARY_LIFT = 1e-9         # queried m entries below this are lifted
_LOG_TINY = 1e-300           # floor inside log() at the simplex boundary


@dataclass(frozen=True, eq=False)
class PiecewiseControl:
    """A control that is constant on each of ``J`` intervals of ``[0, T]``."""

    T: float
    J: int
    eta: np.ndarray

    def __post_init__(self):
        eta = np.asarray(self.eta, dtype=float)
        if eta.ndim != 2 or eta.shape[0] != self.J:
            raise DimensionMismatch(f"PiecewiseControl: eta shape {eta.shape} does not match J={self.J}")
        if not (self.T > 0 and self.J >= 1):
            raise PreconditionViolation("PiecewiseControl: need T > 0 and J >= 1")

    @property
    def delta(self) -> float:
        return self.T / self.J

    @property
    def d(self) -> int:
        return int(self.eta.shape[1])


@dataclass(frozen=True, eq=False)
class TrajectoryGrid:
    """Node values ``M_0..M_J`` of the controlled flow, with feasibility flags."""

    M: np.ndarray
    feasible: np.ndarray

    @property
    def all_feasible(self) -> bool:
        return bool(self.feasible.all())

    def node(self, j: int) -> ProbVec:
        return ProbVec(self.M[j])


@dataclass(frozen=True)
class SolveOptions:
    tol: float = 1e-8
    max_iters: int = 5000
    armijo_slope: float = 1e-4
    step_init: float = 1.0
    step_shrink: float = 0.5
    step_min: float = 1e-14
    dykstra_iters: int = 100


@dataclass(frozen=True)
class SolveDiagnostics:
    iterations: int
    grad_norm: float
    converged: bool
    stalled: bool
    binding: bool
    boundary_lifted: bool


@dataclass(frozen=True, eq=False)
class RateBracket:
    lower: float
    upper: float
    eta_opt: PiecewiseControl
    M_opt: TrajectoryGrid
    diagnostics: SolveDiagnostics


# ---------------------------------------------------------------------------
# forward flow, cost, gradient


def _forward_nodes(m: np.ndarray, eta: np.ndarray, e_delta: float) -> np.ndarray:
    """Nodes M_0..M_J of the exponential update, sum-corrected per node."""
    J, d = eta.shape
    D0 = m - eta[0]
    if J > 1:
        x = eta[:-1] - eta[1:]
        D_rest = lfilter([1.0], [1.0, -e_delta], x, axis=0, zi=(e_delta * D0)[None, :])[0]
        D = np.vstack([D0[None, :], D_rest])
    else:
        D = D0[None, :]
    M = np.empty((J + 1, d))
    M[0] = m
    M[1:] = eta + e_delta * D
    M[1:] -= ((M[1:].sum(axis=1) - 1.0) / d)[:, None]
    return M


def integrate_forward(m, ctrl: PiecewiseControl) -> TrajectoryGrid:
    """Evolve ``m`` under ``ctrl``; flags mark nodes pushed out of the simplex."""
    m_arr = m.weights if isinstance(m, ProbVec) else np.asarray(m, dtype=float)
    if m_arr.size != ctrl.d:
        raise DimensionMismatch("integrate_forward: dimension mismatch between m and control")
    M = _forward_nodes(m_arr, np.asarray(ctrl.eta, dtype=float), math.exp(ctrl.delta))
    feasible = M.min(axis=1) >= -FEASIBILITY_ATOL
    M.flags.writeable = False
    feasible.flags.writeable = False
    return TrajectoryGrid(M=M, feasible=feasible)


def _weights_vector(T: float, J: int) -> np.ndarray:
    delta = T / J
    return np.exp(-delta * np.arange(J)) * (-np.expm1(-delta))


def _cost_value(eta: np.ndarray, M: np.ndarray, Amat: np.ndarray, w: np.ndarray) -> float:
    K = M[:-1] @ Amat
    return float(w @ rel_entr(eta, K).sum(axis=1))


def discounted_cost(m, ctrl: PiecewiseControl, A: Kernel) -> float:
    """Discounted running cost of a feasible control."""
    grid = integrate_forward(m, ctrl)
    if not grid.all_feasible:
        bad = int(np.argmin(grid.feasible))
        raise InfeasibleTrajectory(f"discounted_cost: node {bad} leaves the simplex")
    w = _weights_vector(ctrl.T, ctrl.J)
    val = _cost_value(np.asarray(ctrl.eta, dtype=float), grid.M, A.matrix, w)
    if not np.isfinite(val):
        raise InfeasibleTrajectory("discounted_cost: non-finite cost")
    return val


def _cost_gradient_raw(
    eta: np.ndarray, M: np.ndarray, Amat: np.ndarray, w: np.ndarray, e_delta: float
) -> np.ndarray:
    """Gradient of the discretized cost wrt the raw control entries.

    Differentiates exactly the implemented forward map, including the
    per-node sum correction (reflected by centering the state partials).
    """
    J, d = eta.shape
    K = M[:-1] @ Amat
    ratio = eta / K
    xi = -(ratio @ Amat.T) * w[:, None]
    xi -= xi.mean(axis=1, keepdims=True)          # sum-correction adjoint
    lam = lfilter([1.0], [1.0, -e_delta], xi[::-1], axis=0)[::-1]
    lam_next = np.vstack([lam[1:], np.zeros((1, d))])
    direct = w[:, None] * (np.log(np.maximum(eta, _LOG_TINY) / K) + 1.0)
    return direct + (1.0 - e_delta) * lam_next


def cost_gradient(m, ctrl: PiecewiseControl, A: Kernel) -> np.ndarray:
    """Adjoint gradient of :func:`discounted_cost` wrt every control entry.

    Requires a strictly interior control; the entropy gradient is unbounded
    on the simplex boundary.
    """
    eta = np.asarray(ctrl.eta, dtype=float)
    if eta.min() <= 0.0:
        raise PreconditionViolation("cost_gradient: control must be strictly positive")
    grid = integrate_forward(m, ctrl)
    if not grid.all_feasible:
        raise InfeasibleTrajectory("cost_gradient: trajectory leaves the simplex")
    w = _weights_vector(ctrl.T, ctrl.J)
    return _cost_gradient_raw(eta, grid.M, A.matrix, w, math.exp(ctrl.delta))


# ---------------------------------------------------------------------------
# projections


def simplex_project_rows(V: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row onto the simplex (sort and threshold)."""
    V = np.asarray(V, dtype=float)
    J, d = V.shape
    u = -np.sort(-V, axis=1)
    css = np.cumsum(u, axis=1)
    ar = np.arange(1, d + 1)
    rho = (u + (1.0 - css) / ar > 0.0).sum(axis=1)
    tau = (css[np.arange(J), rho - 1] - 1.0) / rho
    return np.maximum(V - tau[:, None], 0.0)


def _dykstra_simplex_box(v, cap, iters: int) -> list:
    """Projection onto {simplex} intersect {0 <= x <= cap} by Dykstra's method.

    Pure-scalar inner loop: rows are short and this sits inside the line
    search, where array-op dispatch used to dominate the solve time.
    """
    d = len(v)
    x = [float(t) for t in v]
    box = [float(t) for t in cap]
    p = [0.0] * d
    q = [0.0] * d
    for _ in range(iters):
        z = [x[i] + p[i] for i in range(d)]
        u = sorted(z, reverse=True)
        css = 0.0
        tau = 0.0
        for k in range(d):
            css += u[k]
            t = (css - 1.0) / (k + 1)
            if u[k] - t > 0.0:
                tau = t
        y = [z[i] - tau for i in range(d)]
        done = True
        for i in range(d):
            yi = y[i] if y[i] > 0.0 else 0.0
            y[i] = yi
            p[i] = z[i] - yi
            s = yi + q[i]
            xi = 0.0 if s < 0.0 else (box[i] if s > box[i] else s)
            q[i] = s - xi
            if abs(xi - yi) > 1e-15:
                done = False
            x[i] = xi
        if done:
            break
    return x


def project_control(m: np.ndarray, raw: np.ndarray, T: float, dykstra_iters: int = 100) -> np.ndarray:
    """Map a raw control onto the feasible set (simplex rows, trajectory caps).

    Rows are first projected onto the simplex in one vectorized pass; if any
    row then exceeds its trajectory cap ``e^delta/(e^delta - 1) * M_j``, the
    tail is repaired sequentially, each row projected onto simplex-and-box
    with the cap of the repaired prefix trajectory.
    """
    J, d = raw.shape
    delta = T / J
    e_delta = math.exp(delta)
    cap_factor = e_delta / (e_delta - 1.0)
    eta = simplex_project_rows(raw)
    M = _forward_nodes(m, eta, e_delta)
    cap = cap_factor * np.maximum(M[:-1], 0.0)
    viol = (eta > cap + 1e-15).any(axis=1)
    if not viol.any():
        return eta
    j0 = int(np.argmax(viol))
    rows = eta[j0:].tolist()
    Mj = [float(t) for t in M[j0]]
    for row in rows:
        cap_j = [cap_factor * t if t > 0.0 else 0.0 for t in Mj]
        if any(row[i] > cap_j[i] + 1e-15 for i in range(d)):
            row[:] = _dykstra_simplex_box(row, cap_j, dykstra_iters)
        s = 0.0
        for i in range(d):
            Mj[i] = row[i] + e_delta * (Mj[i] - row[i])
            s += Mj[i]
        corr = (s - 1.0) / d
        for i in range(d):
            Mj[i] -= corr
    eta[j0:] = rows
    return eta


# ---------------------------------------------------------------------------
# the solver


def _lift_boundary(m) -> tuple[np.ndarray, bool]:
    w = m.weights if isinstance(m, ProbVec) else np.array(m, dtype=float)
    if w.min() >= BOUNDARY_LIFT:
        return w.copy(), False
    lifted = np.maximum(w, BOUNDARY_LIFT)
    return lifted / lifted.sum(), True


def solve_rate(
    m,
    A: Kernel,
    T: float = 14.0,
    J: int | None = None,
    opts: SolveOptions | None = None,
) -> RateBracket:
    """Minimize the discretized discounted cost from ``m`` by projected
    gradient descent with Armijo backtracking.

    Returns the bracket ``[lower, lower + e^{-T} log(1/delta0)]`` along with
    the best control found and solve diagnostics.  Queried points on (or
    numerically at) the simplex boundary are lifted inward by ``1e-9`` and
    renormalized, recorded in ``diagnostics.boundary_lifted``.
    """
    opts = opts or SolveOptions()
    if J is None:
        J = max(1, int(round(20 * T)))
    if not (T > 0 and J >= 1):
        raise PreconditionViolation("solve_rate: need T > 0 and J >= 1")
    m_arr, lifted = _lift_boundary(m)
    d = m_arr.size
    if d != A.d:
        raise DimensionMismatch("solve_rate: m and A dimensions differ")
    delta = T / J
    e_delta = math.exp(delta)
    cap_factor = e_delta / (e_delta - 1.0)
    w = _weights_vector(T, J)
    Amat = A.matrix

    def cost_of(eta):
        M = _forward_nodes(m_arr, eta, e_delta)
        c = _cost_value(eta, M, Amat, w)
        return c, M

    eta = np.tile(m_arr, (J, 1))
    cost, M = cost_of(eta)
    if not np.isfinite(cost):
        raise ConvergenceError("solve_rate: non-finite cost at the initializer")
    grad_norm = math.inf
    converged = False
    stalled = False
    iterations = 0
    for iterations in range(1, opts.max_iters + 1):
        g = _cost_gradient_raw(eta, M, Amat, w, e_delta)
        cand_unit = project_control(m_arr, eta - g, T, opts.dykstra_iters)
        grad_norm = float(np.sqrt(((eta - cand_unit) ** 2).sum()))
        if grad_norm <= opts.tol:
            converged = True
            break
        step = opts.step_init
        accepted = False
        while step >= opts.step_min:
            cand = cand_unit if step == opts.step_init == 1.0 else project_control(
                m_arr, eta - step * g, T, opts.dykstra_iters
            )
            descent = float((g * (cand - eta)).sum())
            if descent < 0.0:
                cand_cost, cand_M = cost_of(cand)
                if np.isnan(cand_cost):
                    raise ConvergenceError("solve_rate: cost became NaN during line search")
                if cand_cost <= cost + opts.armijo_slope * descent:
                    eta, cost, M = cand, cand_cost, cand_M
                    accepted = True
                    break
            step *= opts.step_shrink
        if not accepted:
            stalled = True
            break
    cap = cap_factor * np.maximum(M[:-1], 0.0)
    binding = bool((eta >= cap - 1e-12).any())
    lower = max(float(cost), 0.0)
    upper = lower + math.exp(-T) * math.log(1.0 / A.delta0)
    ctrl = PiecewiseControl(T=T, J=J, eta=eta)
    feasible = M.min(axis=1) >= -FEASIBILITY_ATOL
    diag = SolveDiagnostics(
        iterations=iterations,
        grad_norm=grad_norm,
        converged=converged,
        stalled=stalled,
        binding=binding,
        boundary_lifted=lifted,
    )
    return RateBracket(
        lower=lower,
        upper=upper,
        eta_opt=ctrl,
        M_opt=TrajectoryGrid(M=M, feasible=feasible),
        diagnostics=diag,
    )


# ---------------------------------------------------------------------------
# pair-measure (occupation) rate


def solve_dv_rate(theta, A: Kernel, tol: float = 1e-12, max_iters: int = 100000) -> float:
    """Rate of the stationary-pair formulation at ``theta``.

    Minimizes ``R(gamma || theta (x) A)`` over pair measures whose two
    marginals both equal ``theta``, by iterative proportional fitting
    restricted to the support of ``theta``.
    """
    th = theta.weights if isinstance(theta, ProbVec) else np.asarray(theta, dtype=float)
    if th.size != A.d:
        raise DimensionMismatch("solve_dv_rate: theta and A dimensions differ")
    support = th > 0.0
    sub = th[support]
    ref = sub[:, None] * A.matrix[np.ix_(support, support)]
    gamma = ref.copy()
    for _ in range(max_iters):
        gamma *= (sub / gamma.sum(axis=1))[:, None]
        col = gamma.sum(axis=0)
        err = float(np.abs(col - sub).sum())
        if err <= tol:
            break
        gamma *= (sub / col)[None, :]
    else:
        raise ConvergenceError(f"solve_dv_rate: marginal error {err:.3e} > {tol} after {max_iters} sweeps")
    return float(rel_entr(gamma, ref).sum())


# ---------------------------------------------------------------------------
# profiles over many query points


@dataclass(frozen=True)
class RateProfileRow:
    m: tuple
    lower: float
    upper: float
    dv_rate: float
    iterations: int
    grad_norm: float
    boundary_lifted: bool
    binding: bool


def _profile_one(task) -> RateProfileRow:
    A, m, T, J, opts, dv = task
    bracket = solve_rate(m, A, T=T, J=J, opts=opts)
    dv_rate = solve_dv_rate(m, A) if dv else math.nan
    return RateProfileRow(
        m=tuple(float(v) for v in np.asarray(m, dtype=float)),
        lower=bracket.lower,
        upper=bracket.upper,
        dv_rate=dv_rate,
        iterations=bracket.diagnostics.iterations,
        grad_norm=bracket.diagnostics.grad_norm,
        boundary_lifted=bracket.diagnostics.boundary_lifted,
        binding=bracket.diagnostics.binding,
    )


def rate_profile(
    A: Kernel,
    ms,
    T: float = 14.0,
    J: int | None = None,
    opts: SolveOptions | None = None,
    dv: bool = True,
    threads: int = 1,
) -> list[RateProfileRow]:
    """Solve many query points; results are ordered like the input
    regardless of the worker pool size."""
    tasks = [(A, np.asarray(m.weights if isinstance(m, ProbVec) else m, dtype=float), T, J, opts, dv) for m in ms]
    if threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(_profile_one, tasks, chunksize=1))
    return [_profile_one(t) for t in tasks]


def simplex_mesh(d: int, step: float) -> list[np.ndarray]:
    """Lattice points of the simplex with spacing ``step`` (1/step integer),
    boundary included, in lexicographic order."""
    K = int(round(1.0 / step))
    if abs(K * step - 1.0) > 1e-9 or K < 1:
        raise PreconditionViolation(f"simplex_mesh: 1/step must be an integer, got step={step!r}")

    out: list[np.ndarray] = []

    def rec(prefix, remaining, slots):
        if slots == 1:
            out.append(np.array(prefix + [remaining], dtype=float) / K)
            return
        for v in range(remaining + 1):
            rec(prefix + [v], remaining - v, slots - 1)

    rec([], K, d)
    return out
