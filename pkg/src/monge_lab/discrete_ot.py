"""Discrete optimal transport between weighted point clouds.

Three solver families, in increasing looseness:

- ``exact_assignment``: Hungarian (Jonker-Volgenant shortest augmenting
  path) for equal-size uniform clouds.  The in-package JV solver also
  yields dual potentials; for large instances the matching is delegated to
  scipy's C implementation of the same algorithm family.
- ``sinkhorn``: entropic regularization in the log domain with an
  epsilon-scaling ladder (start at the median cost, halve to the target).
- ``l2_regularized_dual``: quadratic-penalty dual ascent, the discrete
  analogue of the penalty used by the adversarial trainer.

Costs default to the quadratic family c(x, y) = |x - y|^p / p with p = 2.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from .datasets import EmpiricalMeasure
from .errors import NonConvergenceError, NumericalError

# instances up to this size use the in-package JV solver (which also
# produces dual potentials); larger ones go to scipy for speed
_JV_MAX_N = 256


@dataclass(frozen=True)
class CostSpec:
    """Ground cost c(x, y) = |x - y|^p / p."""

    p: float = 2.0

    def __post_init__(self):
        if self.p < 1.0:
            raise ValueError("cost exponent p must be >= 1")


def cost_matrix(x: np.ndarray, y: np.ndarray, cost: CostSpec = CostSpec()) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    sq = (np.sum(x * x, axis=1)[:, None] + np.sum(y * y, axis=1)[None, :]
          - 2.0 * x @ y.T)
    np.clip(sq, 0.0, None, out=sq)
    if cost.p == 2.0:
        return 0.5 * sq
    return np.sqrt(sq) ** cost.p / cost.p


@dataclass
class TransportPlan:
    """Coupling between two empirical measures.

    ``cost_value`` is the mass-weighted transport cost sum_ij pi_ij c_ij,
    so for the quadratic cost it equals W_2^2 / 2 at the optimum.
    ``marginal_tol`` records the accuracy the producing solver guarantees;
    construction fails if the coupling is sloppier than that.
    """

    coupling: np.ndarray
    source: EmpiricalMeasure
    target: EmpiricalMeasure
    cost_value: float
    marginal_tol: float = 1e-8
    matching: np.ndarray | None = None  # column index per row, if a permutation

    def __post_init__(self):
        self.coupling = np.asarray(self.coupling, dtype=np.float64)
        n, m = self.source.n, self.target.n
        if self.coupling.shape != (n, m):
            raise ValueError(f"coupling shape {self.coupling.shape} != ({n}, {m})")
        if np.any(self.coupling < 0):
            raise ValueError("coupling must be nonnegative")
        if self.marginal_violation() > self.marginal_tol:
            raise ValueError(
                f"coupling marginals violate tolerance: "
                f"{self.marginal_violation():.3e} > {self.marginal_tol:.1e}")

    def marginal_violation(self) -> float:
        row = np.abs(self.coupling.sum(axis=1) - self.source.weights).max()
        col = np.abs(self.coupling.sum(axis=0) - self.target.weights).max()
        return float(max(row, col))

    def to_csv(self, path) -> None:
        """Sparse triplet export: one ``i,j,mass`` row per nonzero entry."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["i", "j", "mass"])
            rows, cols = np.nonzero(self.coupling)
            for i, j in zip(rows, cols):
                writer.writerow([int(i), int(j), repr(float(self.coupling[i, j]))])


@dataclass
class DiscretePotentials:
    """Dual variables phi (source side) and psi (target side)."""

    phi: np.ndarray
    psi: np.ndarray

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=np.float64)
        self.psi = np.asarray(self.psi, dtype=np.float64)

    def dual_value(self, a: EmpiricalMeasure, b: EmpiricalMeasure) -> float:
        return float(a.weights @ self.phi + b.weights @ self.psi)

    def feasibility_violation(self, cost: np.ndarray) -> float:
        """max_ij (phi_i + psi_j - c_ij); <= 0 means dual-feasible."""
        return float((self.phi[:, None] + self.psi[None, :] - cost).max())


# ---------------------------------------------------------------------------
# exact assignment
# ---------------------------------------------------------------------------

def _jv_assignment(cost: np.ndarray):
    """Jonker-Volgenant shortest augmenting paths on a square cost matrix.

    Returns (col_for_row, u, v) where u, v are dual potentials satisfying
    u_i + v_j <= c_ij with equality on matched pairs.
    """
    n = cost.shape[0]
    a = np.zeros((n + 1, n + 1))
    a[1:, 1:] = cost
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)      # row matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            cur = a[i0] - u[i0] - v
            improved = free & (cur < minv)
            way[improved] = j0
            minv[improved] = cur[improved]
            masked = np.where(free, minv, np.inf)
            j1 = int(np.argmin(masked))
            delta = masked[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_for_row = np.zeros(n, dtype=np.int64)
    for j in range(1, n + 1):
        col_for_row[p[j] - 1] = j - 1
    return col_for_row, u[1:], v[1:]


def _assignment_indices(cost: np.ndarray, method: str = "auto") -> np.ndarray:
    n = cost.shape[0]
    if method == "jv" or (method == "auto" and n <= _JV_MAX_N):
        return _jv_assignment(cost)[0]
    rows, cols = linear_sum_assignment(cost)
    out = np.empty(n, dtype=np.int64)
    out[rows] = cols
    return out


def _require_uniform_equal(a: EmpiricalMeasure, b: EmpiricalMeasure) -> None:
    if a.n != b.n:
        raise ValueError(
            f"exact assignment needs equal point counts, got {a.n} and {b.n}")
    uniform = np.full(a.n, 1.0 / a.n)
    if (np.abs(a.weights - uniform).max() > 1e-12
            or np.abs(b.weights - uniform).max() > 1e-12):
        raise ValueError("exact assignment needs uniform weights on both sides")


def exact_assignment(a: EmpiricalMeasure, b: EmpiricalMeasure,
                     cost: CostSpec = CostSpec(), method: str = "auto") -> TransportPlan:
    """Optimal one-to-one matching between equal-size uniform clouds."""
    _require_uniform_equal(a, b)
    C = cost_matrix(a.points, b.points, cost)
    col_for_row = _assignment_indices(C, method)
    n = a.n
    coupling = np.zeros((n, n))
    coupling[np.arange(n), col_for_row] = 1.0 / n
    cost_value = float(C[np.arange(n), col_for_row].mean())
    return TransportPlan(coupling, a, b, cost_value, matching=col_for_row)


def assignment_potentials(a: EmpiricalMeasure, b: EmpiricalMeasure,
                          cost: CostSpec = CostSpec()) -> DiscretePotentials:
    """Optimal dual potentials for the assignment problem (JV duals)."""
    _require_uniform_equal(a, b)
    C = cost_matrix(a.points, b.points, cost)
    _, u, v = _jv_assignment(C)
    return DiscretePotentials(u, v)


# ---------------------------------------------------------------------------
# entropic regularization
# ---------------------------------------------------------------------------

def _sinkhorn_violation(logpi: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    pi = np.exp(logpi)
    return float(max(np.abs(pi.sum(axis=1) - a).max(),
                     np.abs(pi.sum(axis=0) - b).max()))


def sinkhorn(a: EmpiricalMeasure, b: EmpiricalMeasure, cost: CostSpec = CostSpec(),
             epsilon: float = 0.01, max_iter: int = 20_000, tol: float = 1e-9,
             anneal: bool = True):
    """Log-domain Sinkhorn iterations; returns (TransportPlan, DiscretePotentials).

    With ``anneal`` the regularization starts at the median positive cost
    and is halved down to ``epsilon``, which keeps the iteration count flat
    as epsilon shrinks.  Raises :class:`NonConvergenceError` (carrying the
    final marginal violation) if the tolerance is not reached.
    """
    if not (epsilon > 0):
        raise ValueError("epsilon must be positive")
    C = cost_matrix(a.points, b.points, cost)
    wa, wb = a.weights, b.weights
    loga, logb = np.log(wa), np.log(wb)

    levels = [float(epsilon)]
    if anneal:
        positive = C[C > 0]
        start = float(np.median(positive)) if positive.size else epsilon
        while start > 2.0 * epsilon:
            levels.append(start)
            start /= 2.0
        levels = sorted(set(levels), reverse=True)

    f = np.zeros(a.n)
    g = np.zeros(b.n)
    violation = np.inf
    for eps in levels:
        final = eps == levels[-1]
        budget = max_iter if final else 200
        goal = tol if final else max(tol, 1e-4)
        for _ in range(budget):
            f = -eps * logsumexp((g[None, :] - C) / eps + logb[None, :], axis=1)
            g = -eps * logsumexp((f[:, None] - C) / eps + loga[:, None], axis=0)
            logpi = loga[:, None] + logb[None, :] + (f[:, None] + g[None, :] - C) / eps
            violation = _sinkhorn_violation(logpi, wa, wb)
            if violation < goal:
                break
        else:
            if final:
                raise NonConvergenceError(
                    f"sinkhorn did not reach marginal tolerance {tol:.1e}; "
                    f"final violation {violation:.3e}", violation=violation)

    pi = np.exp(logpi)
    plan = TransportPlan(pi, a, b, float(np.sum(pi * C)),
                         marginal_tol=max(tol, violation, 1e-8))
    return plan, DiscretePotentials(f, g)


# ---------------------------------------------------------------------------
# quadratic-penalty dual
# ---------------------------------------------------------------------------

def l2_regularized_dual(a: EmpiricalMeasure, b: EmpiricalMeasure,
                        cost: CostSpec = CostSpec(), lam: float = 100.0,
                        lr: float | None = None, max_iter: int = 50_000,
                        tol: float = 1e-7) -> DiscretePotentials:
    """Maximize  E_a[phi] + E_b[psi] - lam E_{a x b}[(phi + psi - c)_+^2].

    Full-batch ascent on the weight-preconditioned gradient; the
    preconditioned system has curvature ~2 lam, so the default step is
    0.25 / lam.  Stops when the sup-norm of the preconditioned gradient
    falls below ``tol``.
    """
    if lam <= 0:
        raise ValueError("lam must be positive")
    C = cost_matrix(a.points, b.points, cost)
    wa, wb = a.weights, b.weights
    step = (0.25 / lam) if lr is None else lr
    phi = np.zeros(a.n)
    psi = np.zeros(b.n)
    for _ in range(max_iter):
        slack = np.maximum(phi[:, None] + psi[None, :] - C, 0.0)
        gphi = 1.0 - 2.0 * lam * (slack @ wb)
        gpsi = 1.0 - 2.0 * lam * (wa @ slack)
        if not (np.all(np.isfinite(gphi)) and np.all(np.isfinite(gpsi))):
            raise NumericalError(
                "quadratic-penalty dual ascent diverged; try a smaller lr")
        grad_norm = max(np.abs(gphi).max(), np.abs(gpsi).max())
        if grad_norm < tol:
            return DiscretePotentials(phi, psi)
        phi = phi + step * gphi
        psi = psi + step * gpsi
    raise NonConvergenceError(
        f"dual ascent still has gradient norm {grad_norm:.3e} after "
        f"{max_iter} iterations", violation=grad_norm)


def l2_plan_from_potentials(pots: DiscretePotentials, a: EmpiricalMeasure,
                            b: EmpiricalMeasure, cost: CostSpec = CostSpec(),
                            lam: float = 100.0):
    """Primal plan recovered via pi_ij = 2 lam a_i b_j (phi_i + psi_j - c_ij)_+.

    The recovery is only exactly feasible at the exact dual optimum, so the
    plan is normalized to unit mass and returned together with its residual
    marginal violation instead of pretending to be exact.
    """
    C = cost_matrix(a.points, b.points, cost)
    slack = np.maximum(pots.phi[:, None] + pots.psi[None, :] - C, 0.0)
    pi = 2.0 * lam * (a.weights[:, None] * b.weights[None, :]) * slack
    total = pi.sum()
    if total <= 0:
        raise NumericalError("recovered plan has no mass; potentials look degenerate")
    pi = pi / total
    row = np.abs(pi.sum(axis=1) - a.weights).max()
    col = np.abs(pi.sum(axis=0) - b.weights).max()
    violation = float(max(row, col))
    plan = TransportPlan(pi, a, b, float(np.sum(pi * C)),
                         marginal_tol=max(violation * (1 + 1e-9), 1e-8))
    return plan, violation


# ---------------------------------------------------------------------------
# maps from plans
# ---------------------------------------------------------------------------

def barycentric_map(plan: TransportPlan) -> np.ndarray:
    """Conditional-mean image of each source point under the plan."""
    row_mass = plan.coupling.sum(axis=1)
    dead = np.nonzero(row_mass == 0)[0]
    if dead.size:
        raise ValueError(f"barycentric map undefined: source row {dead[0]} "
                         f"carries no mass")
    return (plan.coupling @ plan.target.points) / row_mass[:, None]


def fit_barycentric_net(plan: TransportPlan, hidden: tuple = (128, 128),
                        seed: int = 0, iters: int = 2000, lr: float = 1e-3):
    """Squared-loss regression of a network onto the barycentric map.

    Returns a generator-style net (no identity skip) usable anywhere a
    transport map is expected.
    """
    from .autodiff import Mlp, OptimizerState, Tensor, mlp_spec, optimizer_apply, zero_gradients
    from .w2gan import GeneratorNet

    x = plan.source.points
    y = barycentric_map(plan)
    d_in, d_out = x.shape[1], y.shape[1]
    net = Mlp(mlp_spec([d_in, *hidden, d_out], activation="relu", seed=seed),
              name="bary")
    state = OptimizerState(kind="adam", lr=lr, betas=(0.9, 0.999))
    target = Tensor(y)
    for _ in range(iters):
        params = net.parameters()
        zero_gradients(params)
        loss = (net.forward(Tensor(x)) - target).square().mean()
        loss.backward()
        optimizer_apply(state, params)
    return GeneratorNet(net, skip=False)


# ---------------------------------------------------------------------------
# distance estimate
# ---------------------------------------------------------------------------

def w2_estimate(a: EmpiricalMeasure, b: EmpiricalMeasure,
                cost: CostSpec = CostSpec(), epsilon: float | None = None) -> float:
    """W_p between empirical measures: exact matching when the clouds are
    equal-size uniform, annealed Sinkhorn otherwise.

    Returns the distance itself, i.e. (p * transport cost)^(1/p).
    """
    uniform = (a.n == b.n
               and np.abs(a.weights - 1.0 / a.n).max() <= 1e-12
               and np.abs(b.weights - 1.0 / b.n).max() <= 1e-12)
    if uniform:
        C = cost_matrix(a.points, b.points, cost)
        idx = _assignment_indices(C)
        value = float(C[np.arange(a.n), idx].mean())
    else:
        C = cost_matrix(a.points, b.points, cost)
        if epsilon is None:
            positive = C[C > 0]
            scale = float(np.median(positive)) if positive.size else 1.0
            epsilon = max(0.01 * scale, 1e-9)
        plan, _ = sinkhorn(a, b, cost, epsilon=epsilon, tol=1e-6)
        value = plan.cost_value
    return float((cost.p * max(value, 0.0)) ** (1.0 / cost.p))
