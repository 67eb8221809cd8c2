"""Exact checks of the transport-map fixed-point theory.

For quadratic cost, the damped update x -> (1-a)x + a*T(x) along the
optimal map T moves a measure along the displacement interpolation
toward the target, shrinking the transport distance by exactly (1-a)
per step.  On Gaussian pairs every object here has a closed form
(optimal maps are affine and affine images of Gaussians are Gaussian),
so the decay law, the interpolation identities, map composition and the
continuous-flow limit can be verified to numerical precision instead of
sampling precision.  Empirical-cloud variants of the same operations
form a second, looser tier used by the experiment harness.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import discrete_ot
from .datasets import (
    AffineMap,
    EmpiricalMeasure,
    MeasureSpec,
    gaussian_monge_map,
    gaussian_w2,
    push_gaussian,
)
from .errors import NumericalError

DECAY_TOL = 1e-9  # closed-form identities are enforced at this precision


# ---------------------------------------------------------------------------
# map estimates
# ---------------------------------------------------------------------------

class MongeMapEstimate:
    """A transport map from one of three sources behind a single call.

    - ``affine``: closed-form x -> A x + c (e.g. between Gaussians).
    - ``potential``: x - |grad phi|^((2-p)/(p-1)) * grad phi from a scalar
      potential net; p = 2 reduces to x - grad phi.
    - ``plan``: barycentric projection of a discrete plan, defined only on
      the plan's own source points.
    """

    def __init__(self, kind: str, affine: AffineMap | None = None,
                 phi_net=None, p: float = 2.0, plan=None):
        if kind not in ("affine", "potential", "plan"):
            raise ValueError(f"unknown map kind {kind!r}")
        if kind == "affine" and affine is None:
            raise ValueError("affine kind needs an AffineMap")
        if kind == "potential":
            if phi_net is None:
                raise ValueError("potential kind needs a potential net")
            if p <= 1.0:
                raise ValueError(f"cost exponent must exceed 1, got {p}")
        if kind == "plan" and plan is None:
            raise ValueError("plan kind needs a transport plan")
        self.kind = kind
        self.affine = affine
        self.phi_net = phi_net
        self.p = float(p)
        self.plan = plan
        self._bary = None

    @classmethod
    def closed_form(cls, affine: AffineMap) -> "MongeMapEstimate":
        return cls("affine", affine=affine)

    @classmethod
    def from_potential(cls, phi_net, p: float = 2.0) -> "MongeMapEstimate":
        return cls("potential", phi_net=phi_net, p=p)

    @classmethod
    def from_plan(cls, plan) -> "MongeMapEstimate":
        return cls("plan", plan=plan)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if self.kind == "affine":
            return self.affine(points)
        if self.kind == "potential":
            g = self.phi_net.input_gradient(points)
            if self.p != 2.0:
                norms = np.linalg.norm(g, axis=1, keepdims=True)
                scale = np.zeros_like(norms)
                nz = norms[:, 0] > 0
                scale[nz] = norms[nz] ** ((2.0 - self.p) / (self.p - 1.0))
                g = scale * g
            return points - g
        return self._plan_lookup(points)

    def _plan_lookup(self, points: np.ndarray) -> np.ndarray:
        if self._bary is None:
            self._bary = discrete_ot.barycentric_map(self.plan)
        src = self.plan.source.points
        out = np.empty_like(points)
        for i, q in enumerate(points):
            dists = np.linalg.norm(src - q, axis=1)
            j = int(np.argmin(dists))
            if dists[j] > 1e-9:
                raise ValueError(
                    f"point {q} is not in the plan's source support")
            out[i] = self._bary[j]
        return out


# ---------------------------------------------------------------------------
# updates and interpolation
# ---------------------------------------------------------------------------

def functional_update(measure: EmpiricalMeasure, map_est, alpha: float
                      ) -> EmpiricalMeasure:
    """Damped map step: every point moves to (1-alpha)x + alpha*T(x).

    alpha = 1 lands on T exactly, alpha = 0 is the identity.  Weights
    are unchanged.  ``map_est`` may be a MongeMapEstimate or any
    callable on (n, d) arrays.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    mapped = map_est(measure.points)
    new_pts = (1.0 - alpha) * measure.points + alpha * mapped
    return EmpiricalMeasure(new_pts, measure.weights.copy())


def geodesic_point(measure: EmpiricalMeasure, map_est, t: float
                   ) -> EmpiricalMeasure:
    """Displacement interpolation of an empirical cloud at parameter t."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return functional_update(measure, map_est, t)


def gaussian_geodesic_point(src: MeasureSpec, tgt: MeasureSpec, t: float
                            ) -> MeasureSpec:
    """Closed-form interpolate between Gaussians at parameter t."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    opt = gaussian_monge_map(src, tgt)
    d = opt.A.shape[0]
    blend = AffineMap((1.0 - t) * np.eye(d) + t * opt.A, t * opt.c)
    return push_gaussian(src, blend)


# ---------------------------------------------------------------------------
# ideal descent (closed-form Gaussian tier)
# ---------------------------------------------------------------------------

@dataclass
class TraceStep:
    """One row of a descent/interpolation trace."""

    t: int
    w2: float
    f_t: float
    deviation: float = float("nan")
    bound: float = float("nan")

    def __post_init__(self):
        if self.w2 < 0:
            raise ValueError("transport distance cannot be negative")
        if not np.isnan(self.f_t) and not -1e-12 <= self.f_t <= 1.0 + 1e-12:
            raise ValueError(f"interpolation parameter {self.f_t} outside [0, 1]")


@dataclass
class GeodesicTrace:
    steps: list = field(default_factory=list)

    def to_csv(self, path) -> None:
        import csv as _csv
        with open(path, "w", newline="") as fh:
            writer = _csv.writer(fh)
            writer.writerow(["t", "w2", "f_t", "deviation", "bound"])
            for s in self.steps:
                dev = "" if np.isnan(s.deviation) else repr(s.deviation)
                bnd = "" if np.isnan(s.bound) else repr(s.bound)
                writer.writerow([s.t, repr(s.w2), repr(s.f_t), dev, bnd])

    def w2_values(self) -> np.ndarray:
        return np.array([s.w2 for s in self.steps])


def ideal_descent_path(src: MeasureSpec, tgt: MeasureSpec, alpha: float,
                       steps: int):
    """Gaussian damped-map iteration in closed form.

    Returns (specs, step_maps): the Gaussian at every step 0..steps and
    the affine update map applied at each of the ``steps`` transitions.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    d = tgt.mean.size
    specs = [src]
    maps = []
    cur = src
    for _ in range(steps):
        opt = gaussian_monge_map(cur, tgt)
        update = AffineMap((1.0 - alpha) * np.eye(d) + alpha * opt.A,
                           alpha * opt.c)
        cur = push_gaussian(cur, update)
        specs.append(cur)
        maps.append(update)
    return specs, maps


def simulate_ideal_descent(src: MeasureSpec, tgt: MeasureSpec, alpha: float,
                           steps: int) -> GeodesicTrace:
    """Run the damped iteration and verify the per-step (1-alpha) decay.

    The trace carries the exact transport distance at every step and the
    fraction f(t) of the initial distance still remaining; both obey
    w2(t) = (1-alpha)^t * w2(0) to DECAY_TOL, enforced here so callers
    can trust downstream analysis.
    """
    specs, _ = ideal_descent_path(src, tgt, alpha, steps)
    w2_0 = gaussian_w2(src, tgt)
    trace = GeodesicTrace()
    prev = None
    for t, spec in enumerate(specs):
        w2_t = gaussian_w2(spec, tgt)
        if prev is not None:
            if abs(w2_t - (1.0 - alpha) * prev) > DECAY_TOL * max(1.0, prev):
                raise NumericalError(
                    f"decay factor {w2_t / prev if prev else 0.0:.12f} at step "
                    f"{t} deviates from {1.0 - alpha}")
        f_t = w2_t / w2_0 if w2_0 > 0 else 0.0
        trace.steps.append(TraceStep(t=t, w2=w2_t, f_t=f_t))
        prev = w2_t
    return trace


def composition_check(src: MeasureSpec, tgt: MeasureSpec, alpha: float,
                      steps: int, tol: float = DECAY_TOL) -> bool:
    """Do the per-step affine updates compose to the direct optimal map?

    Composes the step maps of the ideal descent and compares them, entry
    by entry, with the closed-form optimal map from the start Gaussian
    straight to the final iterate.
    """
    specs, maps = ideal_descent_path(src, tgt, alpha, steps)
    if not maps:
        return True
    composed = maps[0]
    for m in maps[1:]:
        composed = m.compose(composed)
    direct = gaussian_monge_map(src, specs[-1])
    return (np.abs(composed.A - direct.A).max() <= tol
            and np.abs(composed.c - direct.c).max() <= tol)


def gradient_flow_point(src: MeasureSpec, tgt: MeasureSpec, t: float):
    """Continuous-time limit of the descent: the flow reaches the
    interpolate at parameter 1 - e^(-t), and the squared transport
    distance decays as e^(-2t).  Returns (measure at time t, distance),
    enforcing the decay law to DECAY_TOL.
    """
    if t < 0:
        raise ValueError(f"flow time must be nonnegative, got {t}")
    opt = gaussian_monge_map(src, tgt)
    d = opt.A.shape[0]
    s = -np.expm1(-t)  # 1 - e^(-t), accurate near t = 0
    blend = AffineMap((1.0 - s) * np.eye(d) + s * opt.A, s * opt.c)
    flowed = push_gaussian(src, blend)
    w2_t = gaussian_w2(flowed, tgt)
    w2_0 = gaussian_w2(src, tgt)
    if abs(w2_t ** 2 - np.exp(-2.0 * t) * w2_0 ** 2) > DECAY_TOL * max(1.0, w2_0 ** 2):
        raise NumericalError(
            f"flow distance {w2_t:.12f} at time {t} violates the "
            f"exponential decay law")
    return flowed, w2_t


# ---------------------------------------------------------------------------
# deviation experiments
# ---------------------------------------------------------------------------

class BumpField:
    """Gradient field of a sum of radial Gaussian bumps.

    Each bump a*exp(-|x-c|^2 / (2 w^2)) has gradient magnitude peaking at
    radius w with value a/(w*sqrt(e)); amplitudes are chosen so the field
    norms sum to at most ``sup_norm`` everywhere (triangle inequality),
    giving an analytically certified, not estimated, sup bound.
    """

    def __init__(self, centers: np.ndarray, width: float, sup_norm: float):
        self.centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
        if width <= 0:
            raise ValueError("bump width must be positive")
        if sup_norm < 0:
            raise ValueError("sup norm must be nonnegative")
        self.width = float(width)
        self.sup_norm = float(sup_norm)
        k = self.centers.shape[0]
        self.amplitude = sup_norm * width * np.sqrt(np.e) / k

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        out = np.zeros_like(x)
        w2 = self.width ** 2
        for c in self.centers:
            delta = x - c
            r2 = np.sum(delta * delta, axis=1, keepdims=True)
            out += (-self.amplitude / w2) * delta * np.exp(-r2 / (2.0 * w2))
        return out


@dataclass
class DeviationReport:
    """One perturbed-update trial against the sup-norm deviation bound."""

    epsilon: float
    epsilon_prime: float
    alpha: float
    measured_w2_deviation: float
    bound: float
    bootstrap_sigma: float
    n_points: int

    def within_bound(self, slack_sigmas: float = 3.0) -> bool:
        return self.measured_w2_deviation <= (
            self.bound + slack_sigmas * self.bootstrap_sigma)


def deviation_experiment(src: MeasureSpec, tgt: MeasureSpec, epsilon: float,
                         alpha: float, epsilon_prime: float = 0.0,
                         n: int = 2000, seed: int = 0,
                         n_boot: int = 24) -> DeviationReport:
    """Measure how far one perturbed damped step strays from the ideal one.

    The ideal step uses the closed-form optimal map T.  The perturbed
    step uses a potential corrupted by a bump field with certified
    gradient sup norm ``epsilon`` (so its map is T minus that field) and
    then adds an update-error field with sup norm ``epsilon_prime``.
    Both pushforwards of an n-point draw from ``src`` are compared with
    an exact discrete transport distance; the bound (alpha*epsilon +
    epsilon_prime) / sqrt(2) is reported alongside a bootstrap sigma of
    the paired-distance statistic for sampling slack.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    if epsilon < 0 or epsilon_prime < 0:
        raise ValueError("perturbation scales must be nonnegative")
    opt = gaussian_monge_map(src, tgt)
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    width = 0.5 * np.sqrt(np.linalg.eigvalsh(src.cov).min())

    def bump_field(scale, n_bumps=3):
        centers = src.mean + rng.multivariate_normal(
            np.zeros(src.mean.size), src.cov, size=n_bumps)
        return BumpField(centers, width, scale)

    grad_err = bump_field(epsilon) if epsilon > 0 else None
    update_err = bump_field(epsilon_prime) if epsilon_prime > 0 else None

    pts = rng.multivariate_normal(src.mean, src.cov, size=n)
    ideal = (1.0 - alpha) * pts + alpha * opt(pts)
    perturbed = ideal.copy()
    if grad_err is not None:
        perturbed -= alpha * grad_err(pts)
    if update_err is not None:
        perturbed += update_err(pts)

    if np.array_equal(ideal, perturbed):
        # identical clouds are at distance zero by definition; running the
        # solver would only report its own cancellation noise (~1e-9)
        measured = 0.0
    else:
        measured = discrete_ot.w2_estimate(EmpiricalMeasure.uniform(ideal),
                                           EmpiricalMeasure.uniform(perturbed))
    paired_sq = np.sum((ideal - perturbed) ** 2, axis=1)
    boots = np.empty(n_boot)
    for b in range(n_boot):
        idx = rng.integers(0, n, size=n)
        boots[b] = np.sqrt(paired_sq[idx].mean())
    bound = (alpha * epsilon + epsilon_prime) / np.sqrt(2.0)
    return DeviationReport(
        epsilon=epsilon,
        epsilon_prime=epsilon_prime,
        alpha=alpha,
        measured_w2_deviation=measured,
        bound=bound,
        bootstrap_sigma=float(boots.std()),
        n_points=n,
    )


def deviation_trial_trace(reports) -> GeodesicTrace:
    """Pack deviation reports into trace rows (t = trial index)."""
    trace = GeodesicTrace()
    for i, rep in enumerate(reports):
        trace.steps.append(TraceStep(
            t=i, w2=rep.measured_w2_deviation, f_t=float("nan"),
            deviation=rep.measured_w2_deviation, bound=rep.bound))
    return trace
