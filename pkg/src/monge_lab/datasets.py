"""Synthetic measure pairs and Gaussian closed forms.

Every sampler draws from a counter-based Philox stream keyed by the spec's
seed, so distinct datasets get independent streams and resampling with the
same spec is reproducible regardless of call order elsewhere.

The 2-D benchmark pairs come in fixed source/target roles:

- ``four_gaussians``: four well-separated blobs contracting to four inner
  blobs (source centers at (+-4, +-4), target at (+-1.5, +-1.5), sigma 0.4).
- ``checkerboard``: four unit squares at (+-1, +-1) as source; five unit
  squares on the complementary alternating cells (center plus corners at
  (+-2, +-2)) as target.
- ``two_spirals``: radius t/3 at angle t for t ~ U[0.5, 3*pi]; the target
  is the same spiral law rotated by pi.

Geometry constants are fields with defaults, not literals, so experiments
and tests can override them without forking the samplers.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np

SYNTHETIC_KINDS = (
    "four_gaussians_src", "four_gaussians_tgt",
    "checkerboard_src", "checkerboard_tgt",
    "two_spirals_src", "two_spirals_tgt",
    "gaussian",
)

DATASET_PAIRS = {
    "four_gaussians": ("four_gaussians_src", "four_gaussians_tgt"),
    "checkerboard": ("checkerboard_src", "checkerboard_tgt"),
    "two_spirals": ("two_spirals_src", "two_spirals_tgt"),
}


@dataclass(frozen=True)
class Geometry2D:
    """Tunable constants for the synthetic 2-D families."""

    four_gaussians_src_scale: float = 4.0
    four_gaussians_tgt_scale: float = 1.5
    four_gaussians_sigma: float = 0.4
    checkerboard_src_centers: tuple = ((1, 1), (1, -1), (-1, 1), (-1, -1))
    checkerboard_tgt_centers: tuple = ((0, 0), (2, 2), (2, -2), (-2, 2), (-2, -2))
    checkerboard_square_side: float = 1.0
    spiral_t_min: float = 0.5
    spiral_t_max: float = 3.0 * np.pi
    spiral_radius_slope: float = 1.0 / 3.0


@dataclass(frozen=True)
class MeasureSpec:
    """Description of a samplable measure.

    ``kind`` selects the family; ``gaussian`` additionally needs ``mean``
    and an SPD ``cov``.  The seed keys the sampler's Philox stream.
    """

    kind: str
    seed: int = 0
    mean: np.ndarray | None = None
    cov: np.ndarray | None = None
    geometry: Geometry2D = field(default_factory=Geometry2D)

    def __post_init__(self):
        if self.kind not in SYNTHETIC_KINDS:
            raise ValueError(f"unknown measure kind {self.kind!r}")
        if self.kind == "gaussian":
            if self.mean is None or self.cov is None:
                raise ValueError("gaussian spec requires mean and cov")
            mean = np.asarray(self.mean, dtype=np.float64)
            cov = np.asarray(self.cov, dtype=np.float64)
            if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
                raise ValueError("gaussian spec: mean must be (d,), cov (d, d)")
            object.__setattr__(self, "mean", mean)
            object.__setattr__(self, "cov", cov)

    def with_seed(self, seed: int) -> "MeasureSpec":
        return replace(self, seed=seed)


def gaussian_spec(mean, cov, seed: int = 0) -> MeasureSpec:
    return MeasureSpec("gaussian", seed=seed, mean=np.asarray(mean, dtype=np.float64),
                       cov=np.asarray(cov, dtype=np.float64))


@dataclass
class EmpiricalMeasure:
    """Weighted point cloud: ``points`` is (n, d), ``weights`` sums to 1."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] < 1:
            raise ValueError("points must be a non-empty (n, d) array")
        if self.weights.shape != (self.points.shape[0],):
            raise ValueError("weights must be (n,)")
        if np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1 within 1e-12")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @classmethod
    def uniform(cls, points: np.ndarray) -> "EmpiricalMeasure":
        points = np.asarray(points, dtype=np.float64)
        n = points.shape[0]
        return cls(points, np.full(n, 1.0 / n))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            _write_measure(fh, self)

    def to_csv_string(self) -> str:
        buf = io.StringIO()
        _write_measure(buf, self)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, path) -> "EmpiricalMeasure":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if not header or header[-1] != "weight" or \
                    any(h != f"x{i}" for i, h in enumerate(header[:-1])):
                raise ValueError(f"unrecognized measure header: {header}")
            rows = [[float(v) for v in row] for row in reader if row]
        arr = np.asarray(rows, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != len(header):
            raise ValueError("malformed measure CSV")
        return cls(arr[:, :-1], arr[:, -1])


def _write_measure(fh, measure: EmpiricalMeasure) -> None:
    writer = csv.writer(fh)
    writer.writerow([f"x{i}" for i in range(measure.dim)] + ["weight"])
    for row, w in zip(measure.points, measure.weights):
        writer.writerow([repr(float(v)) for v in row] + [repr(float(w))])


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def _rng_for(spec: MeasureSpec):
    return np.random.Generator(np.random.Philox(key=np.uint64(spec.seed)))


class MeasureStream:
    """Stateful sampler: successive draws continue one Philox stream.

    ``sample`` restarts the spec's stream on every call (so the same spec
    always yields the same points); a stream instead advances, which is
    what training loops need for fresh minibatches.  Pass a
    ``numpy.random.SeedSequence`` to decouple the stream from the spec's
    own seed (e.g. one stream per training run).
    """

    def __init__(self, spec: MeasureSpec, seed_seq=None):
        self.spec = spec
        if seed_seq is None:
            self._rng = _rng_for(spec)
        else:
            self._rng = np.random.Generator(np.random.Philox(seed_seq))

    def draw(self, n: int) -> np.ndarray:
        return _sample_points(self.spec, n, self._rng)


def _mixture_centers(spec: MeasureSpec):
    geo = spec.geometry
    if spec.kind == "four_gaussians_src":
        s = geo.four_gaussians_src_scale
    else:
        s = geo.four_gaussians_tgt_scale
    return np.array([(s, s), (s, -s), (-s, s), (-s, -s)], dtype=np.float64)


def sample(spec: MeasureSpec, n: int) -> EmpiricalMeasure:
    """Draw ``n`` points from the measure described by ``spec``."""
    return EmpiricalMeasure.uniform(_sample_points(spec, n, _rng_for(spec)))


def _sample_points(spec: MeasureSpec, n: int, rng) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be positive")
    geo = spec.geometry
    kind = spec.kind

    if kind == "gaussian":
        cov = np.asarray(spec.cov)
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance must be positive definite") from exc
        z = rng.standard_normal((n, spec.mean.size))
        pts = spec.mean + z @ chol.T
    elif kind in ("four_gaussians_src", "four_gaussians_tgt"):
        centers = _mixture_centers(spec)
        comp = rng.integers(0, len(centers), size=n)
        pts = centers[comp] + geo.four_gaussians_sigma * rng.standard_normal((n, 2))
    elif kind in ("checkerboard_src", "checkerboard_tgt"):
        centers = np.asarray(
            geo.checkerboard_src_centers if kind == "checkerboard_src"
            else geo.checkerboard_tgt_centers, dtype=np.float64)
        comp = rng.integers(0, len(centers), size=n)
        offsets = rng.uniform(-0.5, 0.5, size=(n, 2)) * geo.checkerboard_square_side
        pts = centers[comp] + offsets
    elif kind in ("two_spirals_src", "two_spirals_tgt"):
        t = rng.uniform(geo.spiral_t_min, geo.spiral_t_max, size=n)
        r = geo.spiral_radius_slope * t
        pts = np.stack([r * np.cos(t), r * np.sin(t)], axis=1)
        if kind == "two_spirals_tgt":
            pts = -pts  # rotation by pi
    else:  # pragma: no cover - guarded by MeasureSpec
        raise ValueError(f"unknown measure kind {kind!r}")

    return pts


def dataset_pair(name: str, seed: int = 0,
                 geometry: Geometry2D | None = None) -> tuple[MeasureSpec, MeasureSpec]:
    """Source/target specs for a named benchmark pair.

    Source and target streams are decorrelated by fixed seed offsets.
    """
    if name not in DATASET_PAIRS:
        raise ValueError(f"unknown dataset {name!r}; choose from {sorted(DATASET_PAIRS)}")
    src_kind, tgt_kind = DATASET_PAIRS[name]
    geo = geometry if geometry is not None else Geometry2D()
    src = MeasureSpec(src_kind, seed=2 * seed, geometry=geo)
    tgt = MeasureSpec(tgt_kind, seed=2 * seed + 1, geometry=geo)
    return src, tgt


# ---------------------------------------------------------------------------
# Gaussian closed forms
# ---------------------------------------------------------------------------

def _spd_sqrt(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition."""
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def _require_gaussian(spec: MeasureSpec, label: str) -> None:
    if spec.kind != "gaussian":
        raise ValueError(f"{label} must be a gaussian measure spec, got {spec.kind!r}")


def gaussian_w2(a: MeasureSpec, b: MeasureSpec) -> float:
    """Quadratic Wasserstein distance between two Gaussians.

    W2^2 = |m_a - m_b|^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2).
    """
    _require_gaussian(a, "a")
    _require_gaussian(b, "b")
    ra = _spd_sqrt(a.cov)
    cross = _spd_sqrt(ra @ b.cov @ ra)
    w2_sq = float(np.sum((a.mean - b.mean) ** 2)
                  + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(cross))
    return float(np.sqrt(max(w2_sq, 0.0)))


@dataclass(frozen=True)
class AffineMap:
    """x -> A x + c acting on (n, d) point arrays."""

    A: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "A", np.asarray(self.A, dtype=np.float64))
        object.__setattr__(self, "c", np.asarray(self.c, dtype=np.float64))

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return np.atleast_2d(points) @ self.A.T + self.c

    def compose(self, inner: "AffineMap") -> "AffineMap":
        """self after inner: x -> A_self (A_inner x + c_inner) + c_self."""
        return AffineMap(self.A @ inner.A, self.A @ inner.c + self.c)

    @classmethod
    def identity(cls, d: int) -> "AffineMap":
        return cls(np.eye(d), np.zeros(d))


def gaussian_monge_map(a: MeasureSpec, b: MeasureSpec) -> AffineMap:
    """Optimal (quadratic-cost) map between Gaussians.

    T(x) = m_b + A (x - m_a) with the symmetric PSD matrix
    A = S_a^-1/2 (S_a^1/2 S_b S_a^1/2)^1/2 S_a^-1/2.
    """
    _require_gaussian(a, "a")
    _require_gaussian(b, "b")
    vals, vecs = np.linalg.eigh((a.cov + a.cov.T) / 2.0)
    if vals.min() <= 1e-12:
        raise np.linalg.LinAlgError("source covariance is singular")
    root = (vecs * np.sqrt(vals)) @ vecs.T
    inv_root = (vecs / np.sqrt(vals)) @ vecs.T
    mid = _spd_sqrt(root @ b.cov @ root)
    A = inv_root @ mid @ inv_root
    A = (A + A.T) / 2.0
    return AffineMap(A, b.mean - A @ a.mean)


def push_gaussian(spec: MeasureSpec, affine: AffineMap) -> MeasureSpec:
    """Pushforward of a Gaussian through an affine map (exact)."""
    _require_gaussian(spec, "spec")
    mean = affine.A @ spec.mean + affine.c
    cov = affine.A @ spec.cov @ affine.A.T
    return gaussian_spec(mean, (cov + cov.T) / 2.0, seed=spec.seed)
