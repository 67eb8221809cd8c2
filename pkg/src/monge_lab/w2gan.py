"""Adversarial computation of quadratic-cost transport maps.

The critic is a pair of potentials (phi, psi) trained by ascent on the
relaxed dual

    E[phi(G(z))] + E[psi(x)]
      - lambda_ineq * E[(phi(G(z)) + psi(x) - |G(z) - x|^2 / 2)_+^2]
      - optional saturation and reparameterization penalties,

and the generator descends E[phi(G(z))], which moves samples along the
critic's gradient field toward the target.  ``LossBreakdown.total`` is
always the signed dual value (the quantity the critic climbs).

Two penalty terms involve input gradients of the nets (the saturation
penalty and the WGAN-GP/LP baselines).  Training through an exact input
gradient would need second-order autodiff, which the engine deliberately
does not provide; instead those gradients are central differences
(h = 1e-5) embedded in the graph as ordinary forward passes, making the
penalties first-order differentiable.  Central differences are exact for
quadratics and accurate to ~1e-10 at this step size, far below training
noise; the same formula is used for reported values, so re-evaluation
oracles can match it bit-for-bit.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import discrete_ot
from .autodiff import (
    Mlp,
    OptimizerState,
    Tensor,
    fd_input_gradient,
    mlp_spec,
    no_grad,
    optimizer_apply,
    zero_gradients,
)
from .autodiff import tensor as T
from .datasets import EmpiricalMeasure, MeasureSpec, MeasureStream
from .errors import NumericalError

FD_H = 1e-5  # step for graph-embedded central-difference input gradients

CHECKPOINT_VERSION = 1

DIVERGENCE_LIMIT = 1e6


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

class PotentialPair:
    """Critic potentials. Two parameterizations:

    - ``direct``: independent nets phi and psi.
    - ``epsilon_reparam``: psi(y) = -phi(y) + eps(y), with the slack net
      eps kept small by its own penalty.  psi is always computed on the
      fly, never stored.
    """

    def __init__(self, phi: Mlp, psi: Mlp | None = None,
                 parameterization: str = "direct", epsilon_net: Mlp | None = None):
        if parameterization not in ("direct", "epsilon_reparam"):
            raise ValueError(f"unknown parameterization {parameterization!r}")
        if parameterization == "direct" and psi is None:
            raise ValueError("direct parameterization needs a psi net")
        if parameterization == "epsilon_reparam" and epsilon_net is None:
            raise ValueError("epsilon_reparam needs an epsilon net")
        self.phi = phi
        self.psi = psi if parameterization == "direct" else None
        self.parameterization = parameterization
        self.epsilon_net = epsilon_net if parameterization == "epsilon_reparam" else None

    def phi_value(self, x, training: bool = False) -> Tensor:
        return self.phi.forward(x, training)

    def psi_value(self, y, training: bool = False) -> Tensor:
        if self.parameterization == "direct":
            return self.psi.forward(y, training)
        return -self.phi.forward(y, training) + self.epsilon_net.forward(y, training)

    def epsilon_value(self, y) -> np.ndarray:
        if self.epsilon_net is None:
            raise ValueError("epsilon slack only exists under epsilon_reparam")
        return self.epsilon_net.predict(y)

    def parameters(self):
        out = list(self.phi.parameters())
        if self.psi is not None:
            out += self.psi.parameters()
        if self.epsilon_net is not None:
            out += self.epsilon_net.parameters()
        return out

    def transport(self, points: np.ndarray) -> np.ndarray:
        """The map x - grad phi(x) induced by the trained potential."""
        points = np.atleast_2d(points)
        return points - self.phi.input_gradient(points)


class GeneratorNet:
    """Transport map network, optionally residual.

    With ``skip`` the net computes G(z) = H(z) + z and H's final layer is
    expected to be down-scaled so G starts near the identity.  The
    ``clipped_affine_tanh`` output transform instead computes
    2 * H(z) + clip(z, -1, 1) for box-bounded targets.
    """

    def __init__(self, h: Mlp, skip: bool = True, output_transform: str = "none"):
        if output_transform not in ("none", "clipped_affine_tanh"):
            raise ValueError(f"unknown output transform {output_transform!r}")
        if (skip or output_transform == "clipped_affine_tanh") and \
                h.in_width != h.out_width:
            raise ValueError("identity skip needs matching input/output widths")
        self.h = h
        self.skip = skip
        self.output_transform = output_transform

    def forward(self, z, training: bool = False) -> Tensor:
        z_arr = z.data if isinstance(z, Tensor) else np.atleast_2d(z)
        out = self.h.forward(z if isinstance(z, Tensor) else z_arr, training)
        if self.output_transform == "clipped_affine_tanh":
            return out * 2.0 + np.clip(z_arr, -1.0, 1.0)
        if self.skip:
            return out + z_arr
        return out

    def transport(self, points: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.forward(np.atleast_2d(points), training=False).data

    __call__ = transport

    def parameters(self):
        return self.h.parameters()


def default_potential_pair(d: int = 2, seed: int = 0, hidden: tuple = (128, 128),
                           parameterization: str = "direct") -> PotentialPair:
    """Potentials with two ReLU hidden layers each (no batch norm)."""
    phi = Mlp(mlp_spec([d, *hidden, 1], activation="relu", seed=seed), name="phi")
    if parameterization == "direct":
        psi = Mlp(mlp_spec([d, *hidden, 1], activation="relu", seed=seed + 1),
                  name="psi")
        return PotentialPair(phi, psi)
    eps = Mlp(mlp_spec([d, *hidden, 1], activation="relu", seed=seed + 2),
              name="eps")
    return PotentialPair(phi, parameterization="epsilon_reparam", epsilon_net=eps)


def default_generator(d: int = 2, seed: int = 0, hidden: tuple = (128, 128, 128, 128),
                      batch_norm: bool = True) -> GeneratorNet:
    """Residual generator: 4 ReLU+batch-norm hidden layers, final layer
    scaled by 1e-3 so the initial map stays near the identity."""
    h = Mlp(mlp_spec([d, *hidden, d], activation="relu", batch_norm=batch_norm,
                     seed=seed),
            final_scale=1e-3, name="gen")
    return GeneratorNet(h, skip=True)


# ---------------------------------------------------------------------------
# configuration and loss records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingConfig:
    """Hyperparameters for the adversarial loop.

    Defaults are the 2-D settings: dual-constraint weight 200, SGD with
    rate 5e-5 on both players, 10 critic steps per generator step, batch
    256.  The saturation (``lambda_eq``) and reparameterization
    (``lambda_eps``) penalties are off by default and enabled by stress
    configs; ``lambda_gp`` only affects the WGAN-GP/LP baselines.
    """

    lambda_ineq: float = 200.0
    lambda_eq: float = 0.0
    lambda_eps: float = 0.0
    lambda_gp: float = 10.0
    alpha_gen: float = 5e-5
    alpha_disc: float = 5e-5
    alpha_gen_final: float | None = None
    alpha_disc_final: float | None = None
    ema_decay: float = 0.0
    n_critic: int = 10
    # extra critic-only steps before the generator's first update, so the
    # potential already carries the transport field when alternation starts
    critic_warmup: int = 0
    batch: int = 256
    iterations: int = 2000
    interpolated_sampling: bool = False
    seed: int = 0
    gen_optimizer: str = "sgd"
    disc_optimizer: str = "sgd"
    adam_betas: tuple = (0.5, 0.999)
    w2_every: int = 200
    w2_eval_n: int = 256
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.n_critic < 1:
            raise ValueError("n_critic must be at least 1")
        if self.critic_warmup < 0:
            raise ValueError("critic_warmup must be nonnegative")
        for name in ("lambda_ineq", "lambda_eq", "lambda_eps", "lambda_gp"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.batch < 1 or self.iterations < 0:
            raise ValueError("batch must be >= 1 and iterations >= 0")
        if self.alpha_gen <= 0 or self.alpha_disc <= 0:
            raise ValueError("learning rates must be positive")
        for name in ("alpha_gen_final", "alpha_disc_final"):
            val = getattr(self, name)
            if val is not None and val <= 0:
                raise ValueError(f"{name} must be positive when set")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")

    def lr_at(self, iteration: int, role: str) -> float:
        """Geometric interpolation from the initial to the final rate over
        the run; constant when no final rate is set."""
        start = self.alpha_gen if role == "gen" else self.alpha_disc
        final = self.alpha_gen_final if role == "gen" else self.alpha_disc_final
        if final is None or self.iterations <= 1:
            return start
        frac = iteration / (self.iterations - 1)
        return start * (final / start) ** frac


@dataclass
class LossBreakdown:
    """Critic objective pieces.  ``total`` is the signed dual value
    l_ot - lambda_ineq*l_ineq - lambda_eq*l_eq - lambda_eps*l_eps; the
    individual penalty fields are the raw (unweighted) means."""

    l_ot: float
    l_ineq: float
    l_eq: float
    l_eps: float
    total: float
    node: Tensor | None = field(default=None, repr=False, compare=False)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _half_sqnorm_rows_np(delta: np.ndarray) -> np.ndarray:
    return 0.5 * np.sum(delta * delta, axis=1, keepdims=True)


def _half_sqnorm_rows(t: Tensor) -> Tensor:
    return t.square().sum(axis=1, keepdims=True) * 0.5


def interpolate_pairs(gz: np.ndarray, x: np.ndarray, seed: int):
    """Random convex combinations of generated and real points.

    Row i of the first output lies on the segment [x_i, gz_i]; the second
    output re-pairs rows by a seeded permutation and uses an independent
    mixing draw, giving a second i.i.d. interpolate per row.
    """
    gz = np.atleast_2d(gz)
    x = np.atleast_2d(x)
    if gz.shape != x.shape:
        raise ValueError(f"batch shapes differ: {gz.shape} vs {x.shape}")
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    n = gz.shape[0]
    e1 = rng.uniform(0.0, 1.0, size=(n, 1))
    e2 = rng.uniform(0.0, 1.0, size=(n, 1))
    perm = rng.permutation(n)
    first = e1 * x + (1.0 - e1) * gz
    second = e2 * x[perm] + (1.0 - e2) * gz[perm]
    return first, second


def disc_loss(pp: PotentialPair, gz: np.ndarray, x: np.ndarray,
              cfg: TrainingConfig, interp_seed: int | None = None) -> LossBreakdown:
    """Critic objective on one batch; ``node`` backpropagates into the
    potentials (ascend by descending ``-node``)."""
    gz = np.atleast_2d(gz)
    x = np.atleast_2d(x)
    if gz.shape != x.shape:
        raise ValueError(f"batch shapes differ: {gz.shape} vs {x.shape}")

    phi_gz = pp.phi_value(gz)
    psi_x = pp.psi_value(x)
    l_ot = phi_gz.mean() + psi_x.mean()

    if cfg.interpolated_sampling:
        seed = cfg.seed if interp_seed is None else interp_seed
        first, second = interpolate_pairs(gz, x, seed)
        phi_first, psi_second = pp.phi_value(first), pp.psi_value(second)
    else:
        # penalty pairs are the batch points themselves: reuse the nodes
        first, second = gz, x
        phi_first, psi_second = phi_gz, psi_x
    cost = _half_sqnorm_rows_np(first - second)
    violation = T.relu(phi_first + psi_second - cost)
    l_ineq = violation.square().mean()

    total = l_ot - cfg.lambda_ineq * l_ineq
    l_eq = None
    if cfg.lambda_eq > 0:
        l_eq = _eq_penalty_node(pp, gz, x)
        total = total - cfg.lambda_eq * l_eq
    l_eps = None
    if cfg.lambda_eps > 0:
        if pp.epsilon_net is None:
            raise ValueError("lambda_eps > 0 requires the epsilon_reparam critic")
        l_eps = T.relu(pp.epsilon_net.forward(x)).square().mean()
        total = total - cfg.lambda_eps * l_eps

    return LossBreakdown(
        l_ot=l_ot.item(),
        l_ineq=l_ineq.item(),
        l_eq=0.0 if l_eq is None else l_eq.item(),
        l_eps=0.0 if l_eps is None else l_eps.item(),
        total=total.item(),
        node=total,
    )


def _eq_penalty_node(pp: PotentialPair, x: np.ndarray | None,
                     y: np.ndarray | None) -> Tensor:
    """Saturation penalty: both potentials should satisfy the tight-cost
    identity along the induced map.  Gradients are graph-embedded central
    differences so the penalty stays trainable (see module docstring)."""
    terms = []
    if x is not None:
        gphi = fd_input_gradient(pp.phi, x, FD_H)
        inner = Tensor(x) - gphi
        resid = (pp.phi_value(x) + pp.psi_value(inner)
                 - _half_sqnorm_rows(gphi))
        terms.append(resid.square())
    if y is not None:
        if pp.parameterization == "direct":
            gpsi = fd_input_gradient(pp.psi, y, FD_H)
        else:
            # psi = -phi + eps, so its gradient is the difference of the nets'
            gpsi = fd_input_gradient(pp.epsilon_net, y, FD_H) - \
                fd_input_gradient(pp.phi, y, FD_H)
        inner = Tensor(y) - gpsi
        resid = (pp.phi_value(inner) + pp.psi_value(y)
                 - _half_sqnorm_rows(gpsi))
        terms.append(resid.square())
    if not terms:
        raise ValueError("eq penalty needs at least one batch")
    acc = terms[0]
    for extra in terms[1:]:
        acc = acc + extra
    return acc.mean()


def eq_penalty(pp: PotentialPair, x_batch: np.ndarray | None,
               y_batch: np.ndarray | None) -> float:
    """Mean saturation residual (nonnegative; zero iff both identities
    hold on the batch).  Either side may be None to check one potential."""
    with_x = None if x_batch is None else np.atleast_2d(x_batch)
    with_y = None if y_batch is None else np.atleast_2d(y_batch)
    return _eq_penalty_node(pp, with_x, with_y).item()


def gen_loss(pp: PotentialPair, generator: GeneratorNet, z_batch: np.ndarray,
             training: bool = True) -> Tensor:
    """E[phi(G(z))]; the generator descends this scalar."""
    gz = generator.forward(np.atleast_2d(z_batch), training=training)
    return pp.phi_value(gz).mean()


def wgan_baseline_disc_loss(f_net: Mlp, gz: np.ndarray, x: np.ndarray,
                            cfg: TrainingConfig, variant: str = "gp",
                            interp_seed: int | None = None):
    """Single-critic baselines: E[f(x)] - E[f(gz)] minus a gradient
    penalty on random interpolates.

    ``gp`` penalizes (|grad f| - 1)^2, ``lp`` its one-sided hinge.
    Returns (node, breakdown dict); the critic ascends the node.
    """
    if variant not in ("gp", "lp"):
        raise ValueError(f"unknown baseline variant {variant!r}")
    gz = np.atleast_2d(gz)
    x = np.atleast_2d(x)
    if gz.shape != x.shape:
        raise ValueError(f"batch shapes differ: {gz.shape} vs {x.shape}")
    seed = cfg.seed if interp_seed is None else interp_seed
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    u = rng.uniform(0.0, 1.0, size=(x.shape[0], 1))
    x_hat = u * x + (1.0 - u) * gz

    critic = f_net.forward(x).mean() - f_net.forward(gz).mean()
    grad_hat = fd_input_gradient(f_net, x_hat, FD_H)
    norm = T.sqrt(grad_hat.square().sum(axis=1, keepdims=True) + 1e-12)
    if variant == "gp":
        penalty = (norm - 1.0).square().mean()
    else:
        penalty = T.relu(norm - 1.0).square().mean()
    node = critic - cfg.lambda_gp * penalty
    return node, {"critic": critic.item(), "penalty": penalty.item(),
                  "total": node.item()}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _named_state(net) -> list:
    """Trainable parameters plus batch-norm running buffers."""
    entries = list(net.parameters())
    mlps = [net] if isinstance(net, Mlp) else [net.h] if isinstance(net, GeneratorNet) else []
    if isinstance(net, PotentialPair):
        mlps = [m for m in (net.phi, net.psi, net.epsilon_net) if m is not None]
    out = [(name, p.data) for name, p in entries]
    for m in mlps:
        for i, norm in enumerate(m.norms):
            if norm is not None:
                out.append((f"{m.name}.bn{i}.running_mean", norm.running_mean))
                out.append((f"{m.name}.bn{i}.running_var", norm.running_var))
    return out


def save_checkpoint(path, *nets) -> None:
    """Versioned JSON of named tensors (floats via repr: exact round trip)."""
    params = []
    for net in nets:
        for name, arr in _named_state(net):
            params.append({"name": name, "shape": list(arr.shape),
                           "data": [float(v) for v in arr.ravel()]})
    payload = {"format_version": CHECKPOINT_VERSION, "params": params}
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> dict:
    with open(path) as fh:
        payload = json.load(fh)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    out = {}
    for entry in payload["params"]:
        out[entry["name"]] = np.asarray(entry["data"], dtype=np.float64).reshape(
            entry["shape"])
    return out


def restore_checkpoint(path, *nets) -> None:
    """Load tensors back into nets; shapes and names must match exactly."""
    loaded = load_checkpoint(path)
    for net in nets:
        for name, arr in _named_state(net):
            if name not in loaded:
                raise ValueError(f"checkpoint missing tensor {name!r}")
            if loaded[name].shape != arr.shape:
                raise ValueError(
                    f"checkpoint tensor {name!r} has shape "
                    f"{loaded[name].shape}, expected {arr.shape}")
            arr[...] = loaded[name]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TraceRow:
    iteration: int
    l_ot: float
    l_ineq: float
    l_eq: float
    l_eps: float
    w2_estimate: float = float("nan")


@dataclass
class TrainingTrace:
    rows: list = field(default_factory=list)
    diverged: bool = False

    def to_csv(self, path) -> None:
        import csv as _csv
        with open(path, "w", newline="") as fh:
            writer = _csv.writer(fh)
            writer.writerow(["iteration", "l_ot", "l_ineq", "l_eq", "l_eps",
                             "w2_estimate"])
            for r in self.rows:
                w2 = "" if np.isnan(r.w2_estimate) else repr(r.w2_estimate)
                writer.writerow([r.iteration, repr(r.l_ot), repr(r.l_ineq),
                                 repr(r.l_eq), repr(r.l_eps), w2])

    def w2_series(self):
        return [(r.iteration, r.w2_estimate) for r in self.rows
                if not np.isnan(r.w2_estimate)]


@dataclass
class TrainResult:
    generator: GeneratorNet
    potentials: PotentialPair
    trace: TrainingTrace
    # weight-averaged copy of the generator over the second half of the
    # run; None unless cfg.ema_decay > 0.  Averaging suppresses the
    # measure-preserving drift that minibatch noise leaves in the map.
    generator_avg: GeneratorNet | None = None

    def best_generator(self) -> GeneratorNet:
        return self.generator_avg if self.generator_avg is not None else self.generator


class _Batcher:
    """Uniform minibatch source over a spec (fresh draws) or a fixed
    empirical cloud (resampled indices)."""

    def __init__(self, source, seed_seq):
        rng = np.random.Generator(np.random.Philox(seed_seq))
        if isinstance(source, EmpiricalMeasure):
            self._points = source.points
            self._rng = rng
            self._stream = None
        elif isinstance(source, MeasureSpec):
            self._points = None
            self._stream = MeasureStream(source, seed_seq)
        else:
            raise TypeError(f"cannot draw batches from {type(source).__name__}")

    def draw(self, n: int) -> np.ndarray:
        if self._stream is not None:
            return self._stream.draw(n)
        idx = self._rng.integers(0, self._points.shape[0], size=n)
        return self._points[idx]


def _holdout(source, n, seed_seq) -> np.ndarray:
    return _Batcher(source, seed_seq).draw(n)


def _ascend(opt_state, params, node) -> None:
    zero_gradients(params)
    (-node).backward()
    optimizer_apply(opt_state, params)


def train(cfg: TrainingConfig, src, tgt, out_dir=None,
          generator: GeneratorNet | None = None,
          potentials: PotentialPair | None = None) -> TrainResult:
    """Alternating critic/generator training.

    ``src`` and ``tgt`` may be measure specs (fresh draws each step) or
    empirical clouds (minibatches with replacement).  Per outer iteration
    the critic takes ``n_critic`` ascent steps, then the generator one
    descent step.  A W2 estimate between pushed source and target is
    logged every ``w2_every`` iterations on fixed held-out samples.

    If the critic objective leaves [-1e6, 1e6] or turns NaN the loop halts,
    writes a final checkpoint (when ``out_dir`` is given) and returns with
    ``trace.diverged`` set — callers decide whether that is fatal.
    """
    dim = src.dim if isinstance(src, EmpiricalMeasure) else \
        (2 if src.kind != "gaussian" else src.mean.size)
    root = np.random.SeedSequence(cfg.seed)
    seeds = root.spawn(6)

    gen = generator if generator is not None else default_generator(dim, seed=cfg.seed)
    pp = potentials if potentials is not None else default_potential_pair(
        dim, seed=cfg.seed + 1,
        parameterization="epsilon_reparam" if cfg.lambda_eps > 0 else "direct")

    src_batches = _Batcher(src, seeds[0])
    tgt_batches = _Batcher(tgt, seeds[1])
    z_batches = _Batcher(src, seeds[2])
    src_eval = _holdout(src, cfg.w2_eval_n, seeds[3])
    tgt_eval = _holdout(tgt, cfg.w2_eval_n, seeds[4])
    interp_rng = np.random.Generator(np.random.Philox(seeds[5]))

    disc_opt = OptimizerState(kind=cfg.disc_optimizer, lr=cfg.alpha_disc,
                              betas=cfg.adam_betas)
    gen_opt = OptimizerState(kind=cfg.gen_optimizer, lr=cfg.alpha_gen,
                             betas=cfg.adam_betas)
    disc_params = pp.parameters()
    gen_params = gen.parameters()

    trace = TrainingTrace()
    ema_start = cfg.iterations // 2
    ema_state = None

    def ema_update(it):
        nonlocal ema_state
        if cfg.ema_decay <= 0 or it < ema_start:
            return
        live = _named_state(gen)
        if ema_state is None:
            ema_state = {name: arr.copy() for name, arr in live}
            return
        m = cfg.ema_decay
        for name, arr in live:
            ema_state[name] *= m
            ema_state[name] += (1.0 - m) * arr

    def ema_generator():
        if ema_state is None:
            return None
        import copy as _copy
        avg = _copy.deepcopy(gen)
        for name, arr in _named_state(avg):
            arr[...] = ema_state[name]
        return avg

    def checkpoint(tag="checkpoint"):
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            save_checkpoint(os.path.join(out_dir, f"{tag}.json"), gen, pp)

    def eval_w2() -> float:
        pushed = gen.transport(src_eval)
        return discrete_ot.w2_estimate(EmpiricalMeasure.uniform(pushed),
                                       EmpiricalMeasure.uniform(tgt_eval))

    if cfg.iterations == 0:
        checkpoint()
        return TrainResult(gen, pp, trace)

    for _ in range(cfg.critic_warmup):
        z = z_batches.draw(cfg.batch)
        x = tgt_batches.draw(cfg.batch)
        with no_grad():
            gz = gen.forward(z, training=True).data
        interp_seed = int(interp_rng.integers(0, 2**63)) \
            if cfg.interpolated_sampling else None
        breakdown = disc_loss(pp, gz, x, cfg, interp_seed=interp_seed)
        if not np.isfinite(breakdown.total) or \
                abs(breakdown.total) > DIVERGENCE_LIMIT:
            trace.diverged = True
            break
        _ascend(disc_opt, disc_params, breakdown.node)

    for it in range(0 if trace.diverged else cfg.iterations):
        disc_opt.lr = cfg.lr_at(it, "disc")
        gen_opt.lr = cfg.lr_at(it, "gen")
        breakdown = None
        for _ in range(cfg.n_critic):
            z = z_batches.draw(cfg.batch)
            x = tgt_batches.draw(cfg.batch)
            with no_grad():
                gz = gen.forward(z, training=True).data
            interp_seed = int(interp_rng.integers(0, 2**63)) \
                if cfg.interpolated_sampling else None
            breakdown = disc_loss(pp, gz, x, cfg, interp_seed=interp_seed)
            if not np.isfinite(breakdown.total) or \
                    abs(breakdown.total) > DIVERGENCE_LIMIT:
                trace.diverged = True
                break
            _ascend(disc_opt, disc_params, breakdown.node)
        if not trace.diverged:
            z = src_batches.draw(cfg.batch)
            zero_gradients(disc_params)
            zero_gradients(gen_params)
            g_loss = gen_loss(pp, gen, z, training=True)
            if not np.isfinite(g_loss.item()) or abs(g_loss.item()) > DIVERGENCE_LIMIT:
                trace.diverged = True
            else:
                g_loss.backward()
                optimizer_apply(gen_opt, gen_params)
                ema_update(it)

        row = TraceRow(it, breakdown.l_ot, breakdown.l_ineq, breakdown.l_eq,
                       breakdown.l_eps)
        if trace.diverged:
            trace.rows.append(row)
            checkpoint()
            break
        if cfg.w2_every > 0 and (it % cfg.w2_every == 0 or it == cfg.iterations - 1):
            row.w2_estimate = eval_w2()
        trace.rows.append(row)
        if cfg.checkpoint_every > 0 and it > 0 and it % cfg.checkpoint_every == 0:
            checkpoint()

    checkpoint()
    if out_dir is not None:
        trace.to_csv(os.path.join(out_dir, "trace.csv"))
    return TrainResult(gen, pp, trace, generator_avg=ema_generator())


def fit_discriminator(pp: PotentialPair, gen_measure, tgt, cfg: TrainingConfig,
                      blocks: int, eval_n: int = 1024) -> np.ndarray:
    """Train only the critic between a frozen generated measure and the
    target; returns the dual value on a fixed held-out batch after each
    block of ``n_critic`` steps (for ascent diagnostics and map checks)."""
    root = np.random.SeedSequence(cfg.seed)
    seeds = root.spawn(4)
    gen_batches = _Batcher(gen_measure, seeds[0])
    tgt_batches = _Batcher(tgt, seeds[1])
    gz_eval = _holdout(gen_measure, eval_n, seeds[2])
    x_eval = _holdout(tgt, eval_n, seeds[3])
    opt = OptimizerState(kind=cfg.disc_optimizer, lr=cfg.alpha_disc,
                         betas=cfg.adam_betas)
    params = pp.parameters()
    values = np.zeros(blocks)
    for blk in range(blocks):
        for _ in range(cfg.n_critic):
            gz = gen_batches.draw(cfg.batch)
            x = tgt_batches.draw(cfg.batch)
            breakdown = disc_loss(pp, gz, x, cfg)
            if not np.isfinite(breakdown.total):
                raise NumericalError("critic objective became non-finite")
            _ascend(opt, params, breakdown.node)
        values[blk] = disc_loss(pp, gz_eval, x_eval, cfg).total
    return values


def train_wgan_baseline(cfg: TrainingConfig, src, tgt, variant: str = "gp",
                        out_dir=None) -> TrainResult:
    """Same alternating loop with a single Lipschitz critic (GP or LP).

    The generator ascends E[f(G(z))] (the critic scores real high); traces
    log the critic difference in the ``l_ot`` column and the gradient
    penalty in ``l_ineq``.
    """
    dim = src.dim if isinstance(src, EmpiricalMeasure) else \
        (2 if src.kind != "gaussian" else src.mean.size)
    root = np.random.SeedSequence(cfg.seed)
    seeds = root.spawn(6)
    gen = default_generator(dim, seed=cfg.seed)
    f_net = Mlp(mlp_spec([dim, 128, 128, 1], activation="relu", seed=cfg.seed + 1),
                name="critic")

    src_batches = _Batcher(src, seeds[0])
    tgt_batches = _Batcher(tgt, seeds[1])
    z_batches = _Batcher(src, seeds[2])
    src_eval = _holdout(src, cfg.w2_eval_n, seeds[3])
    tgt_eval = _holdout(tgt, cfg.w2_eval_n, seeds[4])
    interp_rng = np.random.Generator(np.random.Philox(seeds[5]))

    disc_opt = OptimizerState(kind=cfg.disc_optimizer, lr=cfg.alpha_disc,
                              betas=cfg.adam_betas)
    gen_opt = OptimizerState(kind=cfg.gen_optimizer, lr=cfg.alpha_gen,
                             betas=cfg.adam_betas)
    f_params = f_net.parameters()
    gen_params = gen.parameters()
    trace = TrainingTrace()

    for it in range(cfg.iterations):
        disc_opt.lr = cfg.lr_at(it, "disc")
        gen_opt.lr = cfg.lr_at(it, "gen")
        info = None
        for _ in range(cfg.n_critic):
            z = z_batches.draw(cfg.batch)
            x = tgt_batches.draw(cfg.batch)
            with no_grad():
                gz = gen.forward(z, training=True).data
            node, info = wgan_baseline_disc_loss(
                f_net, gz, x, cfg, variant,
                interp_seed=int(interp_rng.integers(0, 2**63)))
            if not np.isfinite(info["total"]) or abs(info["total"]) > DIVERGENCE_LIMIT:
                trace.diverged = True
                break
            _ascend(disc_opt, f_params, node)
        if not trace.diverged:
            z = src_batches.draw(cfg.batch)
            zero_gradients(f_params)
            zero_gradients(gen_params)
            gz = gen.forward(z, training=True)
            g_loss = -f_net.forward(gz).mean()
            g_loss.backward()
            optimizer_apply(gen_opt, gen_params)

        row = TraceRow(it, info["critic"], info["penalty"], 0.0, 0.0)
        if trace.diverged:
            trace.rows.append(row)
            break
        if cfg.w2_every > 0 and (it % cfg.w2_every == 0 or it == cfg.iterations - 1):
            pushed = gen.transport(src_eval)
            row.w2_estimate = discrete_ot.w2_estimate(
                EmpiricalMeasure.uniform(pushed),
                EmpiricalMeasure.uniform(tgt_eval))
        trace.rows.append(row)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(os.path.join(out_dir, "checkpoint.json"), gen)
        trace.to_csv(os.path.join(out_dir, "trace.csv"))
    return TrainResult(gen, None, trace)
