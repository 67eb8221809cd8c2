"""Fully connected networks built on the tensor graph.

Architectures are described by :class:`MlpSpec` — an explicit width chain
plus per-layer activation and batch-norm switches — so configs can be
serialized and rebuilt bit-for-bit.  Initialization is Glorot uniform from
a counter-based RNG keyed by the spec seed; nets meant to sit close to the
identity (residual generators) additionally scale their final layer by
``final_scale``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeMismatchError
from . import tensor as T
from .tensor import Tensor

_ACTIVATIONS = ("relu", "tanh", "none")


@dataclass(frozen=True)
class MlpSpec:
    """Width chain ``[d_in, h1, ..., d_out]`` with per-layer options.

    ``activations[i]`` and ``batch_norm[i]`` apply to layer ``i`` (the map
    from ``layer_widths[i]`` to ``layer_widths[i+1]``).  Batch norm, when
    enabled, is applied after the affine map and before the activation.
    """

    layer_widths: tuple
    activations: tuple
    batch_norm: tuple
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        object.__setattr__(self, "activations", tuple(self.activations))
        object.__setattr__(self, "batch_norm", tuple(bool(b) for b in self.batch_norm))
        if len(self.layer_widths) < 2:
            raise ValueError("MlpSpec needs at least an input and an output width")
        if any(w <= 0 for w in self.layer_widths):
            raise ValueError("layer widths must be positive")
        n_layers = len(self.layer_widths) - 1
        if len(self.activations) != n_layers or len(self.batch_norm) != n_layers:
            raise ValueError("activations/batch_norm must have one entry per layer")
        for act in self.activations:
            if act not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")


def mlp_spec(widths, activation: str = "relu", batch_norm: bool = False,
             seed: int = 0, final_activation: str = "none") -> MlpSpec:
    """Convenience constructor: hidden layers share one activation, the
    final layer gets ``final_activation`` and never batch norm."""
    n_layers = len(widths) - 1
    acts = tuple([activation] * (n_layers - 1) + [final_activation])
    bns = tuple([batch_norm] * (n_layers - 1) + [False])
    return MlpSpec(tuple(widths), acts, bns, seed)


class BatchNorm:
    """Per-feature batch normalization.

    Training mode normalizes with batch statistics (and folds them into
    running averages, momentum 0.9); eval mode uses the running averages.
    """

    EPS = 1e-5
    MOMENTUM = 0.9

    def __init__(self, width: int, name: str):
        self.gamma = Tensor(np.ones((1, width)), requires_grad=True)
        self.beta = Tensor(np.zeros((1, width)), requires_grad=True)
        self.running_mean = np.zeros((1, width))
        self.running_var = np.ones((1, width))
        self.name = name

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if training:
            mu = x.mean(axis=0, keepdims=True)
            centered = x - mu
            var = centered.square().mean(axis=0, keepdims=True)
            inv = T.pow_const(var + self.EPS, -0.5)
            xhat = centered * inv
            m = self.MOMENTUM
            self.running_mean = m * self.running_mean + (1.0 - m) * mu.data
            self.running_var = m * self.running_var + (1.0 - m) * var.data
        else:
            inv = (self.running_var + self.EPS) ** -0.5
            xhat = (x - self.running_mean) * inv
        return xhat * self.gamma + self.beta

    def parameters(self):
        return [(self.name + ".gamma", self.gamma), (self.name + ".beta", self.beta)]


class Mlp:
    """Fully connected network instantiated from an :class:`MlpSpec`."""

    def __init__(self, spec: MlpSpec, final_scale: float = 1.0, name: str = "mlp"):
        self.spec = spec
        self.name = name
        rng = np.random.Generator(np.random.Philox(key=spec.seed))
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        self.norms: list[BatchNorm | None] = []
        widths = spec.layer_widths
        n_layers = len(widths) - 1
        for i in range(n_layers):
            fan_in, fan_out = widths[i], widths[i + 1]
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            b = np.zeros((fan_out,))
            if i == n_layers - 1 and final_scale != 1.0:
                w = w * final_scale
            self.weights.append(Tensor(w, requires_grad=True))
            self.biases.append(Tensor(b, requires_grad=True))
            if spec.batch_norm[i]:
                self.norms.append(BatchNorm(fan_out, f"{name}.bn{i}"))
            else:
                self.norms.append(None)

    @property
    def in_width(self) -> int:
        return self.spec.layer_widths[0]

    @property
    def out_width(self) -> int:
        return self.spec.layer_widths[-1]

    def forward(self, x, training: bool = False) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.atleast_2d(x))
        if x.data.ndim != 2 or x.data.shape[1] != self.in_width:
            raise ShapeMismatchError(
                f"{self.name}: input shape {x.data.shape} does not match "
                f"declared width {self.in_width}")
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            norm = self.norms[i]
            if norm is not None:
                h = norm(h, training)
            act = self.spec.activations[i]
            if act == "relu":
                h = h.relu()
            elif act == "tanh":
                h = h.tanh()
        return h

    __call__ = forward

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Eval-mode forward without graph recording."""
        with T.no_grad():
            return self.forward(np.atleast_2d(x), training=False).data

    def parameters(self):
        """Named parameter tensors, in deterministic order."""
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"{self.name}.w{i}", w))
            out.append((f"{self.name}.b{i}", b))
            if self.norms[i] is not None:
                out.extend(self.norms[i].parameters())
        return out

    def input_gradient(self, x: np.ndarray) -> np.ndarray:
        """Gradient of the per-sample scalar output with respect to ``x``.

        The net must map ``(n, d)`` to ``(n, 1)``; rows are independent in
        eval mode, so one backward pass with a ones adjoint recovers every
        per-sample gradient at once.
        """
        if self.out_width != 1:
            raise ShapeMismatchError(
                f"{self.name}: input_gradient needs scalar output, "
                f"got width {self.out_width}")
        leaf = Tensor(np.atleast_2d(x), requires_grad=True)
        out = self.forward(leaf, training=False)
        out.backward(np.ones_like(out.data))
        return leaf.grad


def fd_input_gradient(net: Mlp, x: np.ndarray, h: float = 1e-5) -> Tensor:
    """Central-difference input gradient, built as a differentiable graph.

    Each component ``(f(x + h e_k) - f(x - h e_k)) / 2h`` is an ordinary
    forward pass, so the result can appear inside a training loss and still
    backpropagate into the net's parameters with first-order autodiff —
    exact second derivatives are deliberately out of scope for the engine.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    cols = []
    for k in range(x.shape[1]):
        shift = np.zeros_like(x)
        shift[:, k] = h
        hi = net.forward(Tensor(x + shift), training=False)
        lo = net.forward(Tensor(x - shift), training=False)
        cols.append((hi - lo) * (0.5 / h))
    return T.concat(cols, axis=1)
