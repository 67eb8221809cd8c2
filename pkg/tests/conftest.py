"""Shared oracles and helpers.

Everything here is deliberately independent of the library's own machinery:
finite differences for gradients, straight-line numpy forward/backward for
small MLPs, and permutation enumeration for assignment problems.  Tests use
these as second routes, never the code under test.
"""

import itertools

import numpy as np


def central_difference(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at flat array ``x``."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    g = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x)
        flat[i] = orig - h
        lo = f(x)
        flat[i] = orig
        g[i] = (hi - lo) / (2.0 * h)
    return grad


def brute_force_assignment(cost: np.ndarray):
    """Optimal assignment by enumerating all permutations (n <= 9)."""
    n = cost.shape[0]
    best_perm, best_cost = None, np.inf
    for perm in itertools.permutations(range(n)):
        c = sum(cost[i, perm[i]] for i in range(n))
        if c < best_cost - 1e-15:
            best_cost = c
            best_perm = perm
    return np.array(best_perm), best_cost


def mlp_forward_np(weights, biases, activations, x):
    """Straight-line numpy forward pass for a plain MLP (no batch norm)."""
    h = np.atleast_2d(x)
    for w, b, act in zip(weights, biases, activations):
        h = h @ w + b
        if act == "relu":
            h = np.maximum(h, 0.0)
        elif act == "tanh":
            h = np.tanh(h)
    return h


def mlp_input_gradient_np(weights, biases, activations, x):
    """Hand-written chain rule for the input gradient of a scalar-output MLP."""
    x = np.atleast_2d(x)
    pre = []
    h = x
    for w, b, act in zip(weights, biases, activations):
        z = h @ w + b
        pre.append(z)
        if act == "relu":
            h = np.maximum(z, 0.0)
        elif act == "tanh":
            h = np.tanh(z)
        else:
            h = z
    grad = np.ones((x.shape[0], 1))
    for w, z, act in zip(weights[::-1], pre[::-1], activations[::-1]):
        if act == "relu":
            grad = grad * (z > 0.0)
        elif act == "tanh":
            grad = grad * (1.0 - np.tanh(z) ** 2)
        grad = grad @ w.T
    return grad
