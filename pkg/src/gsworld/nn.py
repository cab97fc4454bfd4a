"""Minimal MLP machinery with explicit backpropagation.

Everything that learns in this package (language autoencoder, attribute
projector heads, toy denoiser) runs on these few primitives; no autodiff
framework is involved, so gradient correctness is established by the
finite-difference checks in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ValidationError

ACTIVATIONS = ("relu", "linear")


def softmax(x, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class MlpParams:
    """Stack of affine layers with a per-layer activation tag.

    weights[i] has shape (fan_in, fan_out); biases[i] has shape (fan_out,).
    """

    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    activations: list = field(default_factory=list)

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValidationError("weights, biases and activations must align")
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ValidationError(f"unknown activation {act!r} in layer {i}")
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValidationError(f"layer {i} shapes do not chain: {w.shape} / {b.shape}")
            if i > 0 and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValidationError(f"layer {i} input dim does not match layer {i - 1} output")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValidationError(f"layer {i} has non-finite parameters")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    def parameter_arrays(self) -> list:
        """Flat list of parameter arrays, weights and biases interleaved per layer."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            activations=list(self.activations),
        )


def mlp_init(dims, rng: np.random.Generator, output_activation: str = "linear") -> MlpParams:
    """Glorot-uniform MLP with ReLU hidden layers.

    `dims` is the full chain, e.g. (512, 256, 64, 3).
    """
    dims = list(dims)
    if len(dims) < 2:
        raise ValidationError("an MLP needs at least input and output dims")
    weights, biases, acts = [], [], []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
        acts.append("relu" if i < len(dims) - 2 else output_activation)
    return MlpParams(weights=weights, biases=biases, activations=acts)


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    """Forward pass; accepts a single vector or a (batch, dim) matrix."""
    y, _ = mlp_forward_cache(params, x)
    return y


def mlp_forward_cache(params: MlpParams, x):
    """Forward pass that also returns the per-layer inputs needed by backprop."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    h = arr[None, :] if single else arr
    if h.shape[1] != params.input_dim:
        raise ValidationError(f"input dim {h.shape[1]} != expected {params.input_dim}")
    inputs = []
    for w, b, act in zip(params.weights, params.biases, params.activations):
        inputs.append(h)
        z = h @ w + b
        h = np.maximum(z, 0.0) if act == "relu" else z
    cache = {"inputs": inputs, "output": h, "single": single}
    return (h[0] if single else h), cache


@dataclass
class MlpGrads:
    """Parameter gradients shaped like an MlpParams; carries no validation so
    non-finite values can flow to the optimizer's divergence check."""

    weights: list
    biases: list

    def parameter_arrays(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


def mlp_backward(params: MlpParams, cache, grad_output):
    """Backprop through a cached forward pass.

    Returns (grad_input, MlpGrads). ReLU uses the zero subgradient at the kink.
    """
    g = np.asarray(grad_output, dtype=np.float64)
    if cache["single"]:
        g = g[None, :]
    grad_w = [None] * len(params.weights)
    grad_b = [None] * len(params.biases)
    for i in reversed(range(len(params.weights))):
        h_in = cache["inputs"][i]
        if params.activations[i] == "relu":
            z = h_in @ params.weights[i] + params.biases[i]
            g = g * (z > 0.0)
        grad_w[i] = h_in.T @ g
        grad_b[i] = g.sum(axis=0)
        g = g @ params.weights[i].T
    return (g[0] if cache["single"] else g), MlpGrads(weights=grad_w, biases=grad_b)


class Adam:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = None
        self.v = None

    def step(self, arrays, grads) -> None:
        """Update parameter arrays in place from matching gradient arrays."""
        if self.m is None:
            self.m = [np.zeros_like(a) for a in arrays]
            self.v = [np.zeros_like(a) for a in arrays]
        if len(arrays) != len(self.m):
            raise ValidationError("optimizer state does not match parameter list")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            if not np.all(np.isfinite(g)):
                raise NumericError("non-finite gradient encountered")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            a -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self) -> list:
        return (self.m or []) + (self.v or [])


def relu_margin(params: MlpParams, x) -> float:
    """Smallest |pre-activation| over all ReLU layers for the given input.

    Finite-difference checks are only meaningful when the +-eps stencil does
    not straddle a ReLU kink; callers reroll inputs until this margin clears
    their stencil.
    """
    arr = np.asarray(x, dtype=np.float64)
    h = arr[None, :] if arr.ndim == 1 else arr
    margin = np.inf
    for w, b, act in zip(params.weights, params.biases, params.activations):
        z = h @ w + b
        if act == "relu":
            margin = min(margin, float(np.abs(z).min()))
        h = np.maximum(z, 0.0) if act == "relu" else z
    return margin


def finite_difference_check(loss_fn, arrays, analytic_grads, eps: float = 1e-4, floor: float = 1e-6) -> float:
    """Worst-case relative error between analytic gradients and central differences.

    `loss_fn` must read the (mutated in place) `arrays`; every element is
    perturbed by ±eps. Relative error uses denominator max(|a|, |fd|, floor)
    so true zero gradients compare at the floor.
    """
    worst = 0.0
    for arr, grad in zip(arrays, analytic_grads):
        flat = arr.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = loss_fn()
            flat[j] = orig - eps
            down = loss_fn()
            flat[j] = orig
            fd = (up - down) / (2.0 * eps)
            denom = max(abs(fd), abs(gflat[j]), floor)
            worst = max(worst, abs(fd - gflat[j]) / denom)
    return worst
