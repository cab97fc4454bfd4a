"""Gaussian-to-token projection: Fourier position embedding, per-attribute MLP
heads, and softmax-weighted fusion into one fixed-width token per splat.

Head inputs are the activated attribute values: gamma(position), sigmoid of
the opacity logit, exp of the log-scale, raw quaternion components, and the
decoded language feature.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .autoencoder import AutoencoderModel, decode
from .errors import ValidationError
from .nn import MlpParams, finite_difference_check, mlp_backward, mlp_forward, mlp_forward_cache, mlp_init, softmax
from .scene import GaussianPrimitive, GaussianScene, sigmoid

HEAD_NAMES = ("x", "o", "s", "r", "f")
DEFAULT_TOKEN_DIM = 256
HEAD_HIDDEN = 128


@dataclass(frozen=True)
class FourierConfig:
    """Sin/cos position embedding with frequencies base^k * pi, k = 0..L-1."""

    num_bands: int = 10
    base: float = 2.0

    def __post_init__(self):
        if self.num_bands < 1:
            raise ValidationError("num_bands must be >= 1")

    @property
    def output_dim(self) -> int:
        return 6 * self.num_bands


def fourier_embed(position, cfg: FourierConfig = FourierConfig()) -> np.ndarray:
    """Embed a 3-vector as 6L values: per coordinate, interleaved (sin, cos)
    pairs for k = 0..L-1."""
    p = np.asarray(position, dtype=np.float64)
    if p.shape != (3,):
        raise ValidationError(f"position must have shape (3,), got {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValidationError("position must be finite")
    freqs = cfg.base ** np.arange(cfg.num_bands) * np.pi
    args = p[:, None] * freqs[None, :]                  # (3, L)
    interleaved = np.stack([np.sin(args), np.cos(args)], axis=-1)  # (3, L, 2)
    return interleaved.reshape(-1)


@dataclass
class ProjectorParams:
    """Five attribute heads plus the trainable fusion logits."""

    heads: dict
    fusion_logits: np.ndarray
    token_dim: int
    fourier: FourierConfig = field(default_factory=FourierConfig)

    def __post_init__(self):
        if set(self.heads) != set(HEAD_NAMES):
            raise ValidationError(f"heads must be exactly {HEAD_NAMES}")
        for name in HEAD_NAMES:
            if self.heads[name].output_dim != self.token_dim:
                raise ValidationError(f"head {name} output dim != token_dim {self.token_dim}")
        self.fusion_logits = np.asarray(self.fusion_logits, dtype=np.float64)
        if self.fusion_logits.shape != (len(HEAD_NAMES),):
            raise ValidationError("fusion_logits must have one entry per head")

    @property
    def fusion_weights(self) -> np.ndarray:
        return softmax(self.fusion_logits)

    def parameter_arrays(self) -> list:
        out = []
        for name in HEAD_NAMES:
            out.extend(self.heads[name].parameter_arrays())
        out.append(self.fusion_logits)
        return out

    def copy(self) -> "ProjectorParams":
        return ProjectorParams(
            heads={k: v.copy() for k, v in self.heads.items()},
            fusion_logits=self.fusion_logits.copy(),
            token_dim=self.token_dim,
            fourier=self.fourier,
        )


@dataclass(frozen=True)
class GaussianToken:
    values: np.ndarray
    source_index: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise ValidationError("token values must be finite")
        object.__setattr__(self, "values", v)


def make_projector(
    token_dim: int = DEFAULT_TOKEN_DIM,
    feature_dim: int = 512,
    fourier: FourierConfig = FourierConfig(),
    hidden: int = HEAD_HIDDEN,
    seed: int = 0,
) -> ProjectorParams:
    """Heads with one hidden ReLU layer each; fusion logits start uniform."""
    rng = np.random.default_rng(seed)
    input_dims = {"x": fourier.output_dim, "o": 1, "s": 3, "r": 4, "f": feature_dim}
    heads = {name: mlp_init([input_dims[name], hidden, token_dim], rng) for name in HEAD_NAMES}
    return ProjectorParams(heads=heads, fusion_logits=np.zeros(len(HEAD_NAMES)), token_dim=token_dim, fourier=fourier)


def _head_inputs(prim: GaussianPrimitive, proj: ProjectorParams, decoder: AutoencoderModel) -> dict:
    if decoder.latent_dim != prim.lang_latent.shape[0]:
        raise ValidationError(
            f"decoder latent dim {decoder.latent_dim} != primitive lang dim {prim.lang_latent.shape[0]}"
        )
    return {
        "x": fourier_embed(prim.position, proj.fourier),
        "o": np.array([sigmoid(prim.opacity_logit)]),
        "s": np.exp(prim.log_scale),
        "r": prim.rotation.copy(),
        "f": decode(decoder, prim.lang_latent),
    }


def tokenize_gaussian(
    prim: GaussianPrimitive,
    proj: ProjectorParams,
    decoder: AutoencoderModel,
    source_index: int = 0,
) -> GaussianToken:
    """token = sum_p softmax(fusion_logits)_p * head_p(input_p)."""
    inputs = _head_inputs(prim, proj, decoder)
    weights = proj.fusion_weights
    token = np.zeros(proj.token_dim)
    for w, name in zip(weights, HEAD_NAMES):
        token += w * mlp_forward(proj.heads[name], inputs[name])
    return GaussianToken(values=token, source_index=source_index)


def tokenize_scene(
    scene: GaussianScene,
    proj: ProjectorParams,
    decoder: AutoencoderModel,
    num_threads: int = 1,
) -> list:
    """Order-preserving map of tokenize_gaussian over the scene."""
    if num_threads <= 1:
        return [tokenize_gaussian(scene.primitive(i), proj, decoder, source_index=i) for i in range(scene.count)]
    with ThreadPoolExecutor(max_workers=num_threads) as pool:
        return list(
            pool.map(lambda i: tokenize_gaussian(scene.primitive(i), proj, decoder, source_index=i), range(scene.count))
        )


def token_matrix(tokens) -> np.ndarray:
    """Stack a token list into an (N, token_dim) array."""
    return np.stack([t.values for t in tokens]) if tokens else np.zeros((0, 0))


def scene_token_hash(scene: GaussianScene) -> str:
    """Stable hash of the scene content used to tie token dumps to a scene."""
    digest = hashlib.sha256()
    for arr in (scene.positions, scene.opacity_logits, scene.log_scales, scene.rotations, scene.colors, scene.lang):
        digest.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return digest.hexdigest()


def projector_loss_and_grads(prim: GaussianPrimitive, proj: ProjectorParams, decoder: AutoencoderModel, target):
    """Half squared error of the token against a target, plus gradients for
    every head parameter and the fusion logits."""
    inputs = _head_inputs(prim, proj, decoder)
    weights = proj.fusion_weights
    head_out, caches = {}, {}
    token = np.zeros(proj.token_dim)
    for w, name in zip(weights, HEAD_NAMES):
        head_out[name], caches[name] = mlp_forward_cache(proj.heads[name], inputs[name])
        token += w * head_out[name]
    residual = token - np.asarray(target, dtype=np.float64)
    loss = 0.5 * float(residual @ residual)

    head_grads = {}
    grad_on_weights = np.zeros(len(HEAD_NAMES))
    for k, name in enumerate(HEAD_NAMES):
        _, head_grads[name] = mlp_backward(proj.heads[name], caches[name], weights[k] * residual)
        grad_on_weights[k] = residual @ head_out[name]
    # softmax jacobian: d a_p / d logit_q = a_p (delta_pq - a_q)
    grad_logits = weights * (grad_on_weights - float(weights @ grad_on_weights))
    return loss, head_grads, grad_logits


def train_projector(
    proj: ProjectorParams,
    scene: GaussianScene,
    decoder: AutoencoderModel,
    targets,
    iters: int = 200,
    lr: float = 1e-3,
    optimizer=None,
):
    """Fit the projector by regressing scene tokens onto target tokens.

    Stage-1 style standalone training: full batch over the scene's
    primitives, half-squared-error per token, Adam. Returns
    (trained projector, loss curve); pass `optimizer` to continue a run.
    """
    from .nn import Adam  # local import keeps the module graph flat

    t = np.asarray(targets, dtype=np.float64)
    if t.shape != (scene.count, proj.token_dim):
        raise ValidationError(f"targets must be ({scene.count}, {proj.token_dim}), got {t.shape}")
    trained = proj.copy()
    arrays = trained.parameter_arrays()
    opt = optimizer if optimizer is not None else Adam(lr=lr)
    losses = []
    for _ in range(int(iters)):
        total = 0.0
        grad_sum = None
        for i in range(scene.count):
            loss, head_grads, grad_logits = projector_loss_and_grads(scene.primitive(i), trained, decoder, t[i])
            total += loss
            flat = []
            for name in HEAD_NAMES:
                flat.extend(head_grads[name].parameter_arrays())
            flat.append(grad_logits)
            if grad_sum is None:
                grad_sum = [g.astype(np.float64) for g in flat]
            else:
                for acc, g in zip(grad_sum, flat):
                    acc += g
        losses.append(total / scene.count)
        opt.step(arrays, [g / scene.count for g in grad_sum])
    return trained, losses


def projector_gradient_check(
    proj: ProjectorParams,
    decoder: AutoencoderModel,
    prim: GaussianPrimitive,
    target=None,
    eps: float = 1e-4,
) -> float:
    """Backprop through fusion softmax and all heads vs central differences."""
    work = proj.copy()
    if target is None:
        target = np.zeros(work.token_dim)
    _, head_grads, grad_logits = projector_loss_and_grads(prim, work, decoder, target)
    arrays, grads = [], []
    for name in HEAD_NAMES:
        arrays.extend(work.heads[name].parameter_arrays())
        grads.extend(head_grads[name].parameter_arrays())
    arrays.append(work.fusion_logits)
    grads.append(grad_logits)
    return finite_difference_check(
        lambda: projector_loss_and_grads(prim, work, decoder, target)[0], arrays, grads, eps=eps
    )
