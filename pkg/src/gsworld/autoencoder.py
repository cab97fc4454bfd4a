"""Scene-wise language autoencoder: compresses feature vectors (512-d by
default) to a small latent (3-d by default) and decodes back.

Trained per scene_id with an explicit reconstruction objective
d_ae = 1 - cos(recon, input) + 0.1 * ||recon - input||^2, Adam, and
hand-rolled backprop through the declared layers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ValidationError
from .nn import Adam, MlpParams, finite_difference_check, mlp_backward, mlp_forward, mlp_forward_cache, mlp_init

FEATURE_DIM = 512
LATENT_DIM = 3
HIDDEN_DIMS = (256, 64)


@dataclass
class AutoencoderModel:
    encoder: MlpParams
    decoder: MlpParams
    scene_id: str = "scene"

    def __post_init__(self):
        if self.encoder.output_dim != self.decoder.input_dim:
            raise ValidationError("encoder bottleneck dim must equal decoder input dim")
        if self.encoder.input_dim != self.decoder.output_dim:
            raise ValidationError("encoder input dim must equal decoder output dim")

    @property
    def feature_dim(self) -> int:
        return self.encoder.input_dim

    @property
    def latent_dim(self) -> int:
        return self.encoder.output_dim

    def copy(self) -> "AutoencoderModel":
        return AutoencoderModel(self.encoder.copy(), self.decoder.copy(), self.scene_id)


def make_autoencoder(
    scene_id: str = "scene",
    feature_dim: int = FEATURE_DIM,
    latent_dim: int = LATENT_DIM,
    hidden_dims=HIDDEN_DIMS,
    seed: int = 0,
) -> AutoencoderModel:
    """Default architecture: 512 -> 256 -> 64 -> 3 and the mirrored decoder."""
    rng = np.random.default_rng(seed)
    hidden = list(hidden_dims)
    encoder = mlp_init([feature_dim, *hidden, latent_dim], rng)
    decoder = mlp_init([latent_dim, *reversed(hidden), feature_dim], rng)
    return AutoencoderModel(encoder=encoder, decoder=decoder, scene_id=scene_id)


def encode(model: AutoencoderModel, feature) -> np.ndarray:
    """Deterministic forward pass through the encoder; accepts (D,) or (B, D)."""
    return mlp_forward(model.encoder, feature)


def decode(model: AutoencoderModel, latent) -> np.ndarray:
    return mlp_forward(model.decoder, latent)


def reconstruction_distance(recon, target, l2_weight: float = 0.1):
    """d_ae per row plus its gradient w.r.t. recon.

    recon/target: (B, D). Returns (distances (B,), grad (B, D)).
    """
    r = np.atleast_2d(np.asarray(recon, dtype=np.float64))
    t = np.atleast_2d(np.asarray(target, dtype=np.float64))
    nr2 = (r * r).sum(axis=1)
    nt2 = (t * t).sum(axis=1)
    dot = (r * t).sum(axis=1)
    denom = np.sqrt(nr2 * nt2) + 1e-12
    diff = r - t
    dist = 1.0 - dot / denom + l2_weight * (diff * diff).sum(axis=1)
    ratio = dot / np.maximum(nr2, 1e-24)
    grad = (ratio[:, None] * r - t) / denom[:, None] + 2.0 * l2_weight * diff
    return dist, grad


def _loss_and_grads(model: AutoencoderModel, batch: np.ndarray):
    """Mean d_ae over the batch plus parameter gradients via backprop."""
    latent, enc_cache = mlp_forward_cache(model.encoder, batch)
    recon, dec_cache = mlp_forward_cache(model.decoder, latent)
    dist, grad_recon = reconstruction_distance(recon, batch)
    loss = float(dist.mean())
    grad_recon = grad_recon / batch.shape[0]
    grad_latent, dec_grads = mlp_backward(model.decoder, dec_cache, grad_recon)
    _, enc_grads = mlp_backward(model.encoder, enc_cache, grad_latent)
    return loss, enc_grads, dec_grads


def train_autoencoder(
    model: AutoencoderModel,
    features,
    iters: int = 2000,
    lr: float = 3e-3,
    batch: int = 0,
    seed: int = 0,
    start_iter: int = 0,
    optimizer=None,
):
    """Train a copy of `model` on the feature set; returns (model, loss curve).

    batch=0 means full-batch. Minibatch composition is drawn per iteration
    from a generator keyed on (seed, global iteration), so runs are
    reproducible and a resumed run (pass start_iter and the saved optimizer)
    continues exactly where the original left off.
    """
    data = np.asarray(features, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 2:
        raise ValidationError("need at least 2 feature vectors, shaped (n, feature_dim)")
    if data.shape[1] != model.feature_dim:
        raise ValidationError(f"feature dim {data.shape[1]} != model dim {model.feature_dim}")
    trained = model.copy()
    arrays = trained.encoder.parameter_arrays() + trained.decoder.parameter_arrays()
    opt = optimizer if optimizer is not None else Adam(lr=lr)
    losses = []
    for it in range(start_iter, start_iter + int(iters)):
        if batch and batch < data.shape[0]:
            rng = np.random.default_rng((seed, it))
            rows = data[rng.choice(data.shape[0], size=batch, replace=False)]
        else:
            rows = data
        loss, enc_grads, dec_grads = _loss_and_grads(trained, rows)
        if not np.isfinite(loss):
            raise NumericError(f"autoencoder training hit a non-finite loss at iteration {it}")
        losses.append(loss)
        opt.step(arrays, enc_grads.parameter_arrays() + dec_grads.parameter_arrays())
    return trained, losses


def gradient_check(model: AutoencoderModel, sample, eps: float = 1e-4) -> float:
    """Backprop vs central finite differences on one sample batch.

    Returns the worst-case relative error across every encoder and decoder
    parameter; intended for small models (the check is O(parameters) loss
    evaluations).
    """
    batch = np.atleast_2d(np.asarray(sample, dtype=np.float64))
    work = model.copy()
    _, enc_grads, dec_grads = _loss_and_grads(work, batch)
    arrays = work.encoder.parameter_arrays() + work.decoder.parameter_arrays()
    grads = enc_grads.parameter_arrays() + dec_grads.parameter_arrays()
    return finite_difference_check(lambda: _loss_and_grads(work, batch)[0], arrays, grads, eps=eps)
