"""Generation-side math: depth <-> pseudo-RGB conversion, a variance-preserving
noise schedule, v-prediction targets and loss, dual-condition sequence
assembly, and a per-pixel toy denoiser that closes the training loop.

The v-target follows the clean-signal convention v = alpha_t * eps - sigma_t * d,
which makes (d, eps) exactly recoverable from (d_t, v) because
alpha^2 + sigma^2 = 1. The literal noisy-signal variant
v = alpha_t * eps - sigma_t * d_t is also exposed (convention="noisy").
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .conditions import SparseConditionMap
from .errors import NumericError, ValidationError
from .nn import Adam, MlpParams, finite_difference_check, mlp_backward, mlp_forward_cache, mlp_init

TIME_EMBED_BANDS = 8


def depth_to_pseudo_rgb(depth) -> np.ndarray:
    """Replicate a single-channel map into three identical channels."""
    d = np.asarray(depth, dtype=np.float64)
    if d.ndim != 2 or not np.all(np.isfinite(d)):
        raise ValidationError("depth must be a finite (H, W) map")
    return np.repeat(d[:, :, None], 3, axis=2)


def pseudo_rgb_to_depth(rgb) -> np.ndarray:
    """Average the three channels back into a single-channel map."""
    r = np.asarray(rgb, dtype=np.float64)
    if r.ndim != 3 or r.shape[2] != 3:
        raise ValidationError("expected an (H, W, 3) map")
    return r.mean(axis=2)


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step (alpha_t, sigma_t) pairs for t = 0..T on the unit circle."""

    alpha: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float64)
        s = np.asarray(self.sigma, dtype=np.float64)
        if a.ndim != 1 or a.shape != s.shape or a.size < 2:
            raise ValidationError("alpha and sigma must be matching 1-d arrays, length >= 2")
        if np.max(np.abs(a * a + s * s - 1.0)) > 1e-9:
            raise ValidationError("schedule violates alpha^2 + sigma^2 = 1")
        if np.any(np.diff(a) > 1e-12):
            raise ValidationError("alpha must be monotone non-increasing")
        if abs(a[0] - 1.0) > 1e-6 or abs(s[0]) > 1e-6:
            raise ValidationError("schedule must start at (alpha, sigma) = (1, 0)")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "sigma", s)

    @property
    def steps(self) -> int:
        return self.alpha.size - 1

    def at(self, t: int):
        if not 0 <= t <= self.steps:
            raise ValidationError(f"timestep {t} outside [0, {self.steps}]")
        return float(self.alpha[t]), float(self.sigma[t])


def make_schedule(steps: int, family: str = "cosine") -> NoiseSchedule:
    """Cosine variance-preserving schedule: alpha_t = cos(pi t / 2T).

    The endpoints are pinned to exactly (1, 0) and (0, 1) so the boundary
    identities d_0 = d and d_T = eps hold bitwise.
    """
    if steps < 2:
        raise ValidationError("steps must be >= 2")
    if family != "cosine":
        raise ValidationError(f"unknown schedule family {family!r}")
    t = np.arange(steps + 1, dtype=np.float64)
    phase = 0.5 * np.pi * t / steps
    alpha, sigma = np.cos(phase), np.sin(phase)
    alpha[0], sigma[0] = 1.0, 0.0
    alpha[-1], sigma[-1] = 0.0, 1.0
    return NoiseSchedule(alpha=alpha, sigma=sigma)


def sample_noise(shape, seed: int) -> np.ndarray:
    """Standard normal draw from a seeded generator."""
    return np.random.default_rng(seed).standard_normal(shape)


def _paired(d, eps):
    d = np.asarray(d, dtype=np.float64)
    e = np.asarray(eps, dtype=np.float64)
    if d.shape != e.shape:
        raise ValidationError(f"shape mismatch: {d.shape} vs {e.shape}")
    return d, e


def add_noise(d, eps, schedule: NoiseSchedule, t: int) -> np.ndarray:
    """Forward process d_t = alpha_t * d + sigma_t * eps."""
    d, e = _paired(d, eps)
    alpha, sigma = schedule.at(t)
    return alpha * d + sigma * e


def v_target(d, eps, schedule: NoiseSchedule, t: int, convention: str = "clean") -> np.ndarray:
    """v-prediction target.

    convention="clean":  v = alpha_t * eps - sigma_t * d
    convention="noisy":  v = alpha_t * eps - sigma_t * d_t  (literal noisy-input form)
    """
    d, e = _paired(d, eps)
    alpha, sigma = schedule.at(t)
    if convention == "clean":
        return alpha * e - sigma * d
    if convention == "noisy":
        return alpha * e - sigma * (alpha * d + sigma * e)
    raise ValidationError(f"unknown v-target convention {convention!r}")


def recover_clean(d_t, v, schedule: NoiseSchedule, t: int) -> np.ndarray:
    """Invert the clean-signal convention: d = alpha_t * d_t - sigma_t * v."""
    d_t, v = _paired(d_t, v)
    alpha, sigma = schedule.at(t)
    return alpha * d_t - sigma * v


def recover_noise(d_t, v, schedule: NoiseSchedule, t: int) -> np.ndarray:
    """Invert the clean-signal convention: eps = sigma_t * d_t + alpha_t * v."""
    d_t, v = _paired(d_t, v)
    alpha, sigma = schedule.at(t)
    return sigma * d_t + alpha * v


def v_loss(prediction, target) -> float:
    """Mean squared error over all elements."""
    p, t = _paired(prediction, target)
    return float(np.mean((p - t) ** 2))


def assemble_condition_sequence(image_tokens, text_tokens, type_embeddings) -> np.ndarray:
    """Concatenate image-then-text tokens, adding the matching type embedding
    (row 0: visual, row 1: textual) to every token."""
    types = np.asarray(type_embeddings, dtype=np.float64)
    if types.ndim != 2 or types.shape[0] != 2:
        raise ValidationError("type_embeddings must be (2, dim)")
    dim = types.shape[1]

    def block(tokens, type_row):
        t = np.asarray(tokens, dtype=np.float64).reshape(-1, dim) if np.size(tokens) else np.zeros((0, dim))
        if t.size and t.shape[1] != dim:
            raise ValidationError(f"token dim {t.shape[1]} != type embedding dim {dim}")
        return t + types[type_row]

    return np.vstack([block(image_tokens, 0), block(text_tokens, 1)])


@dataclass
class DualCondition:
    """Low-level sparse maps plus an optional high-level token sequence.

    `reference` is a reserved slot for a reference latent; nothing in the toy
    training loop consumes it.
    """

    low_level: SparseConditionMap
    high_level: np.ndarray | None = None       # (k, token_dim) or None
    type_embeddings: np.ndarray | None = None  # (2, token_dim), required with high_level
    reference: np.ndarray | None = None

    def __post_init__(self):
        if self.high_level is not None:
            hl = np.asarray(self.high_level, dtype=np.float64)
            if hl.ndim != 2 or hl.shape[0] < 1:
                raise ValidationError("high_level must be (k, token_dim)")
            if self.type_embeddings is None:
                raise ValidationError("high_level conditioning requires type_embeddings")
            object.__setattr__(self, "high_level", hl)
        if self.type_embeddings is not None:
            te = np.asarray(self.type_embeddings, dtype=np.float64)
            if te.ndim != 2 or te.shape[0] != 2:
                raise ValidationError("type_embeddings must be (2, token_dim)")
            object.__setattr__(self, "type_embeddings", te)


def time_embedding(t: int, steps: int, bands: int = TIME_EMBED_BANDS) -> np.ndarray:
    """Sinusoidal embedding of normalized time, 2*bands values."""
    tau = t / steps
    freqs = 2.0 ** np.arange(bands) * np.pi
    return np.concatenate([np.sin(tau * freqs), np.cos(tau * freqs)])


def _image_summary_token(cond: DualCondition, dim: int) -> np.ndarray:
    """Cheap visual token for the condition sequence: mean RGB, mean depth and
    coverage of the low-level maps, zero-padded to token width."""
    m = cond.low_level
    cover = float(m.valid.mean())
    mean_rgb = m.rgb[m.valid].mean(axis=0) if m.valid.any() else np.zeros(3)
    mean_depth = float(m.depth[m.valid].mean()) if m.valid.any() else 0.0
    tok = np.zeros(dim)
    tok[: min(5, dim)] = np.array([*mean_rgb, mean_depth, cover])[: min(5, dim)]
    return tok


def condition_vector(cond: DualCondition, token_dim: int) -> np.ndarray:
    """Pooled conditioning vector fed to the denoiser.

    Always built through assemble_condition_sequence so the high-level tokens
    enter exactly the way the sequence interface defines; without high-level
    tokens the sequence is just the visual summary token plus its type row.
    """
    types = cond.type_embeddings if cond.type_embeddings is not None else np.zeros((2, token_dim))
    image_tokens = _image_summary_token(cond, token_dim)[None, :]
    text_tokens = cond.high_level if cond.high_level is not None else np.zeros((0, token_dim))
    seq = assemble_condition_sequence(image_tokens, text_tokens, types)
    return seq.mean(axis=0)


@dataclass
class ToyDenoiser:
    """Per-pixel MLP predicting v from (noisy value, low-level condition
    pixels, time embedding, pooled condition vector)."""

    mlp: MlpParams
    channels: int
    token_dim: int
    time_bands: int = TIME_EMBED_BANDS

    @property
    def input_dim(self) -> int:
        return self.channels + 4 + 2 * self.time_bands + self.token_dim

    def copy(self) -> "ToyDenoiser":
        return ToyDenoiser(self.mlp.copy(), self.channels, self.token_dim, self.time_bands)


def make_toy_denoiser(channels: int, token_dim: int, hidden: int = 64, seed: int = 0) -> ToyDenoiser:
    rng = np.random.default_rng(seed)
    input_dim = channels + 4 + 2 * TIME_EMBED_BANDS + token_dim
    mlp = mlp_init([input_dim, hidden, channels], rng)
    return ToyDenoiser(mlp=mlp, channels=channels, token_dim=token_dim)


def _denoiser_features(model: ToyDenoiser, noisy: np.ndarray, cond: DualCondition, t: int, steps: int) -> np.ndarray:
    h, w, c = noisy.shape
    if c != model.channels:
        raise ValidationError(f"latent channels {c} != model channels {model.channels}")
    if cond.low_level.depth.shape != (h, w):
        raise ValidationError("low-level condition resolution must match the latent")
    pix = noisy.reshape(-1, c)
    low = np.concatenate([cond.low_level.rgb.reshape(-1, 3), cond.low_level.depth.reshape(-1, 1)], axis=1)
    temb = np.tile(time_embedding(t, steps, model.time_bands), (pix.shape[0], 1))
    cvec = np.tile(condition_vector(cond, model.token_dim), (pix.shape[0], 1))
    return np.concatenate([pix, low, temb, cvec], axis=1)


def denoise(model: ToyDenoiser, noisy, cond: DualCondition, t: int, steps: int) -> np.ndarray:
    """Predict the v field for a noisy latent."""
    noisy = np.asarray(noisy, dtype=np.float64)
    feats = _denoiser_features(model, noisy, cond, t, steps)
    out, _ = mlp_forward_cache(model.mlp, feats)
    return out.reshape(noisy.shape)


def _denoiser_loss_and_grads(model: ToyDenoiser, noisy, cond, t, steps, target):
    feats = _denoiser_features(model, noisy, cond, t, steps)
    out, cache = mlp_forward_cache(model.mlp, feats)
    resid = out - target.reshape(-1, model.channels)
    loss = float(np.mean(resid**2))
    _, grads = mlp_backward(model.mlp, cache, (2.0 / resid.size) * resid)
    return loss, grads


DIVERGENCE_LIMIT = 1e6


def train_toy_denoiser(
    data,
    schedule: NoiseSchedule,
    iters: int = 2000,
    lr: float = 1e-3,
    seed: int = 0,
    hidden: int = 64,
    token_dim: int = 8,
    timesteps=None,
    noise_draws: int = 4,
    model: ToyDenoiser | None = None,
    start_iter: int = 0,
    optimizer=None,
):
    """Train a toy denoiser on (clean latent, DualCondition) pairs.

    A frozen set of (t, eps) draws per sample is generated up front from
    `seed` (simulation-free style), so targets are deterministic and the loop
    can drive the v-prediction loss toward zero. `timesteps` pins the
    timestep pool (default: every t in 1..T). Passing start_iter plus the
    saved optimizer resumes a run exactly.
    """
    samples = [(np.asarray(d, dtype=np.float64), c) for d, c in data]
    if not samples:
        raise ValidationError("need at least one (latent, condition) sample")
    channels = samples[0][0].shape[2]
    if model is None:
        model = make_toy_denoiser(channels, token_dim, hidden=hidden, seed=seed)
    else:
        model = model.copy()
    rng = np.random.default_rng(seed)
    pool = list(range(1, schedule.steps + 1)) if timesteps is None else [int(t) for t in timesteps]
    for t in pool:
        schedule.at(t)
    draws = []
    for clean, cond in samples:
        for _ in range(max(1, int(noise_draws))):
            t = int(pool[rng.integers(len(pool))])
            eps = rng.standard_normal(clean.shape)
            noisy = add_noise(clean, eps, schedule, t)
            target = v_target(clean, eps, schedule, t)
            draws.append((noisy, cond, t, target))

    opt = optimizer if optimizer is not None else Adam(lr=lr)
    arrays = model.mlp.parameter_arrays()
    losses = []
    for it in range(start_iter, start_iter + int(iters)):
        noisy, cond, t, target = draws[it % len(draws)]
        loss, grads = _denoiser_loss_and_grads(model, noisy, cond, t, schedule.steps, target)
        if not np.isfinite(loss) or loss > DIVERGENCE_LIMIT:
            raise NumericError(f"toy denoiser diverged at iteration {it} (loss={loss})")
        losses.append(loss)
        opt.step(arrays, grads.parameter_arrays())
    return model, losses


def denoiser_gradient_check(model: ToyDenoiser, noisy, cond: DualCondition, t: int, steps: int, target, eps: float = 1e-4) -> float:
    """Backprop vs central differences for the toy denoiser MSE loss."""
    work = model.copy()
    noisy = np.asarray(noisy, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _, grads = _denoiser_loss_and_grads(work, noisy, cond, t, steps, target)
    return finite_difference_check(
        lambda: _denoiser_loss_and_grads(work, noisy, cond, t, steps, target)[0],
        work.mlp.parameter_arrays(),
        grads.parameter_arrays(),
        eps=eps,
    )
