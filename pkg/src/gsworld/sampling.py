"""Task-aware token sampling: uniform + top-k hybrid selection for global
understanding, and cross-attention language-guided selection for grounding.

All selection is deterministic given (inputs, seed). Salience for the top-k
phase is a per-token scalar supplied by the caller; the canonical choice is
sigmoid(opacity_logit) of the source primitive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class SamplingConfig:
    budget: int = 4096
    uniform_fraction: float = 0.5
    seed: int = 0
    temperature: float = 1.0

    def __post_init__(self):
        if self.budget < 1:
            raise ValidationError("budget must be >= 1")
        if not 0.0 <= self.uniform_fraction <= 1.0:
            raise ValidationError("uniform_fraction must lie in [0, 1]")
        if self.temperature <= 0.0:
            raise ValidationError("temperature must be positive")


@dataclass(frozen=True)
class TextQueryEmbedding:
    """Stand-in for embedded text query tokens; dims must match scene tokens."""

    tokens: np.ndarray  # (m, token_dim)

    def __post_init__(self):
        t = np.asarray(self.tokens, dtype=np.float64)
        if t.ndim != 2 or t.shape[0] < 1:
            raise ValidationError("query needs at least one token, shaped (m, dim)")
        if not np.all(np.isfinite(t)):
            raise ValidationError("query tokens must be finite")
        object.__setattr__(self, "tokens", t)


@dataclass(frozen=True)
class SampleResult:
    indices: np.ndarray  # sorted unique int64
    scores: np.ndarray   # score per selected index, aligned with `indices`
    method: str

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1 or np.unique(idx).size != idx.size or np.any(np.diff(idx) <= 0) and idx.size > 1:
            raise ValidationError("indices must be sorted and unique")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "scores", np.asarray(self.scores, dtype=np.float64))
        if self.scores.shape != idx.shape:
            raise ValidationError("scores must align with indices")


def _result(indices, score_lookup, method) -> SampleResult:
    idx = np.sort(np.asarray(sorted(indices), dtype=np.int64))
    return SampleResult(indices=idx, scores=score_lookup(idx), method=method)


def uniform_sample(count_available: int, cfg: SamplingConfig) -> SampleResult:
    """Uniform draw without replacement via a seeded Fisher-Yates shuffle."""
    if count_available < 1:
        raise ValidationError("count_available must be >= 1")
    k = min(cfg.budget, count_available)
    rng = np.random.default_rng(cfg.seed)
    chosen = _fisher_yates_draw(np.arange(count_available, dtype=np.int64), k, rng)
    return _result(chosen, lambda idx: np.full(idx.shape, 1.0 / count_available), "uniform")


def _fisher_yates_draw(pool: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    arr = pool.copy()
    for i in range(k):
        j = int(rng.integers(i, arr.size))
        arr[i], arr[j] = arr[j], arr[i]
    return arr[:k]


def topk_sample(scores, k: int) -> SampleResult:
    """The k largest scores; ties broken toward the smaller index. k is
    clamped to the number of available scores."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size < 1:
        raise ValidationError("scores must be a non-empty 1-d array")
    if k < 1:
        raise ValidationError("k must be >= 1")
    k = min(k, s.size)
    order = np.argsort(-s, kind="stable")
    return _result(order[:k], lambda idx: s[idx], "topk")


def hybrid_sample(salience, cfg: SamplingConfig) -> SampleResult:
    """Budgeted mix of top-k (by salience) and uniform picks.

    The top-k phase takes budget - round(uniform_fraction * budget) tokens;
    the uniform phase draws the rest from the not-yet-chosen indices; any
    shortfall (complement exhausted) is backfilled by the next-best top-k
    candidates.
    """
    s = np.asarray(salience, dtype=np.float64)
    if s.ndim != 1 or s.size < 1:
        raise ValidationError("salience must be a non-empty 1-d array")
    n = min(cfg.budget, s.size)
    n_uniform = int(np.floor(cfg.uniform_fraction * n + 0.5))
    n_top = n - n_uniform
    order = np.argsort(-s, kind="stable")
    chosen = list(order[:n_top])
    taken = set(chosen)
    remaining = np.array([i for i in range(s.size) if i not in taken], dtype=np.int64)
    if n_uniform > 0 and remaining.size > 0:
        rng = np.random.default_rng(cfg.seed)
        draw = _fisher_yates_draw(remaining, min(n_uniform, remaining.size), rng)
        chosen.extend(draw.tolist())
        taken.update(draw.tolist())
    for idx in order[n_top:]:  # backfill with next-best top-k until budget met
        if len(chosen) >= n:
            break
        if int(idx) not in taken:
            chosen.append(int(idx))
            taken.add(int(idx))
    return _result(chosen, lambda idx: s[idx], "hybrid")


def cross_attention_scores(gauss_tokens, query: TextQueryEmbedding, temperature: float = 1.0) -> np.ndarray:
    """Relevance of each Gaussian token to the query.

    Per query token q: a_q = softmax_i(<q, g_i> / sqrt(dim) / temperature),
    a distribution over Gaussian tokens. A token's score is its best
    attention over the query tokens.
    """
    g = np.asarray(gauss_tokens, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] < 1:
        raise ValidationError("gauss_tokens must be a non-empty (n, dim) array")
    q = query.tokens
    if q.shape[1] != g.shape[1]:
        raise ValidationError(f"query dim {q.shape[1]} != token dim {g.shape[1]}")
    if temperature <= 0.0:
        raise ValidationError("temperature must be positive")
    logits = (q @ g.T) / (np.sqrt(g.shape[1]) * temperature)  # (m, n)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    attention = e / e.sum(axis=1, keepdims=True)
    return attention.max(axis=0)


def language_guided_sample(gauss_tokens, query: TextQueryEmbedding, cfg: SamplingConfig) -> SampleResult:
    """Keep the budget's worth of most query-relevant tokens."""
    scores = cross_attention_scores(gauss_tokens, query, cfg.temperature)
    picked = topk_sample(scores, cfg.budget)
    return SampleResult(indices=picked.indices, scores=picked.scores, method="language")
