"""Online visual-word vocabularies: FIFO queue and EMA k-means variants."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)

STRATEGIES = ("local", "global_avg", "local_avg_3x3")


class WordVocabulary:
    """Ordered visual words of one feature level (oldest first in queue mode)."""

    def __init__(self, level: str, dim: int, capacity: int, mode: str = "queue", dtype=torch.float32):
        if capacity < 1:
            raise ValueError("vocabulary capacity must be >= 1")
        if mode not in ("queue", "kmeans"):
            raise ValueError(f"unknown vocabulary mode {mode!r}")
        self.level = level
        self.dim = int(dim)
        self.capacity = int(capacity)
        self.mode = mode
        self.words = torch.empty(0, self.dim, dtype=dtype)
        # insertion_index of every word currently held, aligned with `words`
        self.word_ids = torch.empty(0, dtype=torch.long)
        self.insertion_index = 0

    def __len__(self) -> int:
        return self.words.shape[0]

    @property
    def full(self) -> bool:
        return len(self) == self.capacity

    def state_dict(self) -> dict:
        return {
            "level": self.level,
            "dim": self.dim,
            "capacity": self.capacity,
            "mode": self.mode,
            "words": self.words.clone(),
            "word_ids": self.word_ids.clone(),
            "insertion_index": self.insertion_index,
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "WordVocabulary":
        vocab = cls(state["level"], state["dim"], state["capacity"], state["mode"], dtype=state["words"].dtype)
        vocab.words = state["words"].clone()
        vocab.word_ids = state["word_ids"].clone()
        vocab.insertion_index = int(state["insertion_index"])
        return vocab


def sample_word_candidate(feature_map: torch.Tensor, strategy: str = "local_avg_3x3", rng=None) -> torch.Tensor:
    """Pick one candidate word per image from a (C, H, W) or (B, C, H, W) map.

    ``local`` samples one location, ``global_avg`` averages all locations and
    ``local_avg_3x3`` averages 3x3 windows (stride 1, no padding) and samples
    one window.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    single = feature_map.dim() == 3
    fmap = feature_map.unsqueeze(0) if single else feature_map
    if strategy == "global_avg":
        out = fmap.mean(dim=(2, 3))
    else:
        if strategy == "local_avg_3x3":
            if min(fmap.shape[-2:]) < 3:
                raise ValueError(f"feature map {tuple(fmap.shape[-2:])} is smaller than the 3x3 window")
            fmap = F.avg_pool2d(fmap, kernel_size=3, stride=1, padding=0)
        rng = np.random.default_rng(rng)
        b, c, h, w = fmap.shape
        idx = torch.as_tensor(rng.integers(0, h * w, size=b), dtype=torch.long)
        flat = fmap.reshape(b, c, h * w)
        out = flat[torch.arange(b), :, idx]
    return out[0] if single else out


def enqueue_words(vocab: WordVocabulary, candidates: torch.Tensor) -> WordVocabulary:
    """Append candidates in order, evicting the oldest words beyond capacity."""
    if vocab.mode != "queue":
        raise ValueError("enqueue_words requires a queue-mode vocabulary")
    candidates = torch.as_tensor(candidates)
    if candidates.dim() == 1:
        candidates = candidates.unsqueeze(0)
    if candidates.shape[-1] != vocab.dim:
        raise ValueError(f"candidate dimension {candidates.shape[-1]} != vocabulary dimension {vocab.dim}")
    n = candidates.shape[0]
    ids = torch.arange(vocab.insertion_index, vocab.insertion_index + n, dtype=torch.long)
    words = torch.cat([vocab.words, candidates.detach().to(vocab.words.dtype)], dim=0)
    word_ids = torch.cat([vocab.word_ids, ids])
    vocab.words = words[-vocab.capacity:].clone()
    vocab.word_ids = word_ids[-vocab.capacity:].clone()
    vocab.insertion_index += n
    return vocab


@dataclass
class TemperatureTracker:
    """EMA of the mean squared distance of features to their nearest word."""

    delta_base: float = 0.1
    momentum: float = 0.99
    mu_msd: float = 0.0
    initialized: bool = False

    def __post_init__(self):
        if self.delta_base <= 0:
            raise ValueError("delta_base must be > 0")

    @property
    def delta(self) -> float:
        if not self.initialized:
            raise RuntimeError("temperature tracker has not seen any batch yet")
        return self.delta_base * self.mu_msd

    def state_dict(self) -> dict:
        return dict(delta_base=self.delta_base, momentum=self.momentum, mu_msd=self.mu_msd, initialized=self.initialized)


def update_temperature(tracker: TemperatureTracker, sq_dists_to_nearest) -> TemperatureTracker:
    d = torch.as_tensor(sq_dists_to_nearest, dtype=torch.float64).reshape(-1)
    if d.numel() == 0:
        raise ValueError("update_temperature needs at least one distance")
    if bool((d < 0).any()):
        raise ValueError("squared distances must be non-negative")
    # sorted summation keeps the mean independent of input order
    batch_msd = float(torch.sort(d).values.sum() / d.numel())
    if not tracker.initialized:
        tracker.mu_msd = batch_msd
        tracker.initialized = True
    else:
        tracker.mu_msd = tracker.momentum * tracker.mu_msd + (1.0 - tracker.momentum) * batch_msd
    return tracker


@dataclass
class KMeansState:
    """EMA accumulators for online k-means (``v_k = M_k / N_k``)."""

    N: torch.Tensor
    M: torch.Tensor
    last_used_step: torch.Tensor
    gamma: float = 0.99

    @classmethod
    def from_words(cls, words: torch.Tensor, gamma: float = 0.99, step: int = 0) -> "KMeansState":
        k = words.shape[0]
        return cls(
            N=torch.ones(k, dtype=words.dtype),
            M=words.detach().clone(),
            last_used_step=torch.full((k,), step, dtype=torch.long),
            gamma=gamma,
        )

    def centroids(self) -> torch.Tensor:
        out = self.M.clone()
        pos = self.N > 0
        out[pos] = self.M[pos] / self.N[pos].unsqueeze(1)
        return out

    def state_dict(self) -> dict:
        return dict(N=self.N.clone(), M=self.M.clone(), last_used_step=self.last_used_step.clone(), gamma=self.gamma)

    @classmethod
    def from_state_dict(cls, state: dict) -> "KMeansState":
        return cls(state["N"].clone(), state["M"].clone(), state["last_used_step"].clone(), state["gamma"])


def kmeans_ema_update(
    state: KMeansState,
    codes: torch.Tensor,
    features: torch.Tensor,
    vocab: WordVocabulary | None = None,
    tol: float = 1e-6,
) -> KMeansState:
    """EMA update of assignment mass and feature sums from a K x B code matrix.

    When ``vocab`` is given its words are refreshed to the new centroids.
    """
    codes = codes.detach().to(state.M.dtype)
    features = features.detach().to(state.M.dtype)
    if codes.shape != (state.N.shape[0], features.shape[0]):
        raise ValueError(f"codes shape {tuple(codes.shape)} incompatible with K={state.N.shape[0]}, B={features.shape[0]}")
    col_err = (codes.sum(dim=0) - 1.0).abs().max().item() if codes.shape[1] else 0.0
    if col_err > tol or bool((codes < 0).any()):
        raise ValueError(f"code columns must lie on the simplex (max column-sum error {col_err:.3g})")
    g = state.gamma
    n = codes.sum(dim=1)
    m = codes @ features
    state.N = g * state.N + (1.0 - g) * n
    state.M = g * state.M + (1.0 - g) * m
    if vocab is not None:
        vocab.words = state.centroids()
    return state


def mark_used(state: KMeansState, nearest: torch.Tensor, step: int) -> KMeansState:
    """Record ``step`` as the last use of every word that was some feature's nearest word."""
    used = torch.unique(nearest.reshape(-1))
    state.last_used_step[used] = step
    return state


def replace_rare_words(
    state: KMeansState,
    vocab: WordVocabulary,
    current_features: torch.Tensor,
    step: int,
    rng=None,
    max_idle_steps: int = 1000,
) -> tuple[KMeansState, WordVocabulary]:
    """Replace words idle for more than ``max_idle_steps`` with random batch features."""
    if vocab.mode != "kmeans":
        raise ValueError("replace_rare_words requires a kmeans-mode vocabulary")
    stale = torch.nonzero(step - state.last_used_step > max_idle_steps).reshape(-1)
    if stale.numel() == 0:
        return state, vocab
    rng = np.random.default_rng(rng)
    picks = torch.as_tensor(rng.integers(0, current_features.shape[0], size=stale.numel()), dtype=torch.long)
    replacement = current_features.detach()[picks].to(state.M.dtype)
    state.N[stale] = 1.0
    state.M[stale] = replacement
    state.last_used_step[stale] = step
    vocab.words = state.centroids()
    return state, vocab


@dataclass
class SinkhornConfig:
    epsilon: float = 0.05
    max_iters: int = 100
    marginal_tol: float = 1e-3

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class SinkhornResult:
    Q: torch.Tensor
    iterations: int
    row_deviation: float
    col_deviation: float
    converged: bool = field(default=True)


def sinkhorn_assign(D: torch.Tensor, cfg: SinkhornConfig | None = None, return_info: bool = False):
    """Entropic transport plan with uniform marginals for a K x B cost matrix.

    Rows sum to 1/K and columns to 1/B. Scaling runs in the log domain on the
    kernel ``exp(-D/epsilon)``; it stops once both L1 marginal deviations drop
    below ``marginal_tol`` or after ``max_iters`` row/column sweeps.
    """
    cfg = cfg or SinkhornConfig()
    D = torch.as_tensor(D)
    if D.dim() != 2 or min(D.shape) < 1:
        raise ValueError(f"expected a non-empty K x B matrix, got shape {tuple(D.shape)}")
    if not bool(torch.isfinite(D).all()):
        raise ValueError("distance matrix contains non-finite entries")
    K, B = D.shape
    log_kernel = -D / cfg.epsilon
    log_r = -math.log(K)
    log_c = -math.log(B)
    f = torch.zeros(K, dtype=D.dtype)
    g = torch.zeros(B, dtype=D.dtype)
    row_dev = col_dev = float("inf")
    it = 0
    for it in range(1, cfg.max_iters + 1):
        f = log_r - torch.logsumexp(log_kernel + g[None, :], dim=1)
        g = log_c - torch.logsumexp(log_kernel + f[:, None], dim=0)
        log_q = log_kernel + f[:, None] + g[None, :]
        Q = log_q.exp()
        row_dev = (Q.sum(dim=1) - 1.0 / K).abs().sum().item()
        col_dev = (Q.sum(dim=0) - 1.0 / B).abs().sum().item()
        if row_dev < cfg.marginal_tol and col_dev < cfg.marginal_tol:
            break
    converged = row_dev < cfg.marginal_tol and col_dev < cfg.marginal_tol
    if not converged:
        logger.warning(
            "sinkhorn did not reach tolerance %.1e in %d iterations (row dev %.3e, col dev %.3e)",
            cfg.marginal_tol, cfg.max_iters, row_dev, col_dev,
        )
    if return_info:
        return SinkhornResult(Q, it, row_dev, col_dev, converged)
    return Q
