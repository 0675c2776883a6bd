"""Bag-of-visual-words targets from teacher feature maps."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from ._numerics import ordered_sum, softmax
from .vocabulary import SinkhornConfig, TemperatureTracker, WordVocabulary, sinkhorn_assign

SIMPLEX_TOL = 1e-6


@dataclass
class BowTarget:
    level: str
    probs: torch.Tensor  # (K,) or (B, K)


@dataclass
class LevelTargets:
    """Everything the training step needs from one level's target computation."""

    target: BowTarget
    codes: torch.Tensor  # (B, U, K) soft-assignment codes
    features: torch.Tensor  # (B, U, C) valid local features
    sq_dists_to_nearest: torch.Tensor  # (B, U)
    nearest: torch.Tensor  # (B, U) index of the nearest word
    delta: float


def valid_locations(feature_map: torch.Tensor, edge_exclude: bool = True) -> torch.Tensor:
    """(B, C, H, W) map -> (B, U, C) features, dropping the outer ring if asked."""
    if feature_map.dim() == 3:
        feature_map = feature_map.unsqueeze(0)
    if edge_exclude:
        feature_map = feature_map[:, :, 1:-1, 1:-1]
    b, c, h, w = feature_map.shape
    if h * w == 0:
        raise ValueError("no valid locations left in the feature map after edge exclusion")
    return feature_map.reshape(b, c, h * w).transpose(1, 2)


def squared_distances(features: torch.Tensor, words: torch.Tensor) -> torch.Tensor:
    """||f - v||^2 for features (..., C) against words (K, C) -> (..., K)."""
    diff_norm = (features * features).sum(-1, keepdim=True) - 2.0 * features @ words.t() + (words * words).sum(-1)
    return diff_norm.clamp_min(0.0)


def _check_assign_inputs(vocab: WordVocabulary, delta: float):
    if len(vocab) == 0:
        raise ValueError("cannot assign features to an empty vocabulary")
    if not delta > 0:
        raise ValueError(f"temperature must be > 0, got {delta}")


def soft_assign(feature_map: torch.Tensor, vocab: WordVocabulary, delta: float, edge_exclude: bool = True) -> torch.Tensor:
    """Soft-assignment codes of shape (B, U, K) (or (U, K) for a single map)."""
    _check_assign_inputs(vocab, delta)
    single = feature_map.dim() == 3
    feats = valid_locations(feature_map, edge_exclude)
    codes = softmax(-squared_distances(feats, vocab.words.to(feats.dtype)) / delta, dim=-1)
    return codes[0] if single else codes


def reduce_bow(codes: torch.Tensor, mode: str = "max") -> torch.Tensor:
    """Reduce (..., U, K) codes over locations to (..., K)."""
    if codes.shape[-2] == 0:
        raise ValueError("cannot reduce codes with zero locations")
    if mode == "max":
        return codes.max(dim=-2).values
    if mode == "avg":
        # running elementwise sum: a vectorized mean over locations may sum tail words in a
        # different order, which would break bitwise equivariance to word permutations
        total = codes[..., 0, :]
        for u in range(1, codes.shape[-2]):
            total = total + codes[..., u, :]
        return total / codes.shape[-2]
    raise ValueError(f"unknown reduction mode {mode!r}")


def normalize_bow(unnormalized: torch.Tensor, level: str = "L") -> BowTarget:
    """L1 normalization onto the simplex."""
    if bool((unnormalized < 0).any()):
        raise ValueError("BoW entries must be non-negative")
    total = ordered_sum(unnormalized, dim=-1, keepdim=True)
    if bool((total <= 0).any()):
        raise ValueError("cannot normalize an all-zero BoW vector")
    return BowTarget(level=level, probs=unnormalized / total)


def level_targets(
    feature_map: torch.Tensor,
    vocab: WordVocabulary,
    tracker: TemperatureTracker,
    mode: str = "max",
    edge_exclude: bool = True,
    sinkhorn: SinkhornConfig | None = None,
) -> LevelTargets:
    """Targets for one level using the tracker's current (pre-update) temperature.

    An uninitialized tracker borrows the mean nearest squared distance of this
    batch. With ``sinkhorn`` set, balanced transport codes replace the
    softmax codes.
    """
    if len(vocab) == 0:
        raise ValueError("cannot assign features to an empty vocabulary")
    feats = valid_locations(feature_map, edge_exclude)
    words = vocab.words.to(feats.dtype)
    d2 = squared_distances(feats, words)
    nearest_d2, nearest = d2.min(dim=-1)
    if tracker.initialized:
        delta = tracker.delta
    else:
        delta = tracker.delta_base * float(nearest_d2.mean())
    if sinkhorn is not None:
        b, u, k = d2.shape
        Q = sinkhorn_assign(d2.reshape(b * u, k).t(), sinkhorn)
        codes = (Q * (b * u)).t().reshape(b, u, k)
    elif not delta > 0:
        # every feature sits on a word: the zero-temperature limit spreads mass over the nearest words
        ties = (d2 == nearest_d2.unsqueeze(-1)).to(d2.dtype)
        codes = ties / ordered_sum(ties, dim=-1, keepdim=True)
    else:
        codes = softmax(-d2 / delta, dim=-1)
    target = normalize_bow(reduce_bow(codes, mode), vocab.level)
    return LevelTargets(target, codes, feats, nearest_d2, nearest, delta)


def build_targets(pyramid, vocabs: dict, trackers: dict, mode: str = "max", edge_exclude: bool = True, sinkhorn=None) -> dict:
    """Per-level targets for every level that has a vocabulary."""
    missing = set(vocabs) ^ set(trackers)
    if missing:
        raise ValueError(f"vocabularies and trackers must cover the same levels; mismatch on {sorted(missing)}")
    return {
        level: level_targets(pyramid.level(level), vocabs[level], trackers[level], mode, edge_exclude, sinkhorn)
        for level in vocabs
    }


def brute_force_bow(feature_map, vocab, delta: float, mode: str = "max", edge_exclude: bool = True) -> BowTarget:
    """Scalar-loop reference for one (C, H, W) map. Slow; for small inputs only."""
    words = [[float(x) for x in row] for row in vocab.words.tolist()]
    if not words:
        raise ValueError("cannot assign features to an empty vocabulary")
    if not delta > 0:
        raise ValueError(f"temperature must be > 0, got {delta}")
    fmap = feature_map.tolist() if hasattr(feature_map, "tolist") else feature_map
    C, H, W = len(fmap), len(fmap[0]), len(fmap[0][0])
    rows = range(1, H - 1) if edge_exclude else range(H)
    cols = range(1, W - 1) if edge_exclude else range(W)
    K = len(words)
    pooled = [0.0] * K if mode == "avg" else [-1.0] * K
    count = 0
    for i in rows:
        for j in cols:
            logits = []
            for k in range(K):
                dist = 0.0
                for ch in range(C):
                    diff = fmap[ch][i][j] - words[k][ch]
                    dist += diff * diff
                logits.append(-dist / delta)
            top = max(logits)
            expd = [math.exp(z - top) for z in logits]
            denom = sum(expd)
            for k in range(K):
                q = expd[k] / denom
                if mode == "avg":
                    pooled[k] += q
                elif q > pooled[k]:
                    pooled[k] = q
            count += 1
    if count == 0:
        raise ValueError("no valid locations left in the feature map after edge exclusion")
    if mode == "avg":
        pooled = [p / count for p in pooled]
    total = sum(pooled)
    return BowTarget(level=vocab.level, probs=torch.tensor([p / total for p in pooled], dtype=torch.float64))
