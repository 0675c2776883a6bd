"""Student-side BoW prediction: dynamic weight generator and fixed linear baseline."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from ._numerics import softmax


@dataclass
class PredictionConfig:
    kappa: float = 5.0

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError("kappa must be > 0")


class WeightGenerator(nn.Module):
    """Maps a word (dim ``word_dim``) to a unit-norm prediction weight (dim ``feature_dim``).

    Two fully connected layers with a ReLU in between and a hidden width of
    twice the student feature dimension. Inputs and outputs are L2-normalized.
    """

    def __init__(self, word_dim: int, feature_dim: int, final_bias: bool = False):
        super().__init__()
        self.word_dim = word_dim
        self.feature_dim = feature_dim
        self.fc1 = nn.Linear(word_dim, 2 * feature_dim)
        self.fc2 = nn.Linear(2 * feature_dim, feature_dim, bias=final_bias)

    def forward(self, words: torch.Tensor) -> torch.Tensor:
        x = F.normalize(words, dim=-1)
        x = self.fc2(F.relu(self.fc1(x)))
        return F.normalize(x, dim=-1)


def generate_weights(gen: WeightGenerator, vocab) -> torch.Tensor:
    """One unit-norm weight row per word of ``vocab`` (words carry no gradient)."""
    words = vocab.words if hasattr(vocab, "words") else vocab
    if words.shape[-1] != gen.word_dim:
        raise ValueError(f"word dimension {words.shape[-1]} != generator input {gen.word_dim}")
    return gen(words.detach().to(gen.fc1.weight.dtype))


def predict_bow(pooled: torch.Tensor, weights: torch.Tensor, cfg: PredictionConfig) -> torch.Tensor:
    """Softmax over words of ``kappa * <w_k, pooled>``; pooled is (c,) or (B, c)."""
    if pooled.shape[-1] != weights.shape[-1]:
        raise ValueError(f"feature dim {pooled.shape[-1]} != weight dim {weights.shape[-1]}")
    return softmax(cfg.kappa * (pooled @ weights.t()), dim=-1)


class FixedHead(nn.Module):
    """Plain linear-plus-softmax head with one learned weight row per word slot."""

    def __init__(self, num_words: int, feature_dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(num_words, feature_dim))
        nn.init.normal_(self.weight, std=feature_dim ** -0.5)

    @property
    def num_words(self) -> int:
        return self.weight.shape[0]


def fixed_predict_bow(pooled: torch.Tensor, head: FixedHead | torch.Tensor) -> torch.Tensor:
    weight = head.weight if isinstance(head, FixedHead) else head
    if pooled.shape[-1] != weight.shape[-1]:
        raise ValueError(f"feature dim {pooled.shape[-1]} != weight dim {weight.shape[-1]}")
    return softmax(pooled @ weight.t(), dim=-1)


def generator_param_count(word_dim: int, feature_dim: int, final_bias: bool = False) -> int:
    hidden = 2 * feature_dim
    return (word_dim + 1) * hidden + (hidden + int(final_bias)) * feature_dim
