"""
Bag-of-words targets from a feature map
=======================================

A teacher feature map is turned into a distribution over visual words in
three moves: soft-assign every interior location to the vocabulary, max-pool
the codes over locations, then L1-normalize. This script walks through each
move on a toy map and checks the result against the scalar-loop reference.
"""

# %%
# A toy 4-channel, 6x6 feature map and a vocabulary of five words.
import torch

from obow import (
    FeaturePyramid,
    TemperatureTracker,
    WordVocabulary,
    brute_force_bow,
    build_targets,
    enqueue_words,
    normalize_bow,
    reduce_bow,
    soft_assign,
)

torch.manual_seed(0)
fmap = torch.randn(4, 6, 6, dtype=torch.float64)
vocab = WordVocabulary("L", dim=4, capacity=5, dtype=torch.float64)
enqueue_words(vocab, torch.randn(5, 4, dtype=torch.float64))

# %%
# Soft assignment. Edge exclusion drops the outer ring, leaving 4x4 = 16
# locations, each a distribution over the five words.
codes = soft_assign(fmap, vocab, delta=0.5)
print(codes.shape, codes.sum(-1)[:4])

# %%
# Max-pooling over locations keeps, for every word, its strongest response.
# The pooled vector is not a distribution yet; normalizing makes it one.
pooled = reduce_bow(codes, "max")
target = normalize_bow(pooled)
print(pooled, target.probs, target.probs.sum())

# %%
# The temperature used during training is not a free constant: a tracker
# keeps a moving average of the squared distance to the nearest word and the
# temperature is a fixed fraction of it. Here the tracker is seeded so that
# its temperature equals the 0.5 used above.
tracker = TemperatureTracker(delta_base=0.1, mu_msd=5.0, initialized=True)
pyramid = FeaturePyramid(fmap.unsqueeze(0), None, None)
out = build_targets(pyramid, {"L": vocab}, {"L": tracker})
print(tracker.delta, out["L"].target.probs)

# %%
# The scalar-loop oracle shares no code with the vectorized path.
ref = brute_force_bow(fmap, vocab, 0.5)
print(float((ref.probs - out["L"].target.probs[0]).abs().max()))
