"""
Probing frozen features
=======================

Linear probe, prototype few-shot episodes and visual-word retrieval, run on
a randomly initialized encoder so the script finishes in seconds. Point
``encoder`` at a trained student to get meaningful numbers.
"""

# %%
from obow import EncoderConfig, build_encoder_pair, make_shapes_dataset, train_test_split
from obow.evaluation import EpisodeSpec, ProbeConfig, center_views, extract_features, fewshot_eval, inspect_words, linear_probe
from obow.vocabulary import WordVocabulary, enqueue_words

data = make_shapes_dataset(n_images=400, size=64, seed=1)
train, test = train_test_split(data, 0.25, seed=0)
encoder, teacher = build_encoder_pair(EncoderConfig(stage_widths=(16, 32, 64)), seed=0)

# %%
# Features come from the central 56 px crop with the encoder in evaluation
# mode. The probe standardizes them and fits a linear classifier.
tr = extract_features(encoder, train, flip="rows")
te = extract_features(encoder, test)
print("linear probe:", linear_probe(tr, te, ProbeConfig(epochs=20)))

# %%
# Few-shot episodes classify each query by cosine similarity to the class
# prototypes (support means).
acc, se = fewshot_eval(extract_features(encoder, data), EpisodeSpec(n_way=5, k_shot=1, queries=3, episodes=100))
print(f"5-way 1-shot: {acc:.3f} +/- {1.96 * se:.3f}")

# %%
# Word retrieval ranks every feature location in the dataset by its
# assignment score to a word and maps the best ones back to image patches.
vocab = WordVocabulary("L", 64, 16)
fmap = teacher.eval()(center_views(data, 64, 64, range(4))).map_L
enqueue_words(vocab, fmap.permute(0, 2, 3, 1).reshape(-1, 64)[:16])
hits = inspect_words(teacher, vocab, data.subset(range(50)), top_k=4, words=[0, 1], delta=1.0, out_dir="runs/words")
for word, patches in hits.items():
    print(word, [(p.image_index, p.rect, round(p.score, 3)) for p in patches])
