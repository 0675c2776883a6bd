"""Self-supervised learning by predicting teacher visual-word histograms, at desk scale."""
from .augmentation import CropGeometry, PhotometricConfig, ViewBundle, make_views, photometric_aug
from .bow_targets import BowTarget, brute_force_bow, build_targets, normalize_bow, reduce_bow, soft_assign
from .data import ImageDataset, load_dataset, make_shapes_dataset, train_test_split
from .encoder import (
    Encoder,
    EncoderConfig,
    FeaturePyramid,
    build_encoder_pair,
    ema_update,
    momentum_schedule,
    student_forward,
    teacher_forward,
)
from .evaluation import EpisodeSpec, FeatureTable, ProbeConfig, extract_features, fewshot_eval, inspect_words, linear_probe
from .prediction_head import FixedHead, PredictionConfig, WeightGenerator, fixed_predict_bow, generate_weights, predict_bow
from .trainer import (
    TrainConfig,
    TrainState,
    bow_loss,
    load_checkpoint,
    lr_schedule,
    run_training,
    save_checkpoint,
    train_step,
)
from .vocabulary import (
    KMeansState,
    SinkhornConfig,
    TemperatureTracker,
    WordVocabulary,
    enqueue_words,
    kmeans_ema_update,
    replace_rare_words,
    sample_word_candidate,
    sinkhorn_assign,
    update_temperature,
)

__version__ = "0.1.0"
