"""OBoW training step, schedules, checkpoints and the epoch loop."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml
from torch import nn

from .augmentation import CropGeometry, PhotometricConfig, collate_views, make_views
from .bow_targets import build_targets
from .encoder import (
    ConfigError,
    EncoderConfig,
    build_encoder_pair,
    ema_update,
    momentum_schedule,
    student_forward,
    teacher_forward,
)
from .prediction_head import FixedHead, PredictionConfig, WeightGenerator, fixed_predict_bow, generate_weights, predict_bow
from .vocabulary import (
    KMeansState,
    SinkhornConfig,
    TemperatureTracker,
    WordVocabulary,
    enqueue_words,
    kmeans_ema_update,
    mark_used,
    replace_rare_words,
    sample_word_candidate,
    update_temperature,
)

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LEVELS = ("L", "L-1")


class CheckpointError(RuntimeError):
    pass


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    # encoder
    input_channels: int = 3
    stage_widths: tuple = (32, 64, 128, 256)
    convs_per_stage: int = 1
    teacher_norm_mode: str = "batch"
    # geometry (pixel sizes at full resolution, multiplied by scale_factor)
    scale_factor: float = 0.25
    base_size: int = 256
    teacher_crop: int = 224
    primary_crop: int = 160
    num_primary: int = 2
    primary_area: tuple = (0.08, 0.60)
    patch_source_area: tuple = (0.60, 1.00)
    patch_size: int = 96
    patches_drawn: int = 5
    photometric: bool = True
    jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    flip_prob: float = 0.5
    # targets and vocabulary
    levels: tuple = ("L", "L-1")
    vocab_mode: str = "queue"  # queue | kmeans
    vocab_size: int = 1024
    word_strategy: str = "local_avg_3x3"
    kmeans_balance: str = "replace_rare"  # replace_rare | sinkhorn
    kmeans_gamma: float = 0.99
    max_idle_steps: int = 1000
    sinkhorn_epsilon: float = 0.05
    sinkhorn_iters: int = 100
    sinkhorn_tol: float = 1e-3
    reduction: str = "max"
    edge_exclude: bool = True
    delta_base: float = 0.1
    temperature_momentum: float = 0.99
    # prediction head
    head: str = "dynamic"  # dynamic | fixed
    # also feed the teacher's own unperturbed view to the student
    student_sees_teacher_view: bool = False
    kappa: float = 5.0
    generator_final_bias: bool = False
    # optimization
    alpha0: float = 0.99
    lr: float = 0.05
    lr_floor: float = 0.0
    warmup_steps: int = 0
    sgd_momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 30
    batch_size: int = 128
    seed: int = 0
    dtype: str = "float32"
    # bookkeeping
    output_dir: str = "runs/obow"
    checkpoint_every: int = 1
    data: str = ""

    def __post_init__(self):
        for name in ("stage_widths", "primary_area", "patch_source_area", "levels"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("peak learning rate must be > 0")
        if not self.levels or set(self.levels) - set(LEVELS):
            raise ConfigError(f"levels must be a non-empty subset of {LEVELS}")
        if self.vocab_mode not in ("queue", "kmeans"):
            raise ConfigError(f"unknown vocab_mode {self.vocab_mode!r}")
        if self.kmeans_balance not in ("replace_rare", "sinkhorn"):
            raise ConfigError(f"unknown kmeans_balance {self.kmeans_balance!r}")
        if self.head not in ("dynamic", "fixed"):
            raise ConfigError(f"unknown head {self.head!r}")
        if self.reduction not in ("max", "avg"):
            raise ConfigError(f"unknown reduction {self.reduction!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        self.encoder_config()
        self.geometry()
        PredictionConfig(self.kappa)
        TemperatureTracker(self.delta_base)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.input_channels, self.stage_widths, self.convs_per_stage, teacher_norm_mode=self.teacher_norm_mode)

    def geometry(self) -> CropGeometry:
        return CropGeometry(
            base_size=self.base_size, teacher_crop=self.teacher_crop, primary_crop=self.primary_crop,
            num_primary=self.num_primary, primary_area=self.primary_area,
            patch_source_area=self.patch_source_area, patch_size=self.patch_size,
            patches_drawn=self.patches_drawn, scale_factor=self.scale_factor,
        )

    def photometric_config(self) -> PhotometricConfig | None:
        if not self.photometric:
            return None
        return PhotometricConfig(
            jitter_prob=self.jitter_prob, grayscale_prob=self.grayscale_prob,
            blur_prob=self.blur_prob, flip_prob=self.flip_prob,
        )

    def sinkhorn_config(self) -> SinkhornConfig | None:
        if self.vocab_mode == "kmeans" and self.kmeans_balance == "sinkhorn":
            return SinkhornConfig(self.sinkhorn_epsilon, self.sinkhorn_iters, self.sinkhorn_tol)
        return None

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Flat key-value document (YAML or JSON)."""
        with open(path) as f:
            values = yaml.safe_load(f) or {}
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: expected a flat mapping of config keys")
        return cls.from_dict(values)


def lr_schedule(step: int, total_steps: int, warmup_steps: int, peak: float, floor: float = 0.0) -> float:
    """Linear warmup from 0 to ``peak`` then cosine decay to ``floor``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps and warmup_steps >= total_steps:
        raise ValueError("warmup_steps must be smaller than total_steps")
    if step < warmup_steps:
        return peak * step / warmup_steps
    span = total_steps - warmup_steps
    if span == 0:
        return floor
    t = step - warmup_steps
    return floor + (peak - floor) * (1.0 + math.cos(math.pi * t / span)) / 2.0


def bow_loss(y_S: torch.Tensor, y_T: torch.Tensor, tol: float = 1e-5) -> torch.Tensor:
    """Cross-entropy of predicted against target BoW, averaged over leading dims."""
    if y_S.shape != y_T.shape:
        raise ValueError(f"shape mismatch {tuple(y_S.shape)} vs {tuple(y_T.shape)}")
    for name, y in (("y_S", y_S), ("y_T", y_T)):
        yd = y.detach()
        if bool((yd < -tol).any()) or float((yd.sum(-1) - 1).abs().max()) > tol:
            raise ValueError(f"{name} is not a probability vector within {tol}")
    ce = -(y_T * torch.log(y_S.clamp_min(1e-12))).sum(-1)
    return ce.mean()


class TrainState:
    """Everything a run needs to continue: networks, heads, vocabularies, optimizer, step."""

    def __init__(self, config: TrainConfig):
        self.config = config
        dtype = config.torch_dtype
        enc_cfg = config.encoder_config()
        self.student, self.teacher = build_encoder_pair(enc_cfg, config.seed, dtype=dtype)
        c = enc_cfg.pooled_dim
        dims = enc_cfg.level_dims
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(config.seed + 1)
        try:
            if config.head == "dynamic":
                self.heads = nn.ModuleDict({
                    lv: WeightGenerator(dims[lv], c, config.generator_final_bias) for lv in config.levels
                }).to(dtype)
            else:
                self.heads = nn.ModuleDict({lv: FixedHead(config.vocab_size, c) for lv in config.levels}).to(dtype)
        finally:
            torch.random.set_rng_state(gen_state)
        self.vocabs = {
            lv: WordVocabulary(lv, dims[lv], config.vocab_size, config.vocab_mode, dtype=dtype) for lv in config.levels
        }
        self.trackers = {lv: TemperatureTracker(config.delta_base, config.temperature_momentum) for lv in config.levels}
        self.kmeans: dict[str, KMeansState] = {}
        self.optimizer = torch.optim.SGD(
            list(self.student.parameters()) + list(self.heads.parameters()),
            lr=config.lr, momentum=config.sgd_momentum, weight_decay=config.weight_decay,
        )
        self.step = 0
        self.total_steps = 0
        self.prefilled = False

    def trainable_parameters(self):
        return list(self.student.parameters()) + list(self.heads.parameters())

    def state_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "student": self.student.state_dict(),
            "teacher": self.teacher.state_dict(),
            "heads": self.heads.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "vocabs": {lv: v.state_dict() for lv, v in self.vocabs.items()},
            "trackers": {lv: t.state_dict() for lv, t in self.trackers.items()},
            "kmeans": {lv: k.state_dict() for lv, k in self.kmeans.items()},
            "step": self.step,
            "total_steps": self.total_steps,
            "prefilled": self.prefilled,
        }

    @classmethod
    def from_state_dict(cls, ckpt: dict) -> "TrainState":
        state = cls(TrainConfig.from_dict(ckpt["config"]))
        state.student.load_state_dict(ckpt["student"])
        state.teacher.load_state_dict(ckpt["teacher"])
        state.heads.load_state_dict(ckpt["heads"])
        state.optimizer.load_state_dict(ckpt["optimizer"])
        state.vocabs = {lv: WordVocabulary.from_state_dict(v) for lv, v in ckpt["vocabs"].items()}
        state.trackers = {lv: TemperatureTracker(**t) for lv, t in ckpt["trackers"].items()}
        state.kmeans = {lv: KMeansState.from_state_dict(k) for lv, k in ckpt["kmeans"].items()}
        state.step = int(ckpt["step"])
        state.total_steps = int(ckpt["total_steps"])
        state.prefilled = bool(ckpt["prefilled"])
        return state


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def _entropy(p: torch.Tensor) -> float:
    p = p[p > 0]
    return float(-(p * p.log()).sum())


def _batch_tensors(batch, dtype):
    views = collate_views(batch) if isinstance(batch, list) else batch
    teacher = views["teacher"].to(dtype)
    groups = [v.to(dtype) for v in views["primary"]]
    if views["patches"] is not None:
        p = views["patches"]
        groups.append(p.reshape(-1, *p.shape[2:]).to(dtype))
    return teacher, groups


def student_loss(state: TrainState, targets: dict, student_groups: list) -> tuple[torch.Tensor, dict]:
    """Mean of ``bow_loss`` over every (student view, level) pair.

    ``student_groups`` holds batched views; a group may stack several views
    per image (the patches), in image-major order.
    """
    cfg = state.config
    b = next(iter(targets.values())).target.probs.shape[0]
    weights = {}
    for lv in cfg.levels:
        head = state.heads[lv]
        weights[lv] = generate_weights(head, state.vocabs[lv]) if cfg.head == "dynamic" else head
    level_losses = {lv: [] for lv in cfg.levels}
    for views in student_groups:
        pooled = student_forward(state.student, views).pooled
        copies = views.shape[0] // b
        for lv in cfg.levels:
            if cfg.head == "dynamic":
                y_S = predict_bow(pooled, weights[lv], PredictionConfig(cfg.kappa))
            else:
                y_S = fixed_predict_bow(pooled, weights[lv])
            y_S = y_S.reshape(b, copies, -1)
            for j in range(copies):
                level_losses[lv].append(bow_loss(y_S[:, j], targets[lv].target.probs))
    pairs = [l for lv in cfg.levels for l in level_losses[lv]]
    return torch.stack(pairs).mean(), level_losses


def train_step(state: TrainState, batch) -> dict:
    """One optimization step on a batch of view bundles; returns the metrics record."""
    cfg = state.config
    if not all(len(v) == v.capacity for v in state.vocabs.values()):
        raise RuntimeError("vocabularies must be filled (run prefill) before training")
    teacher_views, student_groups = _batch_tensors(batch, cfg.torch_dtype)
    if cfg.student_sees_teacher_view:
        student_groups.append(teacher_views)
    sinkhorn = cfg.sinkhorn_config()

    # targets from the current vocabulary and the pre-update temperature
    pyramid = teacher_forward(state.teacher, teacher_views)
    targets = build_targets(pyramid, state.vocabs, state.trackers, cfg.reduction, cfg.edge_exclude, sinkhorn)

    total = state.total_steps
    lr = lr_schedule(state.step, total, cfg.warmup_steps, cfg.lr, cfg.lr_floor) if total else cfg.lr
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    loss, level_losses = student_loss(state, targets, student_groups)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite loss {loss.item()} at step {state.step}")

    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()

    alpha = momentum_schedule(state.step, total, cfg.alpha0) if total else cfg.alpha0
    ema_update(state.teacher, state.student, alpha)

    rng = _rng(cfg.seed, 1, state.step)
    diagnostics = {}
    for lv in cfg.levels:
        tg = targets[lv]
        vocab = state.vocabs[lv]
        if cfg.vocab_mode == "queue":
            enqueue_words(vocab, sample_word_candidate(pyramid.level(lv), cfg.word_strategy, rng))
        else:
            _kmeans_update(state, lv, tg, rng, sinkhorn is not None)
        update_temperature(state.trackers[lv], tg.sq_dists_to_nearest)
        diagnostics[lv] = _vocab_diagnostics(state, lv, tg)

    record = {
        "step": state.step,
        "loss": float(loss.detach()),
        "level_loss": {lv: float(torch.stack(level_losses[lv]).mean().detach()) for lv in cfg.levels},
        "alpha": alpha,
        "lr": lr,
        "delta": {lv: targets[lv].delta for lv in cfg.levels},
        "vocab": diagnostics,
    }
    state.step += 1
    return record


def _kmeans_update(state: TrainState, lv: str, tg, rng, use_sinkhorn: bool):
    cfg = state.config
    vocab = state.vocabs[lv]
    km = state.kmeans[lv]
    feats = tg.features.reshape(-1, tg.features.shape[-1])
    nearest = tg.nearest.reshape(-1)
    if use_sinkhorn:
        codes = tg.codes.reshape(-1, tg.codes.shape[-1]).t()
        codes = codes / codes.sum(0, keepdim=True)
    else:
        codes = torch.zeros(len(vocab), feats.shape[0], dtype=feats.dtype)
        codes[nearest, torch.arange(feats.shape[0])] = 1.0
    mark_used(km, nearest, state.step)
    kmeans_ema_update(km, codes, feats, vocab)
    if cfg.kmeans_balance == "replace_rare":
        replace_rare_words(km, vocab, feats, state.step, rng, cfg.max_idle_steps)


def _vocab_diagnostics(state: TrainState, lv: str, tg) -> dict:
    vocab = state.vocabs[lv]
    usage = torch.bincount(tg.nearest.reshape(-1), minlength=len(vocab))
    mean_code = tg.codes.reshape(-1, tg.codes.shape[-1]).mean(0)
    if state.config.vocab_mode == "queue":
        oldest = int(vocab.insertion_index - vocab.word_ids.min().item())
    else:
        oldest = int(state.step - state.kmeans[lv].last_used_step.min().item())
    return {
        "assignment_entropy": _entropy(mean_code.double()),
        "min_usage": int(usage.min()),
        "max_usage": int(usage.max()),
        "oldest_word_age": oldest,
    }


def teacher_views_only(dataset, indices, config: TrainConfig, epoch: int) -> torch.Tensor:
    """Center-cropped (and randomly flipped) teacher views for the prefill phase."""
    geometry = dataclasses.replace(config.geometry(), num_primary=0, patches_drawn=0)
    return torch.stack([
        make_views(dataset[i], geometry, _rng(config.seed, 2, epoch, int(i))).teacher_view for i in indices
    ]).to(config.torch_dtype)


@torch.no_grad()
def prefill_vocabularies(state: TrainState, dataset) -> int:
    """Fill every level's vocabulary to capacity from teacher forwards; returns batches used."""
    cfg = state.config
    b = cfg.batch_size
    batches = 0
    rng = _rng(cfg.seed, 3)
    collected = {lv: [] for lv in cfg.levels}
    need = cfg.vocab_size
    n_pass = 0
    while len(collected[cfg.levels[0]]) < need:
        order = _rng(cfg.seed, 4, n_pass).permutation(len(dataset))
        for start in range(0, len(order), b):
            idx = order[start:start + b]
            pyramid = teacher_forward(state.teacher, teacher_views_only(dataset, idx, cfg, n_pass))
            batches += 1
            for lv in cfg.levels:
                cand = sample_word_candidate(pyramid.level(lv), cfg.word_strategy, rng)
                collected[lv].extend(cand.unbind(0))
            if len(collected[cfg.levels[0]]) >= need:
                break
        n_pass += 1
    for lv in cfg.levels:
        words = torch.stack(collected[lv][:need])
        vocab = state.vocabs[lv]
        if cfg.vocab_mode == "queue":
            enqueue_words(vocab, words)
        else:
            vocab.words = words.clone()
            vocab.word_ids = torch.arange(need)
            vocab.insertion_index = need
            state.kmeans[lv] = KMeansState.from_words(words, cfg.kmeans_gamma, step=0)
    state.prefilled = True
    return batches


def save_checkpoint(state: TrainState, path) -> Path:
    """Atomic write of a versioned single-file checkpoint."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(state.state_dict(), tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)
    return path


def load_checkpoint(path) -> TrainState:
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a variety of types on truncated or foreign files
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(ckpt, dict) or "version" not in ckpt:
        raise CheckpointError(f"{path} is not an OBoW checkpoint")
    if ckpt["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {ckpt['version']} != supported {CHECKPOINT_VERSION}")
    try:
        return TrainState.from_state_dict(ckpt)
    except (KeyError, TypeError, RuntimeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc


def steps_per_epoch(n_images: int, batch_size: int) -> int:
    return n_images // batch_size


def epoch_batches(config: TrainConfig, n_images: int, epoch: int):
    order = _rng(config.seed, 5, epoch).permutation(n_images)
    b = config.batch_size
    return [order[i * b:(i + 1) * b] for i in range(steps_per_epoch(n_images, b))]


def make_batch(dataset, indices, config: TrainConfig, epoch: int) -> list:
    geometry = config.geometry()
    photometric = config.photometric_config()
    return [make_views(dataset[i], geometry, _rng(config.seed, 6, epoch, int(i)), photometric) for i in indices]


@dataclass
class RunArtifacts:
    output_dir: Path
    checkpoint: Path
    metrics: Path
    checkpoints: list[Path] = field(default_factory=list)


def run_training(config: TrainConfig, dataset, resume=None, stop_after_epochs: int | None = None, progress=None) -> RunArtifacts:
    """Prefill, then ``config.epochs`` epochs of :func:`train_step`.

    Writes ``metrics.jsonl`` (one record per step) and ``checkpoint_last.pt``
    plus ``checkpoint_epoch{N}.pt`` every ``checkpoint_every`` epochs into
    ``config.output_dir``. ``stop_after_epochs`` ends the run early, as an
    interruption would; ``resume`` continues from a checkpoint path.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    last = out / "checkpoint_last.pt"
    spe = steps_per_epoch(len(dataset), config.batch_size)
    if spe == 0:
        raise ValueError(f"dataset of {len(dataset)} images is smaller than one batch of {config.batch_size}")
    saved = []

    if resume is not None:
        state = load_checkpoint(resume)
        state.config.output_dir = config.output_dir
        _truncate_metrics(metrics_path, state.step)
    else:
        state = TrainState(config)
        state.total_steps = config.epochs * spe
        prefill_vocabularies(state, dataset)
        metrics_path.write_text("")
        save_checkpoint(state, last)
        saved.append(last)

    cfg = state.config
    start_epoch = state.step // spe
    end_epoch = cfg.epochs if stop_after_epochs is None else min(cfg.epochs, stop_after_epochs)
    with open(metrics_path, "a") as log:
        for epoch in range(start_epoch, end_epoch):
            batches = epoch_batches(cfg, len(dataset), epoch)
            for i in range(state.step - epoch * spe, spe):
                try:
                    record = train_step(state, make_batch(dataset, batches[i], cfg, epoch))
                except NonFiniteLossError:
                    # pre-step state, kept for post-mortem inspection
                    save_checkpoint(state, out / "checkpoint_nonfinite.pt")
                    raise
                record["epoch"] = epoch
                log.write(json.dumps(record) + "\n")
                log.flush()
                if progress is not None:
                    progress(record)
            if (epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs:
                path = save_checkpoint(state, out / f"checkpoint_epoch{epoch + 1:03d}.pt")
                save_checkpoint(state, last)
                saved += [path, last]
            logger.info("epoch %d done (step %d)", epoch + 1, state.step)
    return RunArtifacts(out, last, metrics_path, saved)


def _truncate_metrics(path: Path, step: int):
    if not path.exists():
        return
    kept = [ln for ln in path.read_text().splitlines() if ln.strip() and json.loads(ln)["step"] < step]
    path.write_text("".join(ln + "\n" for ln in kept))


def read_metrics(path) -> list[dict]:
    return [json.loads(ln) for ln in Path(path).read_text().splitlines() if ln.strip()]
