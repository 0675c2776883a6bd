"""Desk-scale protocol: self-supervised runs on a small labelled dataset, scored by linear probes.

The same architecture is probed three ways: frozen at random initialization,
after training with the dynamic head, and after training with a fixed
linear head. Run artifacts are small (student weights, config, metrics) so
scores can be recomputed without retraining.
"""
from __future__ import annotations

import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .data import ImageDataset, make_shapes_dataset, train_test_split
from .encoder import Encoder, build_encoder_pair
from .evaluation import ProbeConfig, extract_features, linear_probe
from .trainer import TrainConfig, load_checkpoint, read_metrics, run_training, steps_per_epoch

logger = logging.getLogger(__name__)


@dataclass
class DeskSetup:
    n_images: int = 5000
    image_size: int = 64
    n_classes: int = 10
    data_seed: int = 0
    test_fraction: float = 0.2
    split_seed: int = 0
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def dataset(self) -> tuple[ImageDataset, ImageDataset]:
        ds = make_shapes_dataset(self.n_images, self.image_size, self.data_seed, self.n_classes)
        return train_test_split(ds, self.test_fraction, self.split_seed)


def probe_encoder(encoder, train: ImageDataset, test: ImageDataset, config: TrainConfig, probe: ProbeConfig) -> float:
    """Linear-probe top-1: mirrored training rows, single central test crop."""
    sizes = config.geometry().sizes
    kw = dict(base_size=sizes["base"], crop_size=sizes["teacher"])
    return linear_probe(extract_features(encoder, train, flip="rows", **kw), extract_features(encoder, test, **kw), probe)


def random_encoder(config: TrainConfig) -> Encoder:
    student, _ = build_encoder_pair(config.encoder_config(), config.seed, dtype=config.torch_dtype)
    return student


def save_student(state_or_encoder, config: TrainConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    encoder = getattr(state_or_encoder, "student", state_or_encoder)
    torch.save(encoder.state_dict(), out / "student.pt")
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=1))
    return out


def load_student(run_dir) -> tuple[Encoder, TrainConfig]:
    run_dir = Path(run_dir)
    config = TrainConfig.from_dict(json.loads((run_dir / "config.json").read_text()))
    encoder = random_encoder(config)
    encoder.load_state_dict(torch.load(run_dir / "student.pt", map_location="cpu", weights_only=True))
    return encoder, config


def train_run(config: TrainConfig, train: ImageDataset, out_dir, progress=None) -> Path:
    """Train (resuming a partial run if one exists) and keep the student, config and metrics.

    Full checkpoints live in ``out_dir/work`` while training and are removed
    once the run finishes.
    """
    out = Path(out_dir)
    config.output_dir = str(out / "work")
    last = Path(config.output_dir) / "checkpoint_last.pt"
    resume = last if last.exists() else None
    run_training(config, train, resume=resume, progress=progress)
    state = load_checkpoint(last)
    save_student(state, config, out)
    (out / "metrics.jsonl").write_text((Path(config.output_dir) / "metrics.jsonl").read_text())
    shutil.rmtree(config.output_dir)
    return out


def completed(run_dir, config: TrainConfig, n_train: int) -> bool:
    """True when ``run_dir`` holds a finished run of exactly ``config``."""
    run_dir = Path(run_dir)
    if not (run_dir / "student.pt").exists() or not (run_dir / "config.json").exists():
        return False
    saved = json.loads((run_dir / "config.json").read_text())
    saved.pop("output_dir", None)
    wanted = config.to_dict()
    wanted.pop("output_dir", None)
    if saved != wanted or not (run_dir / "metrics.jsonl").exists():
        return False
    return len(read_metrics(run_dir / "metrics.jsonl")) == config.epochs * steps_per_epoch(n_train, config.batch_size)


def desk_config(head: str = "dynamic", **overrides) -> TrainConfig:
    """Default small encoder, 0.25-scale geometry, K = 1024, 30 epochs."""
    values = dict(head=head, vocab_size=1024, epochs=30, scale_factor=0.25, checkpoint_every=5, seed=0)
    values.update(overrides)
    return TrainConfig(**values)


def run_desk_experiment(root, setup: DeskSetup | None = None, heads=("dynamic", "fixed"), progress=None, **overrides) -> dict:
    """Train every missing run under ``root`` and probe all of them against the random baseline."""
    setup = setup or DeskSetup()
    root = Path(root)
    train, test = setup.dataset()
    results = {}
    base_cfg = desk_config(**overrides)
    results["random"] = probe_encoder(random_encoder(base_cfg), train, test, base_cfg, setup.probe)
    for head in heads:
        cfg = desk_config(head, **overrides)
        run_dir = root / head
        if not completed(run_dir, cfg, len(train)):
            logger.info("training %s head run in %s", head, run_dir)
            train_run(cfg, train, run_dir, progress)
        encoder, cfg = load_student(run_dir)
        results[head] = probe_encoder(encoder, train, test, cfg, setup.probe)
    (root / "results.json").write_text(json.dumps(results, indent=1))
    return results
