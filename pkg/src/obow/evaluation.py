"""Frozen-feature evaluation: linear probe, prototype few-shot episodes, visual-word retrieval."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from PIL import Image

from .augmentation import as_image_tensor, standard_resize
from .bow_targets import soft_assign


@dataclass
class FeatureTable:
    features: torch.Tensor  # (N, c)
    labels: torch.Tensor  # (N,)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = torch.as_tensor(self.labels, dtype=torch.long)
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels")

    def __len__(self) -> int:
        return self.features.shape[0]


def center_views(dataset, base_size: int, crop_size: int, indices=None) -> torch.Tensor:
    """Resize shorter side to ``base_size`` and take the central ``crop_size`` square."""
    indices = range(len(dataset)) if indices is None else indices
    views = []
    for i in indices:
        img = standard_resize(as_image_tensor(dataset[i]), base_size)
        views.append(TF.center_crop(img, [crop_size, crop_size]))
    return torch.stack(views)


@torch.no_grad()
def extract_features(encoder, dataset, base_size: int = 64, crop_size: int = 56, flip: str = "none", batch_size: int = 256) -> FeatureTable:
    """Pooled features of the central crop with the encoder in evaluation mode.

    ``flip`` is ``"none"``, ``"average"`` (mean of the crop and its mirror) or
    ``"rows"`` (crop and mirror as two separate rows with the same label).
    """
    if len(dataset) == 0:
        raise ValueError("cannot extract features from an empty dataset")
    if flip not in ("none", "average", "rows"):
        raise ValueError(f"unknown flip policy {flip!r}")
    was_training = encoder.training
    encoder.eval()
    dtype = next(encoder.parameters()).dtype
    chunks, flipped = [], []
    try:
        for start in range(0, len(dataset), batch_size):
            idx = range(start, min(start + batch_size, len(dataset)))
            x = center_views(dataset, base_size, crop_size, idx).to(dtype)
            chunks.append(encoder(x).pooled)
            if flip != "none":
                flipped.append(encoder(TF.hflip(x)).pooled)
    finally:
        encoder.train(was_training)
    feats = torch.cat(chunks)
    labels = torch.as_tensor(np.asarray(dataset.labels))
    if flip == "average":
        feats = 0.5 * (feats + torch.cat(flipped))
    elif flip == "rows":
        feats = torch.cat([feats, torch.cat(flipped)])
        labels = torch.cat([labels, labels])
    return FeatureTable(feats, labels, {"crop": f"center {crop_size} of {base_size}", "flip": flip})


@dataclass
class ProbeConfig:
    epochs: int = 50
    lr: float = 10.0
    lr_step_epochs: int = 15
    lr_gamma: float = 0.1
    weight_decay: float = 2e-6
    momentum: float = 0.9
    batch_size: int = 256
    # z-score features with training-split statistics before the linear layer
    standardize: bool = True
    seed: int = 0


def train_linear_classifier(train: FeatureTable, cfg: ProbeConfig | None = None) -> tuple[torch.nn.Linear, tuple]:
    cfg = cfg or ProbeConfig()
    x = train.features.detach().double()
    y = train.labels
    num_classes = int(y.max()) + 1
    if cfg.standardize:
        mean, std = x.mean(0), x.std(0, unbiased=False).clamp_min(1e-6)
    else:
        mean, std = torch.zeros(x.shape[1], dtype=x.dtype), torch.ones(x.shape[1], dtype=x.dtype)
    x = (x - mean) / std
    gen = torch.Generator().manual_seed(cfg.seed)
    clf = torch.nn.Linear(x.shape[1], num_classes).double()
    with torch.no_grad():
        clf.weight.normal_(0.0, 0.01, generator=gen)
        clf.bias.zero_()
    opt = torch.optim.SGD(clf.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.StepLR(opt, cfg.lr_step_epochs, cfg.lr_gamma)
    n = x.shape[0]
    for _ in range(cfg.epochs):
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            loss = F.cross_entropy(clf(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        sched.step()
    return clf, (mean, std)


def linear_probe(train: FeatureTable, test: FeatureTable, cfg: ProbeConfig | None = None) -> float:
    """Top-1 accuracy on ``test`` of a linear classifier trained on frozen ``train`` features."""
    missing = set(test.labels.tolist()) - set(train.labels.tolist())
    if missing:
        raise ValueError(f"classes {sorted(missing)} are absent from the training split")
    clf, (mean, std) = train_linear_classifier(train, cfg)
    with torch.no_grad():
        pred = clf((test.features.double() - mean) / std).argmax(1)
    return float((pred == test.labels).double().mean())


@dataclass
class EpisodeSpec:
    n_way: int = 20
    k_shot: int = 1
    queries: int = 1
    episodes: int = 200
    classes: list | None = None
    seed: int = 0


def prototype_predict(support: torch.Tensor, support_labels: torch.Tensor, queries: torch.Tensor, n_way: int) -> torch.Tensor:
    """Cosine prototype classifier; ties go to the lowest class index."""
    protos = torch.stack([support[support_labels == c].mean(0) for c in range(n_way)])
    sims = F.normalize(queries, dim=-1) @ F.normalize(protos, dim=-1).t()
    return sims.argmax(dim=1)  # argmax returns the first maximal index


def fewshot_eval(table: FeatureTable, spec: EpisodeSpec) -> tuple[float, float]:
    """Mean episode accuracy and its standard error over ``spec.episodes`` episodes."""
    labels = table.labels
    pool = sorted(set(labels.tolist())) if spec.classes is None else list(spec.classes)
    if len(pool) < spec.n_way:
        raise ValueError(f"class pool of {len(pool)} is smaller than n_way={spec.n_way}")
    members = {c: torch.nonzero(labels == c).reshape(-1) for c in pool}
    need = spec.k_shot + spec.queries
    short = [c for c in pool if len(members[c]) < need]
    if short:
        raise ValueError(f"classes {short[:5]} have fewer than {need} samples")
    rng = np.random.default_rng(spec.seed)
    feats = table.features.double()
    accs = []
    for _ in range(spec.episodes):
        classes = rng.choice(pool, size=spec.n_way, replace=False)
        s_idx, s_lab, q_idx, q_lab = [], [], [], []
        for j, c in enumerate(classes):
            pick = members[int(c)][torch.as_tensor(rng.choice(len(members[int(c)]), size=need, replace=False))]
            s_idx.append(pick[:spec.k_shot])
            q_idx.append(pick[spec.k_shot:])
            s_lab += [j] * spec.k_shot
            q_lab += [j] * spec.queries
        pred = prototype_predict(feats[torch.cat(s_idx)], torch.tensor(s_lab), feats[torch.cat(q_idx)], spec.n_way)
        accs.append(float((pred == torch.tensor(q_lab)).double().mean()))
    accs = np.asarray(accs)
    stderr = float(accs.std(ddof=1) / math.sqrt(len(accs))) if len(accs) > 1 else 0.0
    return float(accs.mean()), stderr


@dataclass
class RetrievedPatch:
    score: float
    image_index: int
    rect: tuple[int, int, int, int]  # (top, left, height, width) in original pixels
    source: str = ""


def location_rect(config, level: str, i: int, j: int, height: int, width: int) -> tuple[int, int, int, int]:
    """Receptive-field rectangle of feature location (i, j), clipped to the image."""
    jump, size, start = config.receptive_field(level)
    half = size // 2
    top = max(0, start + i * jump - half)
    left = max(0, start + j * jump - half)
    bottom = min(height, start + i * jump + half + 1)
    right = min(width, start + j * jump + half + 1)
    return top, left, max(0, bottom - top), max(0, right - left)


@torch.no_grad()
def inspect_words(teacher, vocab, dataset, top_k: int = 8, words=None, delta: float = 1.0, base_size: int = 64, out_dir=None) -> dict:
    """Rank dataset patches by soft-assignment score for each requested word.

    Images are resized to ``base_size`` and passed whole through the teacher in
    evaluation mode. Returns ``{word: [RetrievedPatch, ...]}`` in descending
    score order and, with ``out_dir``, writes one image grid per word.
    """
    words = list(range(len(vocab))) if words is None else list(words)
    level = vocab.level
    was_training = teacher.training
    teacher.eval()
    dtype = next(teacher.parameters()).dtype
    scores, where = [], []
    try:
        for idx in range(len(dataset)):
            img = standard_resize(as_image_tensor(dataset[idx]), base_size).to(dtype)
            fmap = teacher(img.unsqueeze(0)).level(level)[0]
            codes = soft_assign(fmap, vocab, delta, edge_exclude=False)  # (h*w, K)
            h, w = fmap.shape[-2:]
            scores.append(codes[:, words])
            where += [(idx, u // w, u % w, img.shape[-2], img.shape[-1]) for u in range(h * w)]
    finally:
        teacher.train(was_training)
    scores = torch.cat(scores)  # (total locations, len(words))
    if scores.shape[0] < top_k:
        raise ValueError(f"dataset provides {scores.shape[0]} locations, fewer than top_k={top_k}")
    enc_cfg = teacher.config
    paths = getattr(dataset, "paths", []) or []
    result = {}
    for col, word in enumerate(words):
        vals, order = torch.sort(scores[:, col], descending=True, stable=True)
        ranked = []
        for v, o in zip(vals[:top_k].tolist(), order[:top_k].tolist()):
            idx, i, j, h, w = where[o]
            top, left, rh, rw = location_rect(enc_cfg, level, i, j, h, w)
            H, W = np.asarray(dataset[idx]).shape[:2]
            sy, sx = H / h, W / w
            rect = (int(top * sy), int(left * sx), max(1, int(round(rh * sy))), max(1, int(round(rw * sx))))
            rect = (rect[0], rect[1], min(rect[2], H - rect[0]), min(rect[3], W - rect[1]))
            ranked.append(RetrievedPatch(v, idx, rect, paths[idx] if idx < len(paths) else ""))
        result[word] = ranked
    if out_dir is not None:
        write_word_grids(result, dataset, out_dir, level)
    return result


def write_word_grids(result: dict, dataset, out_dir, level: str = "L", tile: int = 48) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for word, patches in result.items():
        grid = Image.new("RGB", (tile * max(1, len(patches)), tile))
        for n, p in enumerate(patches):
            arr = np.asarray(dataset[p.image_index])
            top, left, h, w = p.rect
            crop = arr[top:top + h, left:left + w]
            if crop.ndim == 3 and crop.shape[2] == 1:
                crop = crop[:, :, 0]
            im = Image.fromarray(crop.astype(np.uint8)).convert("RGB").resize((tile, tile), Image.NEAREST)
            grid.paste(im, (n * tile, 0))
        path = out_dir / f"word_{level}_{word:05d}.png"
        grid.save(path)
        written.append(path)
    return written
