"""Teacher view and multi-crop student views with photometric perturbations."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torchvision.transforms.functional as TF

Rect = tuple[float, float, float, float]  # (top, left, height, width) in original pixels


@dataclass
class CropGeometry:
    """Crop sizes at full resolution; ``scale_factor`` rescales every pixel size."""

    base_size: int = 256
    teacher_crop: int = 224
    primary_crop: int = 160
    num_primary: int = 2
    primary_area: tuple[float, float] = (0.08, 0.60)
    patch_source_area: tuple[float, float] = (0.60, 1.00)
    patch_size: int = 96
    patch_grid: int = 3
    patches_drawn: int = 5
    aspect_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    scale_factor: float = 1.0

    def __post_init__(self):
        self.primary_area = tuple(self.primary_area)
        self.patch_source_area = tuple(self.patch_source_area)
        self.aspect_ratio = tuple(self.aspect_ratio)
        if not 0 <= self.patches_drawn <= self.patch_grid ** 2:
            raise ValueError(f"patches_drawn must lie in [0, {self.patch_grid ** 2}]")
        if not 0 < self.primary_area[0] <= self.primary_area[1] <= 0.60:
            raise ValueError("primary crops must cover at most 60% of the image")
        if not 0 < self.patch_source_area[0] <= self.patch_source_area[1] <= 1.0:
            raise ValueError("patch source area fractions must lie in (0, 1]")
        if self.num_primary < 0:
            raise ValueError("num_primary must be >= 0")
        if self.sizes["patch"] > self.sizes["base"] or self.sizes["teacher"] > self.sizes["base"]:
            raise ValueError("teacher crop and patches must fit inside the base resolution")

    @classmethod
    def vanilla(cls, **kw) -> "CropGeometry":
        kw.setdefault("num_primary", 1)
        kw.setdefault("patches_drawn", 0)
        return cls(**kw)

    @property
    def sizes(self) -> dict[str, int]:
        s = self.scale_factor
        return {
            "base": int(round(self.base_size * s)),
            "teacher": int(round(self.teacher_crop * s)),
            "primary": int(round(self.primary_crop * s)),
            "patch": int(round(self.patch_size * s)),
        }

    def patch_corners(self) -> list[int]:
        """Top-left offsets of the overlapping patch grid along one axis."""
        sz = self.sizes
        if self.patch_grid == 1:
            return [0]
        span = sz["base"] - sz["patch"]
        return [round(i * span / (self.patch_grid - 1)) for i in range(self.patch_grid)]


@dataclass
class PhotometricConfig:
    jitter_prob: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    flip_prob: float = 0.5

    @classmethod
    def disabled(cls) -> "PhotometricConfig":
        return cls(jitter_prob=0.0, grayscale_prob=0.0, blur_prob=0.0, flip_prob=0.0)


@dataclass
class ViewProvenance:
    kind: str  # "teacher" | "primary" | "patch"
    rect: Rect
    flipped: bool = False
    photometric: tuple[str, ...] = ()


@dataclass
class ViewBundle:
    teacher_view: torch.Tensor
    primary_views: list[torch.Tensor]
    patch_views: list[torch.Tensor]
    provenance: list[ViewProvenance] = field(default_factory=list)

    @property
    def student_views(self) -> list[torch.Tensor]:
        return self.primary_views + self.patch_views

    def __len__(self) -> int:
        return 1 + len(self.primary_views) + len(self.patch_views)


def as_image_tensor(image) -> torch.Tensor:
    """uint8 HxWxC / HxW arrays or float CxHxW tensors -> float32 CxHxW in [0, 1]."""
    if isinstance(image, torch.Tensor):
        img = image
        if img.dtype == torch.uint8:
            img = img.float() / 255.0
        return img if img.dim() == 3 else img.unsqueeze(0)
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    img = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))
    return img.float() / 255.0 if arr.dtype == np.uint8 else img.float()


def sample_rect(height: int, width: int, area_range, ratio_range, rng: np.random.Generator, attempts: int = 10) -> tuple[int, int, int, int]:
    """Random (top, left, h, w) whose area fraction lies within ``area_range``."""
    area = height * width
    log_ratio = (math.log(ratio_range[0]), math.log(ratio_range[1]))
    for _ in range(attempts):
        target = area * rng.uniform(*area_range)
        aspect = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= width and 0 < h <= height and area_range[0] * area <= h * w <= area_range[1] * area:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    # fallback: the largest centered square within the upper area bound
    side = int(math.floor(math.sqrt(area_range[1] * area)))
    side = max(1, min(side, height, width))
    while side > 1 and side * side > area_range[1] * area:
        side -= 1
    return (height - side) // 2, (width - side) // 2, side, side


def standard_resize(image: torch.Tensor, size: int) -> torch.Tensor:
    """Resize so the shorter side equals ``size`` (no-op when it already does)."""
    h, w = image.shape[-2:]
    if min(h, w) == size:
        return image
    return TF.resize(image, [size], antialias=True)


def make_views(image, geometry: CropGeometry, rng=None, photometric: PhotometricConfig | None = None) -> ViewBundle:
    """Teacher center crop plus the student's primary crops and grid patches.

    The teacher view is only ever horizontally flipped. Student views get the
    photometric pipeline when ``photometric`` is given.
    """
    rng = np.random.default_rng(rng)
    sz = geometry.sizes
    img = as_image_tensor(image)
    H, W = img.shape[-2:]
    if min(H, W) < sz["patch"]:
        raise ValueError(f"image {H}x{W} is smaller than the minimum view size {sz['patch']}")
    resized = standard_resize(img, sz["base"])
    rh, rw = resized.shape[-2:]
    to_orig = (H / rh, W / rw)
    provenance = []

    t = sz["teacher"]
    top, left = (rh - t) // 2, (rw - t) // 2
    teacher = resized[:, top:top + t, left:left + t]
    flip = bool(rng.random() < 0.5)
    if flip:
        teacher = TF.hflip(teacher)
    provenance.append(
        ViewProvenance("teacher", (top * to_orig[0], left * to_orig[1], t * to_orig[0], t * to_orig[1]), flip)
    )

    primary = []
    for _ in range(geometry.num_primary):
        top, left, h, w = sample_rect(H, W, geometry.primary_area, geometry.aspect_ratio, rng)
        view = TF.resized_crop(img, top, left, h, w, [sz["primary"], sz["primary"]], antialias=True)
        view, flipped, ops = _maybe_photometric(view, rng, photometric)
        primary.append(view)
        provenance.append(ViewProvenance("primary", (top, left, h, w), flipped, ops))

    patches = []
    if geometry.patches_drawn:
        top, left, h, w = sample_rect(H, W, geometry.patch_source_area, geometry.aspect_ratio, rng)
        base = sz["base"]
        region = TF.resized_crop(img, top, left, h, w, [base, base], antialias=True)
        corners = geometry.patch_corners()
        grid = [(r, c) for r in corners for c in corners]
        chosen = sorted(rng.choice(len(grid), size=geometry.patches_drawn, replace=False).tolist())
        p = sz["patch"]
        sy, sx = h / base, w / base
        for idx in chosen:
            r, c = grid[idx]
            view = region[:, r:r + p, c:c + p]
            view, flipped, ops = _maybe_photometric(view, rng, photometric)
            patches.append(view)
            provenance.append(ViewProvenance("patch", (top + r * sy, left + c * sx, p * sy, p * sx), flipped, ops))

    return ViewBundle(teacher, primary, patches, provenance)


def _maybe_photometric(view, rng, cfg):
    if cfg is None:
        return view.contiguous(), False, ()
    return photometric_aug(view, rng, cfg, return_info=True)


def photometric_aug(view: torch.Tensor, rng=None, cfg: PhotometricConfig | None = None, return_info: bool = False):
    """Color jitter, grayscale, Gaussian blur and horizontal flip, each with its own probability."""
    cfg = cfg or PhotometricConfig()
    rng = np.random.default_rng(rng)
    out = view
    ops = []
    color = out.shape[0] == 3
    if rng.random() < cfg.jitter_prob:
        factors = {
            "brightness": rng.uniform(max(0.0, 1 - cfg.brightness), 1 + cfg.brightness),
            "contrast": rng.uniform(max(0.0, 1 - cfg.contrast), 1 + cfg.contrast),
            "saturation": rng.uniform(max(0.0, 1 - cfg.saturation), 1 + cfg.saturation),
            "hue": rng.uniform(-cfg.hue, cfg.hue),
        }
        for name in rng.permutation(list(factors)).tolist():
            if name == "brightness":
                out = TF.adjust_brightness(out, factors[name])
            elif name == "contrast" and color:
                out = TF.adjust_contrast(out, factors[name])
            elif name == "saturation" and color:
                out = TF.adjust_saturation(out, factors[name])
            elif name == "hue" and color and cfg.hue > 0:
                out = TF.adjust_hue(out, factors[name])
        ops.append("jitter")
    if rng.random() < cfg.grayscale_prob:
        if color:
            out = TF.rgb_to_grayscale(out, num_output_channels=3)
        ops.append("grayscale")
    if rng.random() < cfg.blur_prob:
        sigma = float(rng.uniform(*cfg.blur_sigma))
        side = min(out.shape[-2:])
        kernel = max(3, int(round(0.1 * side)) | 1)
        out = TF.gaussian_blur(out, [kernel, kernel], [sigma, sigma])
        ops.append("blur")
    flipped = bool(rng.random() < cfg.flip_prob)
    if flipped:
        out = TF.hflip(out)
        ops.append("flip")
    out = out.clamp(0.0, 1.0).contiguous()
    if return_info:
        return out, flipped, tuple(ops)
    return out


def collate_views(bundles: list[ViewBundle]) -> dict:
    """Stack a batch of bundles into per-kind tensors for batched forwards."""
    return {
        "teacher": torch.stack([b.teacher_view for b in bundles]),
        "primary": [torch.stack([b.primary_views[i] for b in bundles]) for i in range(len(bundles[0].primary_views))],
        "patches": (
            torch.stack([torch.stack(b.patch_views) for b in bundles])
            if bundles[0].patch_views else None
        ),
    }
