"""Multi-crop view generation: one clean global view, one augmented global view, N local views."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import cv2
import numpy as np
import torch

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class CropKind(str, enum.Enum):
    GLOBAL_CLEAN = "GLOBAL_CLEAN"
    GLOBAL_AUG = "GLOBAL_AUG"
    LOCAL = "LOCAL"


@dataclass(frozen=True)
class CropSpec:
    kind: CropKind
    out_size: int
    scale_range: tuple[float, float] = (1.0, 1.0)
    flip_p: float = 0.0
    rot_degrees: float = 0.0
    autocontrast_p: float = 0.0
    equalize_p: float = 0.0
    blur_p: float = 0.0
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    ratio_range: tuple[float, float] = (3 / 4, 4 / 3)

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"scale_range must satisfy 0 < lo <= hi <= 1, got {self.scale_range}")
        for name in ("flip_p", "autocontrast_p", "equalize_p", "blur_p"):
            p = getattr(self, name)
            if not 0 <= p <= 1:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if self.out_size <= 0:
            raise ValueError("out_size must be positive")


def default_specs(global_size=256, local_size=128) -> tuple[CropSpec, CropSpec, CropSpec]:
    g1 = CropSpec(CropKind.GLOBAL_CLEAN, global_size)
    g2 = CropSpec(CropKind.GLOBAL_AUG, global_size, (0.75, 1.0), 0.5, 15.0, 0.3, 0.3, 0.3)
    loc = CropSpec(CropKind.LOCAL, local_size, (0.2, 0.6), 0.5, 15.0, 0.5, 0.5, 0.5)
    return g1, g2, loc


@dataclass
class MultiCropBatch:
    globals: list[torch.Tensor]
    locals: list[torch.Tensor]
    traces: list[dict] = field(default_factory=list)

    @property
    def views(self) -> list[torch.Tensor]:
        return [*self.globals, *self.locals]


def normalize(img: np.ndarray) -> torch.Tensor:
    """uint8 greyscale (H, W) -> float32 (3, H, W) with per-channel statistics."""
    x = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32) / 255.0)
    x = x.unsqueeze(0).expand(3, -1, -1)
    mean = torch.tensor(IMAGENET_MEAN).view(3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(3, 1, 1)
    return (x - mean) / std


def denormalize(x: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`normalize`, returning values in [0, 1] per channel."""
    mean = torch.tensor(IMAGENET_MEAN, dtype=x.dtype).view(3, 1, 1)
    std = torch.tensor(IMAGENET_STD, dtype=x.dtype).view(3, 1, 1)
    return x * std + mean


def sample_crop_box(h: int, w: int, scale_range, ratio_range, rng: np.random.Generator,
                    attempts: int = 10) -> tuple[int, int, int, int]:
    """Random-resized-crop box (x, y, w, h) whose area fraction lies inside ``scale_range``."""
    lo, hi = scale_range
    area = h * w
    if lo == hi == 1.0:
        return 0, 0, w, h
    log_r = (math.log(ratio_range[0]), math.log(ratio_range[1]))
    for _ in range(attempts):
        target = area * rng.uniform(lo, hi)
        ratio = math.exp(rng.uniform(*log_r))
        cw = int(round(math.sqrt(target * ratio)))
        ch = int(round(math.sqrt(target / ratio)))
        if 0 < cw <= w and 0 < ch <= h and lo <= cw * ch / area <= hi:
            x = int(rng.integers(0, w - cw + 1))
            y = int(rng.integers(0, h - ch + 1))
            return x, y, cw, ch
    # fallback: the most nearly square box whose area fraction is in range
    target = area * (lo + hi) / 2
    best = None
    for ch in range(1, h + 1):
        for cw in {max(1, min(w, int(target // ch))), max(1, min(w, -(-int(target) // ch)))}:
            if lo <= cw * ch / area <= hi:
                key = abs(cw - ch)
                if best is None or key < best[0]:
                    best = (key, cw, ch)
    if best is None:
        raise ValueError(f"no crop of a {w}x{h} image has area fraction in {scale_range}")
    _, cw, ch = best
    return int(rng.integers(0, w - cw + 1)), int(rng.integers(0, h - ch + 1)), cw, ch


def autocontrast(img: np.ndarray) -> np.ndarray:
    lo, hi = int(img.min()), int(img.max())
    if hi <= lo:
        return img.copy()
    scaled = (img.astype(np.float32) - lo) * (255.0 / (hi - lo))
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    h, w = img.shape
    mat = cv2.getRotationMatrix2D(((w - 1) / 2, (h - 1) / 2), degrees, 1.0)
    return cv2.warpAffine(img, mat, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT_101)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(3 * sigma)))
    k = 2 * radius + 1
    return cv2.GaussianBlur(img, (k, k), sigmaX=sigma, sigmaY=sigma, borderType=cv2.BORDER_REFLECT_101)


def apply_spec(img: np.ndarray, spec: CropSpec, rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    """One view: crop+resize, flip, rotate, autocontrast, equalize, blur (in that order)."""
    h, w = img.shape
    x, y, cw, ch = sample_crop_box(h, w, spec.scale_range, spec.ratio_range, rng)
    interp = cv2.INTER_AREA if cw >= spec.out_size and ch >= spec.out_size else cv2.INTER_LINEAR
    out = cv2.resize(img[y:y + ch, x:x + cw], (spec.out_size, spec.out_size), interpolation=interp)
    trace = {"kind": spec.kind.value, "crop": [x, y, cw, ch], "area_fraction": cw * ch / (h * w)}

    trace["flip"] = bool(spec.flip_p > 0 and rng.random() < spec.flip_p)
    if trace["flip"]:
        out = np.ascontiguousarray(out[:, ::-1])
    angle = float(rng.uniform(-spec.rot_degrees, spec.rot_degrees)) if spec.rot_degrees > 0 else 0.0
    trace["angle"] = angle
    if angle != 0.0:
        out = rotate(out, angle)
    trace["autocontrast"] = bool(spec.autocontrast_p > 0 and rng.random() < spec.autocontrast_p)
    if trace["autocontrast"]:
        out = autocontrast(out)
    trace["equalize"] = bool(spec.equalize_p > 0 and rng.random() < spec.equalize_p)
    if trace["equalize"]:
        out = cv2.equalizeHist(out)
    sigma = None
    if spec.blur_p > 0 and rng.random() < spec.blur_p:
        sigma = float(rng.uniform(*spec.blur_sigma))
        out = gaussian_blur(out, sigma)
    trace["blur_sigma"] = sigma
    return out, trace


class MultiCrop:
    """Callable producing a :class:`MultiCropBatch` for one greyscale image."""

    def __init__(self, global_clean: CropSpec, global_aug: CropSpec, local: CropSpec, n_locals: int = 8):
        if global_clean.out_size != global_aug.out_size:
            raise ValueError("both global views must share one output size")
        self.specs = (global_clean, global_aug, local)
        self.n_locals = n_locals

    @classmethod
    def paper_default(cls) -> "MultiCrop":
        return cls(*default_specs(), n_locals=8)

    def without_locals(self) -> "MultiCrop":
        return MultiCrop(*self.specs, n_locals=0)

    def without_augmentation(self) -> "MultiCrop":
        g1, g2, loc = self.specs
        off = dict(scale_range=(1.0, 1.0), flip_p=0.0, rot_degrees=0.0, autocontrast_p=0.0,
                   equalize_p=0.0, blur_p=0.0)
        return MultiCrop(g1, replace(g2, **off), replace(loc, **off), self.n_locals)

    def __call__(self, image: np.ndarray, rng: np.random.Generator) -> MultiCropBatch:
        return make_views(image, rng, self)


def make_views(image: np.ndarray, rng: np.random.Generator, policy: MultiCrop | None = None) -> MultiCropBatch:
    policy = policy or MultiCrop.paper_default()
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError("expected an 8-bit greyscale image")
    g1, g2, loc = policy.specs
    clean, t1 = apply_spec(image, g1, rng)
    aug, t2 = apply_spec(image, g2, rng)
    locals_, traces = [], [t1, t2]
    for _ in range(policy.n_locals):
        v, t = apply_spec(image, loc, rng)
        locals_.append(normalize(v))
        traces.append(t)
    return MultiCropBatch([normalize(clean), normalize(aug)], locals_, traces)


def eval_view(image: np.ndarray, size: int) -> torch.Tensor:
    """Deterministic inference view: resize + normalize (same as the clean global view)."""
    return normalize(cv2.resize(image, (size, size), interpolation=cv2.INTER_AREA
                                if min(image.shape) >= size else cv2.INTER_LINEAR))


def collate(batches: list[MultiCropBatch]) -> list[torch.Tensor]:
    """Stack view i across images -> list of (B, 3, S, S) tensors, globals first."""
    n_views = len(batches[0].views)
    return [torch.stack([b.views[i] for b in batches]) for i in range(n_views)]
