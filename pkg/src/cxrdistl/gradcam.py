"""Grad-CAM on the final transformer block, box agreement scores and overlay rendering."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import torch
import torch.nn.functional as F

from .data import N_SYMPTOMS


@dataclass
class SaliencyMap:
    grid: np.ndarray  # (H/p, W/p), normalised to [0, 1]
    upsampled: np.ndarray  # (H, W), normalised to [0, 1]
    target: int
    image_id: str | None = None

    def stats(self) -> dict:
        gy, gx = np.unravel_index(int(np.argmax(self.grid)), self.grid.shape)
        return {"target": self.target, "image_id": self.image_id, "grid_shape": list(self.grid.shape),
                "map_shape": list(self.upsampled.shape), "grid_argmax": [int(gy), int(gx)],
                "mean": float(self.upsampled.mean()), "all_zero": bool(not self.upsampled.any())}


@dataclass(frozen=True)
class OverlapScore:
    iou: float | None  # None when either region is empty
    pointing_hit: bool

    @property
    def iou_defined(self) -> bool:
        return self.iou is not None

    def to_json(self) -> dict:
        return {"iou": self.iou, "iou_defined": self.iou_defined, "pointing_hit": self.pointing_hit}


def minmax(x: np.ndarray) -> np.ndarray:
    """Scale to [0, 1]; zero-variance input maps to all zeros."""
    lo, hi = float(x.min()), float(x.max())
    if hi - lo <= 0:
        return np.zeros_like(x, dtype=np.float64)
    return (x - lo) / (hi - lo)


def _patch_size(model) -> int:
    if hasattr(model, "backbone_cfg"):
        return model.backbone_cfg.patch_size
    return int(model.patch_size)


def upsample(grid: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    t = torch.as_tensor(grid, dtype=torch.float64)[None, None]
    up = F.interpolate(t, size=size, mode="bilinear", align_corners=False)[0, 0].numpy()
    return minmax(up)


def grad_cam(model, image: torch.Tensor, symptom_index: int, out_size: tuple[int, int] | None = None,
             image_id: str | None = None) -> SaliencyMap:
    """Saliency for one symptom logit.

    ``model.gradcam_forward(x)`` must return (tokens (1, 1+N, D),
    symptom_logits (1, K)); patch tokens are assumed row-major. ``out_size``
    defaults to the input's spatial size.
    """
    if image.ndim == 3:
        image = image[None]
    H, W = image.shape[-2:]
    if H <= 0 or W <= 0:
        raise ValueError("image size must be positive")
    n_out = getattr(getattr(model, "heads_cfg", None), "n_symptom", N_SYMPTOMS)
    if not 0 <= symptom_index < n_out:
        raise IndexError(f"symptom index {symptom_index} outside [0, {n_out})")
    p = _patch_size(model)
    gh, gw = H // p, W // p
    with torch.enable_grad():
        block, logits = model.gradcam_forward(image)
        acts = block[0, 1:]
        (grads,) = torch.autograd.grad(logits[0, symptom_index], block)
    acts = acts.detach().double()
    weights = grads[0, 1:].double().mean(dim=0)
    cam = torch.relu(acts @ weights).reshape(gh, gw).numpy()
    grid = minmax(cam)
    size = out_size or (H, W)
    up = upsample(grid, size) if grid.any() else np.zeros(size)
    return SaliencyMap(grid, up, symptom_index, image_id)


def box_mask(shape: tuple[int, int], box) -> np.ndarray:
    x, y, w, h = (int(v) for v in box)
    m = np.zeros(shape, dtype=bool)
    m[max(y, 0):y + h, max(x, 0):x + w] = True
    return m


def overlap(saliency: SaliencyMap | np.ndarray, box, binarize_q: float = 0.9) -> OverlapScore:
    """Quantile-binarised IoU and pointing-game hit against an (x, y, w, h) box."""
    if not 0 < binarize_q < 1:
        raise ValueError("binarize_q must be in (0, 1)")
    m = saliency.upsampled if isinstance(saliency, SaliencyMap) else np.asarray(saliency, dtype=np.float64)
    x, y, w, h = (int(v) for v in box)
    if x < 0 or y < 0 or w <= 0 or h <= 0 or x + w > m.shape[1] or y + h > m.shape[0]:
        raise ValueError(f"box {box} outside map of shape {m.shape}")
    if not m.any():
        return OverlapScore(None, False)
    thr = np.quantile(m, binarize_q)
    region = (m >= thr) & (m > 0)
    b = box_mask(m.shape, box)
    union = int((region | b).sum())
    iou = int((region & b).sum()) / union if region.any() else None
    ay, ax = np.unravel_index(int(np.argmax(m)), m.shape)
    return OverlapScore(iou, bool(b[ay, ax]))


def render_overlay(image: np.ndarray, saliency: SaliencyMap | np.ndarray, box=None, path=None,
                   alpha: float = 0.4) -> np.ndarray:
    """Heat-map blended onto the greyscale radiograph, box drawn in green.

    The blend weight is ``alpha * map`` per pixel, so unsalient pixels keep
    their original value. Writes a PNG when ``path`` is given.
    """
    m = saliency.upsampled if isinstance(saliency, SaliencyMap) else np.asarray(saliency)
    if m.shape != image.shape[:2]:
        m = cv2.resize(m.astype(np.float32), (image.shape[1], image.shape[0]), interpolation=cv2.INTER_LINEAR)
    base = cv2.cvtColor(image, cv2.COLOR_GRAY2BGR) if image.ndim == 2 else image.copy()
    heat = cv2.applyColorMap(np.clip(np.rint(m * 255), 0, 255).astype(np.uint8), cv2.COLORMAP_JET)
    a = (alpha * np.clip(m, 0, 1))[..., None]
    out = np.clip(np.rint(base * (1 - a) + heat * a), 0, 255).astype(np.uint8)
    if box is not None:
        x, y, w, h = (int(v) for v in box)
        cv2.rectangle(out, (x, y), (x + w - 1, y + h - 1), (0, 255, 0), 1)
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        if not cv2.imwrite(str(path), out):
            raise OSError(f"cannot write {path}")
    return out


def random_pointing_rate(shape: tuple[int, int], box, n: int, rng: np.random.Generator) -> float:
    """Hit rate of uniform-random maps: argmax of i.i.d. uniform noise."""
    b = box_mask(shape, box)
    hits = 0
    for _ in range(n):
        idx = int(np.argmax(rng.random(shape)))
        hits += bool(b.flat[idx])
    return hits / n


def box_agreement(model, samples, size: int, binarize_q: float = 0.9, baseline_draws: int = 200,
                  rng: np.random.Generator | None = None) -> dict:
    """Score saliency against every annotated box.

    ``samples`` yields (image_id, greyscale uint8 image, boxes). One map is
    computed per box, for that box's symptom, at the image's own resolution.
    The baseline is the pointing rate of uniform-noise maps on the same boxes.
    """
    from .augment import eval_view
    from .data import SYMPTOMS

    rng = rng or np.random.Generator(np.random.PCG64(0))
    model.eval()
    rows = []
    for image_id, image, boxes in samples:
        x = eval_view(image, size)
        for b in boxes:
            sal = grad_cam(model, x, SYMPTOMS.index(b.symptom), out_size=image.shape[:2], image_id=image_id)
            score = overlap(sal, b.xywh, binarize_q)
            rows.append({"image_id": image_id, "symptom": b.symptom, "box": list(b.xywh), **score.to_json(),
                         "baseline_hit_rate": random_pointing_rate(image.shape[:2], b.xywh, baseline_draws, rng)})
    ious = [r["iou"] for r in rows if r["iou"] is not None]
    n = len(rows)
    return {
        "n_boxes": n,
        "pointing_rate": sum(r["pointing_hit"] for r in rows) / n if n else None,
        "baseline_rate": sum(r["baseline_hit_rate"] for r in rows) / n if n else None,
        "mean_iou": float(np.mean(ious)) if ious else None,
        "cases": rows,
    }
