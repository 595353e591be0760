"""Synthetic chest-radiograph-like corpus for tests and the toy profile.

Each image has two bright elliptical "lungs" on a dark background. Disease
classes get a global texture (TB: upper-zone streaks, COVID: peripheral
lower-zone haze). The seven findings are geometric primitives with boxes:

    infiltration   patch of coarse high-contrast mottling
    effusion       bright fill at a lung base with a curved upper edge
    atelectasis    thin horizontal bright band near a lung base
    nodule         small bright disc
    mass           large bright disc
    pneumothorax   dark lateral apical strip bounded by a bright pleural line
    consolidation  bright homogeneous rounded rectangle
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .data import SYMPTOMS, Box, DiseaseLabel, Manifest, SampleRecord, write_manifest


@dataclass(frozen=True)
class SynthConfig:
    n_images: int = 900
    size: int = 96
    seed: int = 0
    finding_p: float = 0.3
    second_image_p: float = 0.3  # chance a patient contributes a second image
    qc_fail_p: float = 0.03  # images drawn deliberately unusable (one merged blob / blank)


@dataclass
class _Lung:
    cx: int
    cy: int
    ax: int
    ay: int
    side: int  # -1 image-left, +1 image-right

    def inside(self, x, y) -> np.ndarray:
        return ((x - self.cx) / self.ax) ** 2 + ((y - self.cy) / self.ay) ** 2 <= 1.0

    def lateral_x(self, frac: float) -> int:
        return int(round(self.cx + self.side * frac * self.ax))


def _lungs(size: int, rng: np.random.Generator) -> list[_Lung]:
    s = size / 96
    cy = int(round(size * 0.5 + rng.integers(-2, 3) * s))
    ax = int(round(rng.integers(17, 21) * s))
    ay = int(round(rng.integers(34, 39) * s))
    gap = int(round(rng.integers(4, 7) * s))
    mid = size // 2 + int(rng.integers(-2, 3))
    return [_Lung(mid - gap - ax, cy, ax, ay, -1), _Lung(mid + gap + ax, cy, ax, ay, +1)]


def _clip_box(x0, y0, x1, y1, size) -> tuple[int, int, int, int]:
    x0, y0 = max(0, int(x0)), max(0, int(y0))
    x1, y1 = min(size, int(x1)), min(size, int(y1))
    return x0, y0, x1 - x0, y1 - y0


def _point_in_lung(lung: _Lung, rng, margin: float = 0.55) -> tuple[int, int]:
    while True:
        u, v = rng.uniform(-margin, margin, size=2)
        if u * u + v * v <= margin * margin:
            return int(round(lung.cx + u * lung.ax)), int(round(lung.cy + v * lung.ay))


def render(disease: DiseaseLabel, symptoms: tuple[bool, ...], size: int,
           rng: np.random.Generator) -> tuple[np.ndarray, list[Box]]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = 18 + rng.normal(0, 3, (size, size))
    lungs = _lungs(size, rng)
    lung_mask = np.zeros((size, size), bool)
    for lung in lungs:
        lung_mask |= lung.inside(xx, yy)
    img[lung_mask] = 120 + rng.normal(0, 6, int(lung_mask.sum()))
    s = size / 96

    if disease is DiseaseLabel.TB:
        for lung in lungs:
            top = lung.cy - lung.ay
            for k in range(4):
                y0 = top + lung.ay * (0.35 + 0.13 * k) + rng.uniform(-1.5, 1.5)
                band = np.abs(yy - y0 - 0.35 * (xx - lung.cx)) < 1.2 * s
                img[band & lung_mask & lung.inside(xx, yy)] += 25
    elif disease is DiseaseLabel.COVID:
        for lung in lungs:
            lateral = np.clip(lung.side * (xx - lung.cx) / lung.ax, 0, 1)
            lower = np.clip((yy - lung.cy) / lung.ay + 0.3, 0, 1)
            haze = 35 * lateral * lower
            inside = lung.inside(xx, yy)
            img[inside] += haze[inside] + rng.normal(0, 8, int(inside.sum()))

    boxes = []
    for name, on in zip(SYMPTOMS, symptoms):
        if not on:
            continue
        lung = lungs[int(rng.integers(0, 2))]
        inside = lung.inside(xx, yy)
        if name == "infiltration":
            cx, cy = _point_in_lung(lung, rng)
            r = int(round(rng.integers(10, 13) * s))
            region = (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r) & inside
            cell = max(2, int(round(4 * s)))
            checker = ((xx // cell + yy // cell) % 2).astype(bool)
            img[region & checker] = 235
            img[region & ~checker] = 60
            box = _clip_box(cx - r, cy - r, cx + r + 1, cy + r + 1, size)
        elif name == "effusion":
            depth = lung.ay * rng.uniform(0.35, 0.45)
            base = lung.cy + lung.ay
            curve = base - depth + 0.25 * depth * ((xx - lung.lateral_x(1.0)) / lung.ax) ** 2
            region = (yy >= curve) & inside
            img[region] = 215 + rng.normal(0, 4, int(region.sum()))
            ys, xs = np.nonzero(region)
            box = _clip_box(xs.min(), ys.min(), xs.max() + 1, ys.max() + 1, size)
        elif name == "atelectasis":
            y0 = lung.cy + lung.ay * rng.uniform(0.2, 0.4)
            half_h = 4.0 * s
            region = (np.abs(yy - y0) <= half_h) & inside
            img[region] = 230
            ys, xs = np.nonzero(region)
            box = _clip_box(xs.min(), ys.min(), xs.max() + 1, ys.max() + 1, size)
        elif name in ("nodule", "mass"):
            r = rng.uniform(6.0, 7.0) * s if name == "nodule" else rng.uniform(9.0, 11.0) * s
            cx, cy = _point_in_lung(lung, rng, margin=0.6 if name == "nodule" else 0.4)
            region = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
            img[region] = 250 if name == "nodule" else 195
            box = _clip_box(cx - r, cy - r, cx + r + 1, cy + r + 1, size)
        elif name == "pneumothorax":
            top = lung.cy - lung.ay
            line_x = lung.lateral_x(0.5)
            lo, hi = (line_x, lung.cx + lung.ax + 1) if lung.side > 0 else (lung.cx - lung.ax, line_x + 1)
            y1 = top + lung.ay * rng.uniform(0.9, 1.1)
            region = (xx >= lo) & (xx < hi) & (yy <= y1) & inside
            img[region] = 65
            line = (np.abs(xx - line_x) <= 1.5 * s) & (yy <= y1) & inside
            img[line] = 250
            ys, xs = np.nonzero(region | line)
            box = _clip_box(xs.min(), ys.min(), xs.max() + 1, ys.max() + 1, size)
        else:  # consolidation
            cx, cy = _point_in_lung(lung, rng, margin=0.35)
            hw, hh = rng.uniform(9, 11) * s, rng.uniform(12, 15) * s
            region = (np.abs(xx - cx) <= hw) & (np.abs(yy - cy) <= hh) & inside
            img[region] = 175 + rng.normal(0, 3, int(region.sum()))
            ys, xs = np.nonzero(region)
            box = _clip_box(xs.min(), ys.min(), xs.max() + 1, ys.max() + 1, size)
        boxes.append(Box(name, *box))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), boxes


def _unusable(size: int, rng: np.random.Generator) -> np.ndarray:
    if rng.random() < 0.5:
        return np.clip(rng.normal(20, 3, (size, size)), 0, 255).astype(np.uint8)  # near-blank
    img = np.clip(rng.normal(20, 3, (size, size)), 0, 255)
    cv2.ellipse(img, (size // 2, size // 2), (size // 3, size // 3), 0, 0, 360, 130, -1)  # one blob
    return img.astype(np.uint8)


def generate(out_dir, cfg: SynthConfig = SynthConfig()) -> Manifest:
    """Write PNGs under ``out_dir/raw/`` and ``out_dir/raw_manifest.jsonl``; return the manifest."""
    out_dir = Path(out_dir)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    classes = [DiseaseLabel.NORMAL, DiseaseLabel.TB, DiseaseLabel.COVID]
    records = []
    patient = 0
    while len(records) < cfg.n_images:
        pid = f"P{patient:05d}"
        patient += 1
        disease = classes[int(rng.integers(0, 3))]
        n_img = 2 if rng.random() < cfg.second_image_p else 1
        for k in range(min(n_img, cfg.n_images - len(records))):
            symptoms = tuple(bool(b) for b in rng.random(len(SYMPTOMS)) < cfg.finding_p)
            rel = f"raw/{pid}_{k}.png"
            if rng.random() < cfg.qc_fail_p:
                img, boxes = _unusable(cfg.size, rng), []
            else:
                img, boxes = render(disease, symptoms, cfg.size, rng)
            path = out_dir / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            cv2.imwrite(str(path), img)
            records.append(SampleRecord(rel, pid, "synthetic", disease, symptoms, tuple(boxes)))
    manifest = Manifest(tuple(records))
    write_manifest(manifest, out_dir / "raw_manifest.jsonl")
    return manifest
