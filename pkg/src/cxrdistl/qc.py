"""Lung-mask quality control and lung-field cropping."""

from __future__ import annotations

import enum
import json
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol

import cv2
import numpy as np
from scipy import ndimage

from .data import Box, Manifest, SampleRecord, write_manifest

log = logging.getLogger(__name__)

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


class MaskProviderError(RuntimeError):
    """The segmentation backend failed to produce a mask."""


class RejectReason(str, enum.Enum):
    NONE = "NONE"
    FRACTION_LOW = "FRACTION_LOW"
    FRACTION_HIGH = "FRACTION_HIGH"
    CONTOURS = "CONTOURS"


@dataclass(frozen=True)
class LungMask:
    grid: np.ndarray  # uint8 {0,1}, (h, w)

    def __post_init__(self):
        g = np.asarray(self.grid)
        if g.ndim != 2:
            raise ValueError("mask must be 2-D")
        if g.size and not np.isin(g, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        object.__setattr__(self, "grid", g.astype(np.uint8, copy=False))

    @property
    def source_size(self) -> tuple[int, int]:
        return self.grid.shape


@dataclass(frozen=True)
class QCReport:
    accepted: bool
    lung_fraction: float
    contour_count: int
    reject_reason: RejectReason
    crop_box: tuple[int, int, int, int] | None

    def to_json(self) -> dict:
        return {
            "accepted": self.accepted,
            "lung_fraction": self.lung_fraction,
            "contour_count": self.contour_count,
            "reject_reason": self.reject_reason.value,
            "crop_box": list(self.crop_box) if self.crop_box else None,
        }


class MaskProvider(Protocol):
    """Anything that maps an 8-bit greyscale image to per-pixel class logits.

    ``size`` is the provider's working resolution (h, w); logits have shape
    (n_classes, h, w) with class 1 = lung.
    """

    size: tuple[int, int]

    def logits(self, image: np.ndarray) -> np.ndarray: ...


class ThresholdMaskProvider:
    """Luminance-threshold stand-in for a segmentation network.

    Pixels brighter than ``threshold`` score as lung. Lightly smoothed first so
    isolated noise pixels do not become contours.
    """

    def __init__(self, size=(225, 225), threshold: float = 60.0, smooth_sigma: float = 1.0):
        self.size = tuple(size)
        self.threshold = threshold
        self.smooth_sigma = smooth_sigma

    def logits(self, image: np.ndarray) -> np.ndarray:
        x = image.astype(np.float32)
        if self.smooth_sigma > 0:
            x = cv2.GaussianBlur(x, (0, 0), self.smooth_sigma)
        lung = x - self.threshold
        return np.stack([-lung, lung])


def provide_mask(image: np.ndarray, provider: MaskProvider | None = None) -> LungMask:
    """Run ``provider`` at its working size, arg-max, then NN-upsample to the source size."""
    provider = provider or ThresholdMaskProvider()
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError("expected an 8-bit greyscale image")
    h, w = image.shape
    ph, pw = provider.size
    resized = cv2.resize(image, (pw, ph), interpolation=cv2.INTER_AREA)
    try:
        logits = np.asarray(provider.logits(resized))
    except Exception as e:  # noqa: BLE001 - any backend failure is a provider failure
        raise MaskProviderError(str(e)) from e
    if logits.ndim != 3 or logits.shape[1:] != (ph, pw):
        raise MaskProviderError(f"provider returned logits of shape {logits.shape}")
    small = np.argmax(logits, axis=0).astype(np.uint8)
    # nearest-neighbour index maps (pixel-centre convention)
    rows = np.minimum(((np.arange(h) + 0.5) * ph / h).astype(int), ph - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * pw / w).astype(int), pw - 1)
    return LungMask(small[rows[:, None], cols[None, :]])


def _components(grid: np.ndarray):
    labels, n = ndimage.label(grid, structure=EIGHT_CONNECTED)
    return labels, n


def count_contours(mask: LungMask) -> int:
    return _components(mask.grid)[1]


def qc_mask(mask: LungMask, fraction_lo: float = 0.08, fraction_hi: float = 0.90,
            min_contours: int = 2) -> QCReport:
    grid = mask.grid
    fraction = float(grid.sum()) / grid.size if grid.size else 0.0
    n = count_contours(mask)
    if fraction < fraction_lo:
        reason = RejectReason.FRACTION_LOW
    elif fraction > fraction_hi:
        reason = RejectReason.FRACTION_HIGH
    elif n < min_contours:
        reason = RejectReason.CONTOURS
    else:
        return QCReport(True, fraction, n, RejectReason.NONE, tight_bbox(mask))
    return QCReport(False, fraction, n, reason, None)


def largest_components(mask: LungMask, k: int = 2) -> list[np.ndarray]:
    """Boolean masks of the ``k`` largest 8-connected components.

    Equal areas are ordered by the component's first pixel in row-major order.
    """
    labels, n = _components(mask.grid)
    if n < k:
        raise ValueError(f"need at least {k} contours, found {n}")
    areas = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    # ndimage.label numbers components by first pixel in raster order
    order = sorted(range(n), key=lambda i: (-areas[i], i))
    return [labels == (i + 1) for i in order[:k]]


def tight_bbox(mask: LungMask) -> tuple[int, int, int, int]:
    """Smallest (x, y, w, h) rectangle containing the two largest contours."""
    union = np.logical_or.reduce(largest_components(mask, 2))
    ys, xs = np.nonzero(union)
    x0, x1 = int(xs.min()), int(xs.max())
    y0, y1 = int(ys.min()), int(ys.max())
    return x0, y0, x1 - x0 + 1, y1 - y0 + 1


def crop(image: np.ndarray, box) -> np.ndarray:
    x, y, w, h = (int(v) for v in box)
    H, W = image.shape[:2]
    if w <= 0 or h <= 0:
        raise ValueError(f"degenerate crop box {box}")
    if x < 0 or y < 0 or x + w > W or y + h > H:
        raise ValueError(f"crop box {box} outside image of size {W}x{H}")
    return image[y:y + h, x:x + w].copy()


def translate_boxes(boxes, crop_box) -> tuple[Box, ...]:
    """Move boxes into crop coordinates, clipping to the crop; fully-outside boxes are dropped."""
    cx, cy, cw, ch = crop_box
    out = []
    for b in boxes:
        x0, y0 = max(b.x - cx, 0), max(b.y - cy, 0)
        x1, y1 = min(b.x + b.w - cx, cw), min(b.y + b.h - cy, ch)
        if x1 > x0 and y1 > y0:
            out.append(Box(b.symptom, x0, y0, x1 - x0, y1 - y0))
    return tuple(out)


def read_exclusions(path) -> set[str]:
    """Manual-review exclusion list: one image_path per line, '#' comments allowed."""
    if path is None:
        return set()
    out = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            out.add(line)
    return out


def read_grey(path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if img is None:
        raise OSError(f"cannot read image {path}")
    return img


def write_png(path, image: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), image):
        raise OSError(f"cannot write {path}")


def prep_corpus(manifest: Manifest, image_root, out_dir, provider: MaskProvider | None = None,
                exclusions: set[str] = frozenset(), fraction_lo: float = 0.08,
                fraction_hi: float = 0.90, min_contours: int = 2,
                progress: Callable | None = None) -> tuple[Manifest, list[dict]]:
    """QC every record, write cropped PNGs plus a derived manifest and QC report.

    Returns the derived manifest (accepted records, crop-relative paths/boxes)
    and the QC rows. Output layout under ``out_dir``: ``images/``,
    ``manifest.jsonl``, ``qc_report.jsonl``.
    """
    image_root = Path(image_root)
    out_dir = Path(out_dir)
    rows, kept = [], []
    for rec in manifest.records:
        if rec.image_path in exclusions:
            rows.append({"image_path": rec.image_path, "accepted": False, "lung_fraction": None,
                         "contour_count": None, "reject_reason": "EXCLUDED", "crop_box": None})
            continue
        image = read_grey(image_root / rec.image_path)
        try:
            report = qc_mask(provide_mask(image, provider), fraction_lo, fraction_hi, min_contours)
        except MaskProviderError as e:
            log.warning("mask provider failed on %s: %s", rec.image_path, e)
            report = QCReport(False, 0.0, 0, RejectReason.CONTOURS, None)
        rows.append({"image_path": rec.image_path, **report.to_json()})
        if report.accepted:
            rel = str(Path("images") / Path(rec.image_path).with_suffix(".png"))
            write_png(out_dir / rel, crop(image, report.crop_box))
            kept.append(SampleRecord(rel, rec.patient_id, rec.source, rec.disease, rec.symptoms,
                                     translate_boxes(rec.boxes, report.crop_box)))
        if progress:
            progress()
    derived = Manifest(tuple(kept))
    write_manifest(derived, out_dir / "manifest.jsonl")
    summary = Counter(r["reject_reason"] for r in rows)
    with open(out_dir / "qc_report.jsonl", "w", encoding="utf-8") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True) + "\n")
        f.write(json.dumps({"summary": {k: summary.get(k, 0) for k in
                                        ["NONE", "FRACTION_LOW", "FRACTION_HIGH", "CONTOURS", "EXCLUDED"]}},
                           sort_keys=True) + "\n")
    return derived, rows
