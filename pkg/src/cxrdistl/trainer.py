"""Phase 1 supervised pretraining, Phase 2 fold-wise distillation, Phase 3 periodic correction."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .augment import MultiCrop, collate, eval_view
from .config import RunConfig
from .data import DiseaseLabel, Manifest, SampleRecord, N_SYMPTOMS
from .losses import (DinoState, combined_loss, disease_ce, ema_momentum, ema_update, focal_bce,
                     inverse_frequency_weights, kl_distill, label_counts, lr_schedule, pos_weights)
from .model import DistlNet, build_model, load_pretrained, load_tensors, save_tensors, teacher_copy
from .qc import read_grey
from .split import SplitPlan, WeightedSampler, sampler_weights

log = logging.getLogger(__name__)

PHASE_CORRECTION = 3


class TrainingError(RuntimeError):
    pass


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *keys])))


def derive_torch_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, 7919, *keys]).generate_state(1)[0])


@dataclass(frozen=True)
class TrainConfig:
    epochs_phase1: int
    epochs_per_fold: int
    ssl_epoch: int
    correction_interval: int
    correction_steps: int
    batch_size: int
    correction_batch_size: int
    seed: int
    checkpoint_dir: Path
    metrics_dir: Path

    def __post_init__(self):
        if self.correction_interval <= 0:
            raise ValueError("correction_interval must be positive")
        if self.ssl_epoch > self.epochs_per_fold:
            raise ValueError("ssl_epoch must not exceed epochs_per_fold")

    @classmethod
    def from_run(cls, cfg: RunConfig, out_dir) -> "TrainConfig":
        out_dir = Path(out_dir)
        return cls(cfg["train.epochs_phase1"], cfg["train.epochs_per_fold"], cfg.ssl_epoch,
                   cfg["train.correction_interval"], cfg["train.correction_steps"], cfg["train.batch_size"],
                   cfg["train.correction_batch_size"], cfg.seed, out_dir / "checkpoints", out_dir / "metrics")


@dataclass
class TrainState:
    phase: int
    fold_index: int = 0
    global_step: int = 0
    epoch: int = 0  # epochs completed within the current phase / fold
    phase2_step: int = 0
    corrections: int = 0
    meta: dict = field(default_factory=dict)


class ImageStore:
    """In-memory cache of the cropped greyscale images referenced by a manifest."""

    def __init__(self, root):
        self.root = Path(root)
        self._cache: dict[str, np.ndarray] = {}

    def __getitem__(self, rel: str) -> np.ndarray:
        img = self._cache.get(rel)
        if img is None:
            img = self._cache[rel] = read_grey(self.root / rel)
        return img


class MetricsLog:
    """Append-only JSON-lines step log; the first line of a new file is the config header."""

    def __init__(self, path, cfg: RunConfig):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists() or self.path.stat().st_size == 0:
            self._write({"header": cfg.to_json()})

    def _write(self, row: dict):
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(row, sort_keys=True) + "\n")

    def log(self, **row):
        self._write(row)


def read_metrics(path) -> list[dict]:
    rows = [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line]
    return [r for r in rows if "header" not in r]


def _labels(records: Sequence[SampleRecord], drop: bool = False):
    n = len(records)
    disease = torch.full((n,), -1, dtype=torch.long)
    symptoms = torch.zeros(n, N_SYMPTOMS)
    mask = torch.zeros(n, dtype=torch.bool)
    if not drop:
        for i, r in enumerate(records):
            disease[i] = r.disease.index
            if r.symptoms is not None:
                symptoms[i] = torch.tensor([float(s) for s in r.symptoms])
                mask[i] = True
    return disease, symptoms, mask


def _finite(value: torch.Tensor, what: str, step: int):
    if not torch.isfinite(value):
        raise TrainingError(f"non-finite {what} loss at step {step}: {value.item()}")


class Trainer:
    def __init__(self, cfg: RunConfig, manifest: Manifest, plan: SplitPlan, image_root, out_dir):
        self.cfg = cfg
        self.tc = TrainConfig.from_run(cfg, out_dir)
        self.out_dir = Path(out_dir)
        self.manifest = manifest
        self.plan = plan
        self.images = ImageStore(image_root)
        self.policy: MultiCrop = cfg.multicrop()
        self.weights = cfg.loss_weights()
        self.labeled = [r for r in manifest.records if r.patient_id in plan.labeled_ids]
        self.test = [r for r in manifest.records if r.patient_id in plan.test_ids]
        if not self.labeled:
            raise TrainingError("labeled partition is empty")
        counts = label_counts([r.symptoms for r in self.labeled])
        self.posw_phase1 = torch.tensor(pos_weights(*counts, cfg.phase1_pos_policy()))
        self.posw_correction = torch.tensor(pos_weights(*counts, cfg.correction_pos_policy()))
        self.class_weights = inverse_frequency_weights([r.disease.index for r in self.labeled]).float()
        self.student: DistlNet | None = None
        self.teacher: DistlNet | None = None
        self.optimizer: torch.optim.Optimizer | None = None
        self.dino: DinoState | None = None
        self.state = TrainState(phase=1)
        torch.use_deterministic_algorithms(True)

    # -- construction / persistence --------------------------------------------

    def _init_student(self):
        self.student = build_model(self.cfg.backbone(), self.cfg.heads(), self.cfg.seed)
        pre = self.cfg["model.pretrained"]
        if pre or not self.cfg["model.allow_random_init"]:
            load_pretrained(self.student, pre or None, allow_random_init=self.cfg["model.allow_random_init"])

    def _make_optimizer(self):
        decay, no_decay = [], []
        for name, p in self.student.named_parameters():
            (no_decay if p.ndim <= 1 or name.endswith(("pos_embed", "cls_token")) else decay).append(p)
        self.optimizer = torch.optim.AdamW(
            [{"params": decay, "weight_decay": self.cfg["optim.weight_decay"]},
             {"params": no_decay, "weight_decay": 0.0}],
            lr=self.cfg["optim.lr_start"], betas=(self.cfg["optim.beta1"], self.cfg["optim.beta2"]),
        )

    def save_checkpoint(self, name: str) -> Path:
        d = self.tc.checkpoint_dir / name
        d.mkdir(parents=True, exist_ok=True)
        tensors = {f"student.{k}": v for k, v in self.student.state_dict().items()}
        if self.teacher is not None:
            tensors.update({f"teacher.{k}": v for k, v in self.teacher.state_dict().items()})
        if self.dino is not None:
            tensors["dino.center"] = self.dino.center
        meta = {"phase": self.state.phase, "fold": self.state.fold_index, "epoch": self.state.epoch,
                "step": self.state.global_step, "phase2_step": self.state.phase2_step,
                "corrections": self.state.corrections, "seed": self.cfg.seed, "config": self.cfg.to_json()}
        save_tensors(d / "model.safetensors", tensors, metadata=meta)
        torch.save(self.optimizer.state_dict(), d / "optim.pt")
        (d / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")
        return d

    def load_checkpoint(self, path, with_optimizer: bool = True) -> dict:
        d = Path(path)
        meta = json.loads((d / "meta.json").read_text(encoding="utf-8"))
        tensors = load_tensors(d / "model.safetensors")
        if self.student is None:
            self.student = build_model(self.cfg.backbone(), self.cfg.heads(), self.cfg.seed)
        self.student.load_state_dict({k[8:]: v for k, v in tensors.items() if k.startswith("student.")})
        if any(k.startswith("teacher.") for k in tensors):
            self.teacher = teacher_copy(self.student)
            self.teacher.load_state_dict({k[8:]: v for k, v in tensors.items() if k.startswith("teacher.")})
        if "dino.center" in tensors:
            self.dino = self.cfg.dino_state()
            self.dino.center = tensors["dino.center"]
        self._make_optimizer()
        if with_optimizer:
            self.optimizer.load_state_dict(torch.load(d / "optim.pt", weights_only=True))
        self.state = TrainState(meta["phase"], meta["fold"], meta["step"], meta["epoch"],
                                meta.get("phase2_step", 0), meta.get("corrections", 0), meta)
        return meta

    # -- batches -----------------------------------------------------------------

    def _views(self, records, rng, policy: MultiCrop) -> list[torch.Tensor]:
        return collate([policy(self.images[r.image_path], rng) for r in records])

    def _set_lr(self, lr: float):
        for g in self.optimizer.param_groups:
            g["lr"] = lr

    def _update(self, loss: torch.Tensor):
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()

    def _supervised_step(self, records, rng, posw: torch.Tensor) -> dict:
        """One student update on labeled data over the two global views."""
        views = self._views(records, rng, self.policy.without_locals())
        disease, symptoms, mask = _labels(records)
        self.student.train()
        outs = self.student.forward_views(views, with_dino=False)
        g = self.weights.focal_gamma
        ce = sum(disease_ce(o.disease_logits, disease, self.class_weights) for o in outs) / len(outs)
        focal = sum(focal_bce(o.symptom_logits, symptoms, g, posw, mask) for o in outs) / len(outs)
        loss = combined_loss(1, 0, {"disease": ce, "focal": focal}, self.weights)
        _finite(loss, "supervised", self.state.global_step)
        self._update(loss)
        return {"loss_total": loss.item(), "loss_disease": ce.item(), "loss_focal": focal.item()}

    @staticmethod
    def _row(step, phase, fold, lr, ema_m=None, **losses) -> dict:
        row = {"step": step, "phase": phase, "fold": fold, "loss_total": None, "loss_dino": None,
               "loss_kl": None, "loss_focal": None, "loss_disease": None, "lr": lr, "ema_m": ema_m}
        row.update(losses)
        return row

    # -- phase 1 -----------------------------------------------------------------

    def run_phase1(self, resume_from=None) -> Path:
        """Supervised pretraining of the student on the labeled partition; returns the final checkpoint."""
        if resume_from:
            self.load_checkpoint(resume_from)
            if self.state.phase != 1:
                raise TrainingError("resume checkpoint is not a phase-1 checkpoint")
        else:
            self._init_student()
            self._make_optimizer()
            self.state = TrainState(phase=1)
        logger = MetricsLog(self.tc.metrics_dir / "phase1.jsonl", self.cfg)
        B = self.tc.batch_size
        steps_per_epoch = math.ceil(len(self.labeled) / B)
        total = self.tc.epochs_phase1 * steps_per_epoch
        for epoch in range(self.state.epoch, self.tc.epochs_phase1):
            rng = derive_rng(self.cfg.seed, 1, epoch)
            torch.manual_seed(derive_torch_seed(self.cfg.seed, 1, epoch))
            order = rng.permutation(len(self.labeled))
            for b in range(steps_per_epoch):
                batch = [self.labeled[i] for i in order[b * B:(b + 1) * B]]
                lr = lr_schedule(self.state.global_step, total, self.cfg["optim.lr_start"], self.cfg["optim.lr_end"])
                self._set_lr(lr)
                losses = self._supervised_step(batch, rng, self.posw_phase1)
                self.state.global_step += 1
                logger.log(**self._row(self.state.global_step, 1, None, lr, epoch=epoch, **losses))
            self.state.epoch = epoch + 1
            self.save_checkpoint(f"phase1/epoch{epoch + 1:03d}")
        return self.save_checkpoint("phase1/final")

    # -- phase 2 / 3 -------------------------------------------------------------

    def fold_records(self, fold: int) -> list[SampleRecord]:
        """Labeled partition plus unlabeled folds 0..fold, in manifest order (labels dropped later)."""
        ids = self.plan.labeled_ids | self.plan.cumulative_unlabeled(fold)
        return [r for r in self.manifest.records if r.patient_id in ids]

    def unlabeled_count(self, fold: int) -> int:
        ids = self.plan.cumulative_unlabeled(fold)
        return sum(r.patient_id in ids for r in self.manifest.records)

    def phase2_total_steps(self) -> int:
        B = self.tc.batch_size
        n_folds = len(self.plan.unlabeled_fold_ids)
        return sum(self.tc.epochs_per_fold * math.ceil(len(self.fold_records(f)) / B) for f in range(n_folds))

    def start_phase2(self, phase1_checkpoint):
        """Student and teacher both start from the phase-1 weights."""
        self.load_checkpoint(phase1_checkpoint, with_optimizer=False)
        self.teacher = teacher_copy(self.student)
        self.dino = self.cfg.dino_state()
        self._make_optimizer()
        self.state = TrainState(phase=2, fold_index=0)

    def distill_step(self, records, rng, epoch: int, fold_step: int, fold_total: int) -> dict:
        """Student on all views, teacher on globals, combined loss, student update, then EMA."""
        cfg = self.cfg
        views = self._views(records, rng, self.policy)
        self.teacher.eval()
        with torch.no_grad():
            t_outs = self.teacher.forward_views(views, teacher=True)
        self.student.train()
        s_outs = self.student.forward_views(views)

        use_dino = epoch < self.tc.ssl_epoch
        parts = {}
        if use_dino:
            parts["dino"] = self.dino.loss([o.dino_logits for o in s_outs], [o.dino_logits for o in t_outs],
                                           self.state.phase2_step, self._phase2_total)
        t_disease = torch.stack([o.disease_logits for o in t_outs]).mean(0)
        t_symptom = torch.stack([torch.sigmoid(o.symptom_logits) for o in t_outs]).mean(0)
        n_g = len(t_outs)
        parts["kl"] = sum(kl_distill(o.disease_logits, t_disease, self.weights.kl_temp) for o in s_outs[:n_g]) / n_g
        parts["focal"] = sum(focal_bce(o.symptom_logits, t_symptom, self.weights.focal_gamma)
                             for o in s_outs[:n_g]) / n_g
        loss = combined_loss(2, epoch, parts, self.weights, self.tc.ssl_epoch)
        _finite(loss, "distillation", self.state.global_step)
        self._update(loss)
        m = ema_momentum(fold_step, fold_total, cfg["ema.m_start"], cfg["ema.m_end"])
        ema_update(self.teacher, self.student, m)
        return {"loss_total": loss.item(), "loss_dino": parts["dino"].item() if use_dino else None,
                "loss_kl": parts["kl"].item(), "loss_focal": parts["focal"].item(), "ema_m": m,
                "student_views": len(s_outs), "teacher_views": len(t_outs)}

    def run_correction(self, logger: MetricsLog | None = None) -> None:
        """Student-only supervised repair on the 3x symptom-weighted sampler; teacher untouched."""
        k = self.state.corrections
        rng = derive_rng(self.cfg.seed, 3, k)
        sampler = WeightedSampler(sampler_weights(self.labeled, self.cfg["train.sampler_positive_factor"]), rng)
        lr = self.optimizer.param_groups[0]["lr"]
        for sub in range(self.tc.correction_steps):
            batch = [self.labeled[i] for i in sampler.draw(self.tc.correction_batch_size)]
            losses = self._supervised_step(batch, rng, self.posw_correction)
            if logger:
                logger.log(**self._row(self.state.global_step, PHASE_CORRECTION, self.state.fold_index, lr,
                                       correction=k, sub_step=sub, **losses))
        self.state.corrections += 1

    def run_fold(self, fold: int, resume_epoch: int = 0) -> Path:
        if fold >= len(self.plan.unlabeled_fold_ids):
            raise TrainingError(f"fold {fold} missing from split plan")
        logger = MetricsLog(self.tc.metrics_dir / "phase2.jsonl", self.cfg)
        self._phase2_total = self.phase2_total_steps()
        records = self.fold_records(fold)
        B = self.tc.batch_size
        steps_per_epoch = math.ceil(len(records) / B)
        fold_total = self.tc.epochs_per_fold * steps_per_epoch
        self.state.phase, self.state.fold_index = 2, fold
        for epoch in range(resume_epoch, self.tc.epochs_per_fold):
            rng = derive_rng(self.cfg.seed, 2, fold, epoch)
            torch.manual_seed(derive_torch_seed(self.cfg.seed, 2, fold, epoch))
            order = rng.permutation(len(records))
            for b in range(steps_per_epoch):
                fold_step = epoch * steps_per_epoch + b
                batch = [records[i] for i in order[b * B:(b + 1) * B]]
                lr = lr_schedule(fold_step, fold_total, self.cfg["optim.lr_start"], self.cfg["optim.lr_end"])
                self._set_lr(lr)
                out = self.distill_step(batch, rng, epoch, fold_step, fold_total)
                self.state.global_step += 1
                self.state.phase2_step += 1
                logger.log(**self._row(self.state.global_step, 2, fold, lr, epoch=epoch, **out))
                if (fold_step + 1) % self.tc.correction_interval == 0:
                    self.run_correction(logger)
            self.state.epoch = epoch + 1
            self.save_checkpoint(f"phase2/fold{fold}/epoch{epoch + 1:03d}")
        self.state.epoch = 0
        return self.save_checkpoint(f"phase2/fold{fold}/final")

    def run_phase2(self, phase1_checkpoint, folds: Sequence[int] | None = None) -> Path:
        """All folds in order; fold f distils on the labeled data plus unlabeled folds 0..f."""
        self.start_phase2(phase1_checkpoint)
        last = None
        for f in folds if folds is not None else range(len(self.plan.unlabeled_fold_ids)):
            last = self.run_fold(f)
        return last

    def resume_phase2(self, checkpoint) -> None:
        """Continue from a phase-2 checkpoint (end of a fold or of an epoch)."""
        meta = self.load_checkpoint(checkpoint)
        if meta["phase"] != 2 or self.teacher is None:
            raise TrainingError("not a phase-2 checkpoint")


# -- inference ---------------------------------------------------------------------

@torch.no_grad()
def predict(model: DistlNet, images: Sequence[np.ndarray], size: int, batch_size: int = 64):
    """(disease probabilities (n, 3), symptom probabilities (n, 7)) on clean resized views."""
    model.eval()
    dis, sym = [], []
    for i in range(0, len(images), batch_size):
        x = torch.stack([eval_view(img, size) for img in images[i:i + batch_size]])
        out = model(x, with_dino=False)
        dis.append(torch.softmax(out.disease_logits, -1))
        sym.append(torch.sigmoid(out.symptom_logits))
    return torch.cat(dis).numpy(), torch.cat(sym).numpy()


def evaluate(model: DistlNet, records: Sequence[SampleRecord], images: ImageStore, size: int,
             threshold: float = 0.5) -> dict:
    from .metrics import disease_metrics, symptom_metrics

    dprob, sprob = predict(model, [images[r.image_path] for r in records], size)
    out = {"n_images": len(records)}
    lab = [i for i, r in enumerate(records) if r.disease is not DiseaseLabel.UNLABELED]
    if lab:
        out["disease"] = disease_metrics(dprob[lab].argmax(1), [records[i].disease.index for i in lab])
    sym = [i for i, r in enumerate(records) if r.symptoms is not None]
    if sym:
        truths = np.array([records[i].symptoms for i in sym], dtype=bool)
        out["symptom"] = symptom_metrics(sprob[sym], truths, threshold)
    return out


def load_network(checkpoint, cfg: RunConfig, network: str = "teacher") -> DistlNet:
    """Student or teacher weights from a checkpoint directory (teacher falls back to student)."""
    tensors = load_tensors(Path(checkpoint) / "model.safetensors")
    prefix = f"{network}."
    if not any(k.startswith(prefix) for k in tensors):
        prefix = "student."
    model = build_model(cfg.backbone(teacher=True), cfg.heads(), cfg.seed)
    model.load_state_dict({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
    model.eval()
    return model
