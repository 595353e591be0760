import math

import numpy as np
import pytest
import torch

from cxrdistl import trainer as trainer_mod
from cxrdistl.config import resolve
from cxrdistl.split import make_split
from cxrdistl.trainer import PHASE_CORRECTION, TrainConfig, Trainer, TrainingError, derive_rng, read_metrics
from conftest import TINY


def _cfg(**kw):
    return resolve("toy", {**TINY, **kw})


@pytest.fixture(scope="module")
def setup(tiny_corpus):
    root, manifest = tiny_corpus
    plan = make_split(manifest, 0, labeled_frac=0.5)
    return root, manifest, plan


def _trainer(setup, out, **kw):
    root, manifest, plan = setup
    return Trainer(_cfg(**kw), manifest, plan, root, out)


@pytest.fixture(scope="module")
def phase1(setup, tmp_path_factory):
    out = tmp_path_factory.mktemp("p1")
    tr = _trainer(setup, out)
    ck = tr.run_phase1()
    return tr, ck, out


def test_train_config_invariants(tmp_path):
    with pytest.raises(ValueError):
        TrainConfig(1, 2, 1, 0, 1, 1, 1, 0, tmp_path, tmp_path)
    with pytest.raises(ValueError):
        TrainConfig(1, 2, 3, 5, 1, 1, 1, 0, tmp_path, tmp_path)


def test_phase1_step_bookkeeping_and_checkpoints(phase1):
    tr, ck, out = phase1
    rows = read_metrics(out / "metrics" / "phase1.jsonl")
    per_epoch = math.ceil(len(tr.labeled) / TINY["train.batch_size"])
    assert len(rows) == TINY["train.epochs_phase1"] * per_epoch
    assert [r["step"] for r in rows] == list(range(1, len(rows) + 1))
    assert all(r["phase"] == 1 and math.isfinite(r["loss_total"]) for r in rows)
    for e in range(1, TINY["train.epochs_phase1"] + 1):
        assert (out / "checkpoints" / "phase1" / f"epoch{e:03d}" / "model.safetensors").exists()
    assert ck == out / "checkpoints" / "phase1" / "final"


@pytest.fixture(scope="module")
def separable(tmp_path_factory):
    """60 fully labeled images, 3 classes told apart by brightness, symptoms tied to class."""
    from cxrdistl.data import DiseaseLabel, Manifest
    from cxrdistl.qc import write_png
    from cxrdistl.split import SplitPlan
    from conftest import make_record

    root = tmp_path_factory.mktemp("separable")
    rng = np.random.default_rng(0)
    classes = [DiseaseLabel.NORMAL, DiseaseLabel.TB, DiseaseLabel.COVID]
    recs = []
    for i in range(60):
        c = i % 3
        img = np.clip(rng.normal(40 + 80 * c, 10, (32, 32)), 0, 255).astype(np.uint8)
        write_png(root / f"{i}.png", img)
        recs.append(make_record(f"{i}.png", f"P{i:02d}", classes[c], [j == c for j in range(7)]))
    ids = frozenset(r.patient_id for r in recs)
    return root, Manifest(tuple(recs)), SplitPlan(frozenset(), ids, (frozenset(),) * 3, 0)


def test_phase1_loss_decreases_on_separable_set(separable, tmp_path):
    tr = Trainer(_cfg(**{"optim.lr_end": 1e-3}), *separable[1:], separable[0], tmp_path)
    tr.run_phase1()
    rows = read_metrics(tmp_path / "metrics" / "phase1.jsonl")
    means = [np.mean([r["loss_total"] for r in rows if r["epoch"] == e]) for e in range(5)]
    assert all(b < a for a, b in zip(means, means[1:])), means


def test_logged_total_is_weighted_sum(phase1):
    _, _, out = phase1
    for r in read_metrics(out / "metrics" / "phase1.jsonl"):
        assert r["loss_total"] == pytest.approx(0.25 * r["loss_disease"] + 0.75 * r["loss_focal"], abs=1e-6)


def test_phase1_resume_identical_trace(setup, phase1, tmp_path):
    _, _, full_out = phase1
    full = read_metrics(full_out / "metrics" / "phase1.jsonl")
    tr = _trainer(setup, tmp_path)
    tr.run_phase1(resume_from=full_out / "checkpoints" / "phase1" / "epoch002")
    resumed = read_metrics(tmp_path / "metrics" / "phase1.jsonl")
    assert resumed == [r for r in full if r["epoch"] >= 2]


def test_resume_rejects_wrong_phase(setup, phase1, tmp_path):
    tr0, ck, _ = phase1
    tr = _trainer(setup, tmp_path)
    tr.start_phase2(ck)
    tr.state.fold_index = 0
    d = tr.save_checkpoint("phase2/x")
    with pytest.raises(TrainingError, match="phase-1"):
        _trainer(setup, tmp_path / "b").run_phase1(resume_from=d)


def test_checkpoint_roundtrip_bit_exact(setup, phase1, tmp_path):
    tr0, ck, _ = phase1
    tr = _trainer(setup, tmp_path)
    tr.load_checkpoint(ck)
    for (k, a), (_, b) in zip(tr0.student.state_dict().items(), tr.student.state_dict().items()):
        assert torch.equal(a, b), k
    assert tr.state.phase == 1 and tr.state.epoch == TINY["train.epochs_phase1"]


def test_ema_oracle_and_views(setup, phase1, tmp_path):
    _, ck, _ = phase1
    tr = _trainer(setup, tmp_path)
    tr.start_phase2(ck)
    tr._phase2_total = tr.phase2_total_steps()
    before = {k: v.clone() for k, v in tr.teacher.state_dict().items()}
    out = tr.distill_step(tr.fold_records(0)[:8], derive_rng(0, 9), 0, 0, 10)
    m = out["ema_m"]
    assert m == pytest.approx(0.99)
    student = tr.student.state_dict()
    for k, v in tr.teacher.state_dict().items():
        torch.testing.assert_close(v, m * before[k] + (1 - m) * student[k], rtol=0, atol=1e-6)
    assert out["student_views"] == 2 + TINY["local.n_crops"] and out["teacher_views"] == 2
    assert out["loss_total"] == pytest.approx(0.5 * out["loss_dino"] + 0.5 * (0.5 * out["loss_kl"] + 0.5 * out["loss_focal"]),
                                              abs=1e-6)


def test_teacher_gets_no_gradient(setup, phase1, tmp_path):
    _, ck, _ = phase1
    tr = _trainer(setup, tmp_path)
    tr.start_phase2(ck)
    tr._phase2_total = tr.phase2_total_steps()
    tr.distill_step(tr.fold_records(0)[:8], derive_rng(0, 9), 0, 0, 10)
    assert all(p.grad is None for p in tr.teacher.parameters())


def test_correction_leaves_teacher_untouched(setup, phase1, tmp_path):
    _, ck, _ = phase1
    tr = _trainer(setup, tmp_path)
    tr.start_phase2(ck)
    t_before = {k: v.clone() for k, v in tr.teacher.state_dict().items()}
    s_before = {k: v.clone() for k, v in tr.student.state_dict().items()}
    tr.run_correction()
    assert all(torch.equal(v, t_before[k]) for k, v in tr.teacher.state_dict().items())
    assert any(not torch.equal(v, s_before[k]) for k, v in tr.student.state_dict().items())
    assert tr.state.corrections == 1


def test_cumulative_folds(setup, phase1, tmp_path):
    tr = _trainer(setup, tmp_path)
    counts = [tr.unlabeled_count(f) for f in range(3)]
    assert counts[0] < counts[1] < counts[2]
    labeled = set(r.image_path for r in tr.labeled)
    assert labeled <= set(r.image_path for r in tr.fold_records(0))


@pytest.fixture(scope="module")
def phase2(setup, phase1, tmp_path_factory):
    _, ck, _ = phase1
    out = tmp_path_factory.mktemp("p2")
    tr = _trainer(setup, out)
    final = tr.run_phase2(ck)
    return tr, final, out


def test_phase2_rows_and_correction_count(phase2):
    tr, final, out = phase2
    rows = read_metrics(out / "metrics" / "phase2.jsonl")
    B, interval = TINY["train.batch_size"], TINY["train.correction_interval"]
    for f in range(3):
        steps = TINY["train.epochs_per_fold"] * math.ceil(len(tr.fold_records(f)) / B)
        main = [r for r in rows if r["phase"] == 2 and r["fold"] == f]
        corr = [r for r in rows if r["phase"] == PHASE_CORRECTION and r["fold"] == f]
        assert len(main) == steps
        assert len({r["correction"] for r in corr}) == steps // interval
        assert len(corr) == (steps // interval) * TINY["train.correction_steps"]
    ssl = TINY["train.epochs_per_fold"] // 2
    for r in rows:
        if r["phase"] == 2:
            assert (r["loss_dino"] is not None) == (r["epoch"] < ssl)
            assert 0.99 <= r["ema_m"] <= 1.0
    assert final == out / "checkpoints" / "phase2" / "fold2" / "final"


def test_correction_trigger_arithmetic():
    assert sum(1 for s in range(1600) if (s + 1) % 500 == 0) == 3


def test_phase2_resume_matches(setup, phase1, phase2, tmp_path):
    _, _, full_out = phase2
    tr = _trainer(setup, tmp_path)
    tr.resume_phase2(full_out / "checkpoints" / "phase2" / "fold0" / "final")
    tr.run_fold(1)
    full = [r for r in read_metrics(full_out / "metrics" / "phase2.jsonl") if r["fold"] == 1]
    assert read_metrics(tmp_path / "metrics" / "phase2.jsonl") == full


def test_non_finite_loss_aborts(setup, tmp_path, monkeypatch):
    monkeypatch.setattr(trainer_mod, "focal_bce", lambda *a, **k: torch.tensor(float("nan")))
    with pytest.raises(TrainingError, match="non-finite"):
        _trainer(setup, tmp_path).run_phase1()


def test_empty_labeled_partition(setup, tmp_path):
    root, manifest, plan = setup
    from cxrdistl.split import SplitPlan
    empty = SplitPlan(plan.test_ids, frozenset(), plan.unlabeled_fold_ids, plan.seed)
    with pytest.raises(TrainingError, match="empty"):
        Trainer(_cfg(), manifest, empty, root, tmp_path)


def test_missing_fold(setup, phase1, tmp_path):
    tr = _trainer(setup, tmp_path)
    tr.start_phase2(phase1[1])
    with pytest.raises(TrainingError, match="fold 3"):
        tr.run_fold(3)
