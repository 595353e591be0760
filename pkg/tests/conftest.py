import numpy as np
import pytest
import torch

from cxrdistl.data import DiseaseLabel, SampleRecord


def make_record(path="a.png", patient="P1", disease=DiseaseLabel.NORMAL, symptoms=(0,) * 7, boxes=(),
                source="test"):
    sym = None if symptoms is None else tuple(bool(s) for s in symptoms)
    return SampleRecord(path, patient, source, disease, sym, tuple(boxes))


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield


# Small enough that a full phase 1 + phase 2 run takes seconds on one CPU.
TINY = {
    "global1.size": 32, "global2.size": 32, "local.size": 16, "local.n_crops": 2,
    "model.embed_dim": 32, "model.depth": 2, "model.heads": 4, "model.pos_grid": 4,
    "model.dino_hidden": 32, "model.dino_bottleneck": 16, "model.dino_out": 64, "model.head_hidden": 16,
    "optim.lr_start": 1e-3, "optim.lr_end": 1e-4, "ema.m_start": 0.99,
    "train.epochs_phase1": 5, "train.epochs_per_fold": 2, "train.batch_size": 16,
    "train.correction_interval": 3, "train.correction_steps": 2, "train.correction_batch_size": 8,
    "synth.n_images": 80, "synth.size": 64,
}


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """(root, derived manifest) of a small prepped synthetic corpus."""
    from cxrdistl.qc import prep_corpus
    from cxrdistl.synth import SynthConfig, generate

    root = tmp_path_factory.mktemp("tiny_corpus")
    raw = generate(root, SynthConfig(n_images=TINY["synth.n_images"], size=TINY["synth.size"], seed=0))
    derived, _ = prep_corpus(raw, root, root / "prep")
    return root / "prep", derived


# criterion number -> (PASS/FAIL, title, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        status, title, detail = ACCEPTANCE.get(n, ("NOT RUN", "", ""))
        terminalreporter.write_line(f"criterion {n:2d} {status:7s} {title}" + (f" ({detail})" if detail else ""))
