"""Command-line entry point: synth, prep, split, train, eval, explain, report.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Outputs go under
``--out-dir`` with a fixed layout::

    prep/        cropped images, manifest.jsonl, qc_report.jsonl
    split.json   patient-wise plan
    checkpoints/ phase1/..., phase2/foldF/...
    metrics/     phase1.jsonl, phase2.jsonl
    overlays/    Grad-CAM PNG + JSON
    reports/     eval JSON and text tables
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

log = logging.getLogger("cxrdistl")

SUBCOMMANDS = ("synth", "prep", "split", "train", "eval", "explain", "report")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _config_args(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--profile", choices=("toy", "paper"), help="defaults profile (file or 'paper' otherwise)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cxrdistl", description="Teacher-student ViT training for chest radiographs.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="write the bundled synthetic corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-images", type=int)
    p.add_argument("--size", type=int)
    _config_args(p)

    p = sub.add_parser("prep", help="lung-mask QC and cropping")
    p.add_argument("--manifest", required=True)
    p.add_argument("--image-root", help="directory image paths are relative to (default: manifest's directory)")
    p.add_argument("--exclusions", help="file of image paths to drop, one per line")
    p.add_argument("--out-dir", required=True)
    _config_args(p)

    p = sub.add_parser("split", help="patient-wise test/labeled/unlabeled-fold split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="split plan JSON path")
    p.add_argument("--seed", type=int)
    _config_args(p)

    p = sub.add_parser("train", help="phase 1 or phase 2 (with periodic correction)")
    p.add_argument("--phase", type=int, choices=(1, 2), required=True)
    p.add_argument("--fold", type=int, help="phase-2 fold to run (default: all folds)")
    p.add_argument("--manifest", required=True, help="prepped manifest")
    p.add_argument("--split", required=True, help="split plan JSON")
    p.add_argument("--image-root", help="default: manifest's directory")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--init", help="phase-2 start checkpoint (default: checkpoints/phase1/final)")
    p.add_argument("--resume", help="phase-1 checkpoint to resume from")
    _config_args(p)

    p = sub.add_parser("eval", help="metrics on a split partition")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=("test", "labeled", "unlabeled", "all"))
    p.add_argument("--split-plan", help="split plan JSON (required unless --split all)")
    p.add_argument("--image-root")
    p.add_argument("--network", choices=("teacher", "student"))
    p.add_argument("--out-dir", required=True)
    _config_args(p)

    p = sub.add_parser("explain", help="Grad-CAM overlay for one image, or box agreement over a manifest")
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", help="greyscale image file")
    src.add_argument("--manifest", help="score every annotated box in this manifest")
    p.add_argument("--symptom", help="symptom name (single-image mode)")
    p.add_argument("--box", help="x,y,w,h in image pixels (single-image mode)")
    p.add_argument("--split", choices=("test", "labeled", "unlabeled", "all"), default="all")
    p.add_argument("--split-plan")
    p.add_argument("--image-root")
    p.add_argument("--network", choices=("teacher", "student"))
    p.add_argument("--out-dir", required=True)
    _config_args(p)

    p = sub.add_parser("report", help="render eval JSON as text tables")
    p.add_argument("--metrics", required=True)
    p.add_argument("--model-name", default="Our model")
    return parser


def _load_cfg(args):
    from .config import load_config

    return load_config(args.config, args.overrides, args.profile)


def _image_root(args, manifest_path) -> Path:
    return Path(args.image_root) if args.image_root else Path(manifest_path).parent


def _select(manifest, part: str, plan_path):
    from .split import SplitPlan

    if part == "all":
        return list(manifest.records)
    if not plan_path:
        raise UsageError(f"--split-plan is required for --split {part}")
    plan = SplitPlan.load(plan_path)
    ids = {"test": plan.test_ids, "labeled": plan.labeled_ids,
           "unlabeled": frozenset().union(*plan.unlabeled_fold_ids)}[part]
    return [r for r in manifest.records if r.patient_id in ids]


def cmd_synth(args) -> int:
    from .synth import SynthConfig, generate

    cfg = _load_cfg(args)
    sc = SynthConfig(n_images=args.n_images or cfg["synth.n_images"], size=args.size or cfg["synth.size"],
                     seed=cfg.seed, finding_p=cfg["synth.finding_p"])
    m = generate(args.out_dir, sc)
    print(f"wrote {len(m.records)} images to {Path(args.out_dir) / 'raw'}")
    return 0


def cmd_prep(args) -> int:
    from .data import load_manifest
    from .qc import ThresholdMaskProvider, prep_corpus, read_exclusions

    cfg = _load_cfg(args)
    m = load_manifest(args.manifest)
    provider = ThresholdMaskProvider((cfg["qc.provider_size"],) * 2, cfg["qc.threshold"])
    excl = read_exclusions(args.exclusions) if args.exclusions else frozenset()
    out = Path(args.out_dir) / "prep"
    kept, rows = prep_corpus(m, _image_root(args, args.manifest), out, provider, excl,
                             cfg["qc.fraction_lo"], cfg["qc.fraction_hi"], cfg["qc.min_contours"])
    print(f"accepted {len(kept.records)}/{len(m.records)}; manifest at {out / 'manifest.jsonl'}")
    return 0


def cmd_split(args) -> int:
    from .data import load_manifest
    from .split import make_split

    cfg = _load_cfg(args)
    m = load_manifest(args.manifest)
    seed = cfg.seed if args.seed is None else args.seed
    plan = make_split(m, seed, cfg["split.test_frac"], cfg["split.labeled_frac"], cfg["split.n_folds"],
                      cfg["split.stratify"])
    plan.check_disjoint(m.patients())
    plan.save(args.out)
    sizes = [len(plan.test_ids), len(plan.labeled_ids)] + [len(f) for f in plan.unlabeled_fold_ids]
    print(f"patients test/labeled/folds: {sizes}; plan at {args.out}")
    return 0


def cmd_train(args) -> int:
    from .data import load_manifest
    from .split import SplitPlan
    from .trainer import Trainer

    cfg = _load_cfg(args)
    m = load_manifest(args.manifest)
    plan = SplitPlan.load(args.split)
    out = Path(args.out_dir)
    tr = Trainer(cfg, m, plan, _image_root(args, args.manifest), out)
    if args.phase == 1:
        ck = tr.run_phase1(resume_from=args.resume)
    else:
        ckdir = out / "checkpoints"
        folds = range(len(plan.unlabeled_fold_ids)) if args.fold is None else [args.fold]
        first = folds[0]
        if first == 0:
            tr.start_phase2(args.init or ckdir / "phase1" / "final")
        else:
            tr.resume_phase2(args.init or ckdir / "phase2" / f"fold{first - 1}" / "final")
        for f in folds:
            ck = tr.run_fold(f)
    print(f"checkpoint {ck}")
    return 0


def _write_report(out_dir: Path, name: str, result: dict) -> Path:
    from .metrics import format_disease_table, format_symptom_table

    d = out_dir / "reports"
    d.mkdir(parents=True, exist_ok=True)
    obj = {k: (v.to_json() if hasattr(v, "to_json") else v) for k, v in result.items()}
    path = d / f"{name}.json"
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    text = []
    if "disease" in result:
        text.append(format_disease_table(result["disease"]))
    if "symptom" in result:
        text.append(format_symptom_table(result["symptom"]))
    (d / f"{name}.txt").write_text("\n\n".join(text) + "\n", encoding="utf-8")
    print("\n\n".join(text))
    return path


def cmd_eval(args) -> int:
    from .data import load_manifest
    from .trainer import ImageStore, evaluate, load_network

    cfg = _load_cfg(args)
    m = load_manifest(args.manifest)
    records = _select(m, args.split, args.split_plan)
    if not records:
        raise UsageError(f"partition {args.split!r} is empty")
    model = load_network(args.checkpoint, cfg, args.network or cfg["eval.network"])
    result = evaluate(model, records, ImageStore(_image_root(args, args.manifest)), cfg["global1.size"],
                      cfg["eval.threshold"])
    path = _write_report(Path(args.out_dir), f"eval_{args.split}", result)
    print(f"report at {path}")
    return 0


def _parse_box(s: str) -> tuple[int, int, int, int]:
    try:
        x, y, w, h = (int(v) for v in s.split(","))
    except ValueError:
        raise UsageError(f"--box must be x,y,w,h integers, got {s!r}") from None
    return x, y, w, h


def cmd_explain(args) -> int:
    import numpy as np

    from .augment import eval_view
    from .data import SYMPTOMS, load_manifest
    from .gradcam import box_agreement, grad_cam, overlap, render_overlay
    from .qc import read_grey
    from .trainer import ImageStore, load_network

    cfg = _load_cfg(args)
    model = load_network(args.checkpoint, cfg, args.network or cfg["eval.network"])
    size = cfg["global1.size"]
    out = Path(args.out_dir) / "overlays"
    out.mkdir(parents=True, exist_ok=True)

    if args.manifest:
        m = load_manifest(args.manifest)
        store = ImageStore(_image_root(args, args.manifest))
        records = [r for r in _select(m, args.split, args.split_plan) if r.boxes]
        samples = ((r.image_path, store[r.image_path], r.boxes) for r in records)
        res = box_agreement(model, samples, size, cfg["explain.quantile"],
                            rng=np.random.Generator(np.random.PCG64(cfg.seed)))
        path = out / "box_agreement.json"
        path.write_text(json.dumps(res, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        print(f"{res['n_boxes']} boxes: pointing {res['pointing_rate']}, random baseline {res['baseline_rate']}, "
              f"mean IoU {res['mean_iou']}; details at {path}")
        return 0

    if args.symptom not in SYMPTOMS:
        raise UsageError(f"--symptom must be one of {', '.join(SYMPTOMS)}")
    image = read_grey(args.image)
    idx = SYMPTOMS.index(args.symptom)
    sal = grad_cam(model, eval_view(image, size), idx, out_size=image.shape[:2], image_id=args.image)
    box = _parse_box(args.box) if args.box else None
    stem = f"{Path(args.image).stem}_{args.symptom}"
    render_overlay(image, sal, box, out / f"{stem}.png", cfg["explain.alpha"])
    info = {"map": sal.stats()}
    if box is not None:
        info["overlap"] = overlap(sal, box, cfg["explain.quantile"]).to_json()
    (out / f"{stem}.json").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(info, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    from .metrics import format_disease_table, format_symptom_table, report_from_json

    obj = json.loads(Path(args.metrics).read_text(encoding="utf-8"))
    parts = []
    if "disease" in obj:
        parts.append(format_disease_table(report_from_json(obj["disease"]), args.model_name))
    if "symptom" in obj:
        parts.append(format_symptom_table(report_from_json(obj["symptom"]), args.model_name))
    if not parts:
        raise UsageError(f"{args.metrics}: no 'disease' or 'symptom' report found")
    print("\n\n".join(parts))
    return 0


COMMANDS = {"synth": cmd_synth, "prep": cmd_prep, "split": cmd_split, "train": cmd_train,
            "eval": cmd_eval, "explain": cmd_explain, "report": cmd_report}


def main(argv=None) -> int:
    from .config import ConfigError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except (UsageError, ConfigError) as e:
        print(e, file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - every runtime failure maps to exit 2
        log.debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
