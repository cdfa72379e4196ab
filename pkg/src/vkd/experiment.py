"""Seeded desk-scale experiment: one teacher, several students, their diagnostics.

Run ``python -m vkd.experiment --seeds 0 1 2 3 4 --out runs/`` to reproduce the
directional checks; each seed writes ``seed<k>/result.json``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Sequence

from .analysis import distance_block_report, fit_camera_probe
from .datamodel import load_dataset_root
from .evaluation import evaluate_protocol, extract_features, gallery_size_sweep, load_stores
from .losses import LossConfig
from .model import load_checkpoint, state_hash
from .sampling import SamplerConfig
from .synthetic import SynthConfig, generate_synthetic
from .trainer import Augmentation, TrainResult, distill_config, distill_student, teacher_config, train_teacher

log = logging.getLogger(__name__)

# name -> (distillation source, loss toggles)
VARIANTS: Dict[str, tuple] = {
    "vkd": ("views", {}),
    "time": ("tracklet", {}),
    "ce+tr": ("views", {"enable_kd": False, "enable_dp": False}),
    "kd+dp": ("views", {"enable_ce": False, "enable_tr": False}),
    "ce+tr+kd": ("views", {"enable_dp": False}),
    "ce+tr+dp": ("views", {"enable_kd": False}),
}


@dataclass(frozen=True)
class ExperimentConfig:
    # strong per-camera colour shift so that viewpoint invariance carries weight
    synth: SynthConfig = field(default_factory=lambda: SynthConfig(camera_gain=0.5))
    arch: str = "tinyconv"
    embed_dim: int = 64
    teacher_epochs: int = 40
    student_epochs: int = 60
    teacher_lr: float = 3e-3
    student_lr: float = 3e-3
    # one tenfold lr drop at this fraction of each schedule
    decay_at: float = 0.75
    # single-frame students: with 6-frame tracklets, pooling two frames from
    # different cameras lets CE and triplet average the camera shift away
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(M=1))
    loss: LossConfig = field(default_factory=LossConfig)
    augmentation: Augmentation = field(default_factory=Augmentation)
    variants: tuple = tuple(VARIANTS)
    probe_epochs: int = 300
    sweep_sizes: tuple = (1, 2, 4, 6)
    block_ids: int = 8
    exclusion: str = "standard"


def teacher_train_config(cfg: ExperimentConfig, seed: int):
    return teacher_config(
        epochs=cfg.teacher_epochs,
        base_lr=cfg.teacher_lr,
        milestones=(int(cfg.teacher_epochs * cfg.decay_at),),
        sampler=cfg.sampler,
        arch=cfg.arch,
        embed_dim=cfg.embed_dim,
        seed=seed,
        augmentation=cfg.augmentation,
    )


def student_train_config(cfg: ExperimentConfig, seed: int, variant: str):
    source, toggles = VARIANTS[variant]
    return distill_config(
        epochs=cfg.student_epochs,
        base_lr=cfg.student_lr,
        milestones=(int(cfg.student_epochs * cfg.decay_at),),
        sampler=dataclasses.replace(cfg.sampler, distill_source=source),
        loss=dataclasses.replace(cfg.loss, **toggles),
        arch=cfg.arch,
        embed_dim=cfg.embed_dim,
        seed=seed,
        augmentation=cfg.augmentation,
    )


def _diagnostics(model, data, stores, cfg: ExperimentConfig, seed: int) -> dict:
    report = evaluate_protocol(model, data, "I2V", cfg.exclusion, stores=stores)
    table = extract_features(model, data.gallery, "gallery", "V2V", store=stores["gallery"])
    probe = fit_camera_probe(table, epochs=cfg.probe_epochs, seed=seed)
    sweep = gallery_size_sweep(model, data, cfg.sweep_sizes, cfg.exclusion, stores=stores)
    return {
        "i2v": report.summary(),
        "probe": {"accuracy": probe.accuracy, "prior": probe.prior_accuracy},
        "sweep": sweep,
    }


def _losses(res: TrainResult) -> dict:
    return {"first_total": res.history[0]["total"], "last_total": res.history[-1]["total"]}


def run_seed(cfg: ExperimentConfig, seed: int, workdir) -> dict:
    """Generate data, train the teacher, distill every variant; write and return result.json."""
    root = Path(workdir) / f"seed{seed}"
    root.mkdir(parents=True, exist_ok=True)
    generate_synthetic(dataclasses.replace(cfg.synth, seed=seed), root / "data")
    data = load_dataset_root(root / "data")
    stores = load_stores(data)

    start = time.perf_counter()
    teacher = train_teacher(data.train, teacher_train_config(cfg, seed), out=root / "teacher.ckpt",
                            log_path=root / "teacher.log.jsonl", store=stores["train"])
    result = {"seed": seed, "teacher": {**_diagnostics(teacher.model, data, stores, cfg, seed), **_losses(teacher)}}
    blocks = {}
    for mode in ("tracklet", "views"):
        rep = distance_block_report(teacher.model, data.train, mode, ids=cfg.block_ids, bags_per_id=2, bag_size=8, seed=seed,
                                    store=stores["train"])
        blocks[mode] = rep.summary()
    result["teacher"]["blocks"] = blocks
    result["teacher"]["seconds"] = round(time.perf_counter() - start, 1)

    result["students"] = {}
    for variant in cfg.variants:
        start = time.perf_counter()
        ckpt = root / f"student-{variant}.ckpt"
        student = distill_student(data.train, root / "teacher.ckpt", student_train_config(cfg, seed, variant),
                                  out=ckpt, log_path=root / f"student-{variant}.log.jsonl", store=stores["train"])
        after = state_hash(load_checkpoint(root / "teacher.ckpt"))
        result["students"][variant] = {
            **_diagnostics(student.model, data, stores, cfg, seed),
            **_losses(student),
            "teacher_hash_before": student.teacher_hash,
            "teacher_hash_after": after,
            "seconds": round(time.perf_counter() - start, 1),
        }
        log.info("seed %d %s mAP %.3f", seed, variant, result["students"][variant]["i2v"]["mAP"])
    (root / "result.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return result


def run(cfg: ExperimentConfig, seeds: Sequence[int], workdir) -> list:
    return [run_seed(cfg, s, workdir) for s in seeds]


def main(argv=None):
    p = argparse.ArgumentParser(prog="python -m vkd.experiment", description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=list(VARIANTS))
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = ExperimentConfig(variants=tuple(args.variants))
    for res in run(cfg, args.seeds, args.out):
        row = {"teacher": res["teacher"]["i2v"]["mAP"], **{k: v["i2v"]["mAP"] for k, v in res["students"].items()}}
        print(f"seed {res['seed']}: " + " ".join(f"{k}={v:.3f}" for k, v in row.items()))


if __name__ == "__main__":
    main()
