"""Stage 1 (teacher) and stage 2 (views distillation) training loops."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from .datamodel import Dataset, ImageStore, SetBag
from .errors import ConfigurationError
from .losses import LossConfig, LossInputs, vkd_objective
from .model import (
    ModelBundle,
    batch_statistics,
    build_model,
    init_student_from_teacher,
    load_checkpoint,
    save_checkpoint,
    state_hash,
    to_tensor,
)
from .sampling import DistillSource, PKSampler, SamplerConfig, make_rng, student_subsets

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class Augmentation:
    flip: bool = True
    random_erase: bool = True
    erase_prob: float = 0.5
    erase_area: tuple = (0.02, 0.4)
    erase_aspect: float = 0.3


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "teacher"
    epochs: int = 300
    base_lr: float = 1e-4
    milestones: tuple = (100, 200)
    lr_decay: float = 0.1
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    loss: LossConfig = field(default_factory=lambda: LossConfig(enable_kd=False, enable_dp=False))
    arch: str = "tinyconv"
    embed_dim: int = 64
    seed: int = 0
    augmentation: Augmentation = field(default_factory=Augmentation)

    def __post_init__(self):
        if self.stage not in ("teacher", "distill"):
            raise ConfigurationError(f"unknown stage {self.stage!r}")
        ms = tuple(int(m) for m in self.milestones)
        object.__setattr__(self, "milestones", ms)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ConfigurationError("milestones must be strictly increasing")
        if ms and ms[-1] >= self.epochs:
            raise ConfigurationError("milestones must be smaller than epochs")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self), default=str))

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def teacher_config(**overrides) -> TrainConfig:
    return dataclasses.replace(TrainConfig(), **overrides)


def distill_config(**overrides) -> TrainConfig:
    base = TrainConfig(stage="distill", epochs=500, milestones=(300, 450), loss=LossConfig())
    return dataclasses.replace(base, **overrides)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    steps = sum(1 for m in cfg.milestones if m <= epoch)
    return cfg.base_lr * cfg.lr_decay**steps


def pixel_statistics(pixels: np.ndarray):
    x = pixels.reshape(-1, 3).astype(np.float64) / 255.0
    return x.mean(axis=0), np.maximum(x.std(axis=0), 1e-6)


def augment(x: torch.Tensor, aug: Augmentation, rng: np.random.Generator, fill: torch.Tensor) -> torch.Tensor:
    """Horizontal flip and random erasing on (B, 3, H, W) images in [0, 1]."""
    b, _, h, w = x.shape
    x = x.clone()
    if aug.flip:
        flip = torch.from_numpy(rng.random(b) < 0.5)
        x[flip] = x[flip].flip(-1)
    if aug.random_erase:
        do = rng.random(b) < aug.erase_prob
        areas = rng.uniform(*aug.erase_area, size=b) * h * w
        ratios = np.exp(rng.uniform(np.log(aug.erase_aspect), -np.log(aug.erase_aspect), size=b))
        fy, fx = rng.random(b), rng.random(b)
        fill = fill.reshape(3, 1, 1)
        for i in np.flatnonzero(do):
            eh = int(round(np.sqrt(areas[i] * ratios[i])))
            ew = int(round(np.sqrt(areas[i] / ratios[i])))
            if 0 < eh < h and 0 < ew < w:
                y0 = int(fy[i] * (h - eh))
                x0 = int(fx[i] * (w - ew))
                x[i, :, y0:y0 + eh, x0:x0 + ew] = fill
    return x


def bag_images(store: ImageStore, bags: Sequence[SetBag]) -> torch.Tensor:
    """Stack bags of equal size into (B, n, 3, H, W)."""
    n = len(bags[0].members)
    if any(len(b.members) != n for b in bags):
        raise ValueError("all bags in a batch must have the same size")
    flat = [s for b in bags for s in b.members]
    x = to_tensor(store.get(flat))
    return x.view(len(bags), n, *x.shape[1:])


def _augmented(store, bags, cfg: TrainConfig, rng, model: ModelBundle) -> torch.Tensor:
    x = bag_images(store, bags)
    b, n = x.shape[:2]
    flat = augment(x.flatten(0, 1), cfg.augmentation, rng, model.pixel_mean.flatten())
    return flat.view(b, n, *flat.shape[1:])


@dataclass
class TrainResult:
    model: ModelBundle
    history: List[dict]
    checkpoint: Optional[Path] = None
    teacher_hash: Optional[str] = None


def _seeded(cfg: TrainConfig) -> SamplerConfig:
    # the run seed drives batch composition too; sampler.seed is ignored here
    return dataclasses.replace(cfg.sampler, seed=cfg.seed)


def _make_optimizer(model, cfg: TrainConfig):
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.Adam(params, lr=cfg.base_lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def _write_log(path, history):
    if path is None:
        return
    with open(path, "w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _finish(model, cfg, optimizer, history, epoch, out, log_path, stage):
    model.stage = stage
    model.config_hash = cfg.hash()
    model.extra = {
        **model.extra,
        "config": cfg.to_dict(),
        "adam": {"betas": list(ADAM_BETAS), "eps": ADAM_EPS},
        "history": history,
    }
    state = {"epoch": epoch, "optimizer": optimizer.state_dict()}
    if out is not None:
        save_checkpoint(model, out, training_state=state)
    _write_log(log_path, history)
    model.eval()


def _resume(path, cfg: TrainConfig):
    model, state = load_checkpoint(path, with_training_state=True)
    if model.config_hash != cfg.hash():
        raise ConfigurationError("cannot resume: checkpoint was written under a different config")
    if state is None:
        raise ConfigurationError("checkpoint carries no training state")
    optimizer = _make_optimizer(model, cfg)
    optimizer.load_state_dict(state["optimizer"])
    return model, optimizer, list(model.extra.get("history", [])), state["epoch"]


def _run_epochs(model, optimizer, cfg, sampler, start, stop, step, history, on_epoch=None):
    for epoch in range(start, stop):
        lr = lr_at_epoch(cfg, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        model.train()
        sums = {"ce": 0.0, "tr": 0.0, "kd": 0.0, "dp": 0.0, "total": 0.0}
        batches = sampler.epoch(epoch)
        aug_rng = make_rng(cfg.seed, epoch, 3)
        sub_rng = make_rng(cfg.seed, epoch, 2)
        for batch in batches:
            loss, parts = step(batch, aug_rng, sub_rng)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            for k in sums:
                sums[k] += parts[k]
        rec = {"epoch": epoch, "lr": lr, **{k: v / len(batches) for k, v in sums.items()}}
        if not np.isfinite(rec["total"]):
            log.warning("non-finite loss at epoch %d", epoch)
        history.append(rec)
        log.info("epoch %d lr %.2e total %.4f", epoch, lr, rec["total"])
        if on_epoch is not None:
            on_epoch(epoch)
    return stop


def train_teacher(
    dataset: Dataset,
    cfg: TrainConfig,
    out=None,
    log_path=None,
    store: Optional[ImageStore] = None,
    resume=None,
    stop_epoch=None,
) -> TrainResult:
    """Train the teacher on tracklet bags with CE + triplet (per cfg.loss)."""
    if cfg.stage != "teacher":
        raise ConfigurationError("train_teacher needs a config with stage='teacher'")
    sampler = PKSampler(dataset, _seeded(cfg), "tracklet", require_pairs=cfg.loss.enable_tr)
    store = store or ImageStore.from_dataset(dataset)
    if resume is not None:
        model, optimizer, history, start = _resume(resume, cfg)
    else:
        mean, std = pixel_statistics(store.pixels)
        model = build_model(cfg.arch, cfg.embed_dim, dataset.class_count, cfg.seed, mean, std)
        optimizer = _make_optimizer(model, cfg)
        history, start = [], 0
    model.extra = {"id_map": list(dataset.id_map)}

    def step(batch, aug_rng, _sub_rng):
        x = _augmented(store, batch.bags, cfg, aug_rng, model)
        out_ = model.forward_sets(x)
        labels = torch.as_tensor(batch.labels)
        return vkd_objective(LossInputs(logits=out_.logits, labels=labels, triplet_features=out_.raw_feature), cfg.loss)

    stop = cfg.epochs if stop_epoch is None else min(stop_epoch, cfg.epochs)
    epoch = _run_epochs(model, optimizer, cfg, sampler, start, stop, step, history)
    _finish(model, cfg, optimizer, history, epoch, out, log_path, "teacher")
    return TrainResult(model, history, Path(out) if out else None)


def distill_student(
    dataset: Dataset,
    teacher,
    cfg: TrainConfig,
    out=None,
    log_path=None,
    store: Optional[ImageStore] = None,
    student_arch=None,
    student_dim=None,
    resume=None,
    stop_epoch=None,
) -> TrainResult:
    """Views knowledge distillation of a student from a frozen teacher.

    ``teacher`` is a ModelBundle or a checkpoint path. The teacher is never
    updated; its norm layers use batch statistics during its forwards and its
    stored state is verified unchanged after every epoch.
    """
    if cfg.stage != "distill":
        raise ConfigurationError("distill_student needs a config with stage='distill'")
    if not isinstance(teacher, ModelBundle):
        teacher = load_checkpoint(teacher)
    if teacher.class_count != dataset.class_count:
        raise ConfigurationError(
            f"teacher has {teacher.class_count} classes, dataset has {dataset.class_count}"
        )
    sc = cfg.sampler
    if sc.N <= sc.M:
        raise ConfigurationError("need N > M")
    source = "views" if sc.distill_source == DistillSource.VIEWS else "distill-tracklet"
    sampler = PKSampler(dataset, _seeded(cfg), source, require_pairs=cfg.loss.enable_tr)
    store = store or ImageStore.from_dataset(dataset)

    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    frozen = state_hash(teacher)

    if resume is not None:
        student, optimizer, history, start = _resume(resume, cfg)
    else:
        student = init_student_from_teacher(teacher, student_arch or cfg.arch, cfg.seed, student_dim)
        optimizer = _make_optimizer(student, cfg)
        history, start = [], 0
    student.extra = {"id_map": list(dataset.id_map)}

    def step(batch, aug_rng, sub_rng):
        labels = torch.as_tensor(batch.labels)
        small = student_subsets(batch.bags, sc.M, sub_rng)
        xt = _augmented(store, batch.bags, cfg, aug_rng, teacher)
        xs = _augmented(store, small, cfg, aug_rng, student)
        with torch.no_grad(), batch_statistics(teacher):
            t_out = teacher.forward_sets(xt)
        s_out = student.forward_sets(xs)
        parts = LossInputs(
            logits=s_out.logits,
            labels=labels,
            triplet_features=s_out.raw_feature,
            teacher_logits=t_out.logits,
            teacher_features=t_out.inference_feature,
            student_features=s_out.inference_feature,
        )
        return vkd_objective(parts, cfg.loss)

    def check_frozen(epoch):
        if state_hash(teacher) != frozen:
            raise RuntimeError(f"teacher state changed during epoch {epoch}")

    stop = cfg.epochs if stop_epoch is None else min(stop_epoch, cfg.epochs)
    epoch = _run_epochs(student, optimizer, cfg, sampler, start, stop, step, history, check_frozen)
    _finish(student, cfg, optimizer, history, epoch, out, log_path, "student")
    return TrainResult(student, history, Path(out) if out else None, teacher_hash=frozen)
