"""Encoder, BNNeck head, set pooling and checkpoints."""

from __future__ import annotations

import contextlib
import hashlib
import io
import pickle
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError

CHECKPOINT_VERSION = 1


def conv_bn(cin, cout, stride, relu=True):
    layers = [nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False), nn.BatchNorm2d(cout)]
    if relu:
        layers.append(nn.ReLU(inplace=True))
    return layers


class TinyConv(nn.Module):
    """Three conv blocks with strides 2, 2, 1 and global average pooling.

    The last block has no trailing ReLU; its output is the raw embedding.
    """

    final_block = "block3"

    def __init__(self, embed_dim=64, widths=(32, 64)):
        super().__init__()
        w1, w2 = widths
        self.block1 = nn.Sequential(*conv_bn(3, w1, 2), *conv_bn(w1, w1, 1))
        self.block2 = nn.Sequential(*conv_bn(w1, w2, 2), *conv_bn(w2, w2, 1))
        self.block3 = nn.Sequential(*conv_bn(w2, w2, 1), *conv_bn(w2, embed_dim, 1, relu=False))
        self.embed_dim = embed_dim

    def forward(self, x):
        x = self.block3(self.block2(self.block1(x)))
        return x.mean(dim=(2, 3))


@dataclass(frozen=True)
class ArchSpec:
    build: Callable[[int], nn.Module]
    final_block: str
    input_size: Optional[int] = None


ARCHS: Dict[str, ArchSpec] = {
    "tinyconv": ArchSpec(lambda d: TinyConv(d, (32, 64)), "block3"),
    "tinyconv-small": ArchSpec(lambda d: TinyConv(d, (16, 32)), "block3"),
}


def register_arch(name: str, build: Callable[[int], nn.Module], final_block: str, input_size=None):
    ARCHS[name] = ArchSpec(build, final_block, input_size)


def get_arch(name: str) -> ArchSpec:
    try:
        return ARCHS[name]
    except KeyError:
        raise ConfigurationError(f"unknown architecture {name!r}; known: {sorted(ARCHS)}") from None


def fresh_init(module: nn.Module):
    """Fan-in scaled uniform for conv/linear weights, ones/zeros for norm affines."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, a=0.0, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)):
            if m.weight is not None:
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
            m.reset_running_stats()


class ModelBundle(nn.Module):
    """Encoder + BNNeck + bias-free classifier, with pixel normalisation."""

    def __init__(self, arch_id="tinyconv", embed_dim=64, class_count=10, pixel_mean=None, pixel_std=None):
        super().__init__()
        spec = get_arch(arch_id)
        self.arch_id = arch_id
        self.embed_dim = embed_dim
        self.class_count = class_count
        self.encoder = spec.build(embed_dim)
        self.neck = nn.BatchNorm1d(embed_dim)
        self.neck.bias.requires_grad_(False)
        self.classifier = nn.Linear(embed_dim, class_count, bias=False)
        mean = torch.zeros(3) if pixel_mean is None else torch.as_tensor(pixel_mean, dtype=torch.float32)
        std = torch.ones(3) if pixel_std is None else torch.as_tensor(pixel_std, dtype=torch.float32)
        self.register_buffer("pixel_mean", mean.reshape(1, 3, 1, 1).clone())
        self.register_buffer("pixel_std", std.reshape(1, 3, 1, 1).clone())
        self.stage = "teacher"
        self.config_hash = ""
        self.extra: dict = {}

    def normalize(self, images: torch.Tensor) -> torch.Tensor:
        return (images - self.pixel_mean) / self.pixel_std

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) images in [0, 1] -> (B, D) raw features."""
        return self.encoder(self.normalize(images))

    def head(self, raw: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        feat = self.neck(raw)
        return feat, self.classifier(feat)

    def forward_sets(self, images: torch.Tensor) -> "ForwardOutput":
        """(B, n, 3, H, W) bags -> set-level outputs (average pooled raw features)."""
        b, n = images.shape[:2]
        raw = self.encode(images.flatten(0, 1)).view(b, n, -1).mean(dim=1)
        feat, logits = self.head(raw)
        return ForwardOutput(raw, feat, logits)


@dataclass
class ForwardOutput:
    raw_feature: torch.Tensor
    inference_feature: torch.Tensor
    logits: torch.Tensor


def to_tensor(images) -> torch.Tensor:
    """(B, H, W, 3) uint8 or float array -> float (B, 3, H, W) in [0, 1]."""
    arr = np.asarray(images)
    t = torch.from_numpy(np.ascontiguousarray(arr))
    if t.dtype == torch.uint8:
        t = t.float() / 255.0
    else:
        t = t.float()
    return t.permute(0, 3, 1, 2).contiguous()


def embed_images(model: ModelBundle, images) -> torch.Tensor:
    """Raw (pre-neck) features for a batch of H x W x 3 images."""
    if isinstance(images, torch.Tensor) and images.dim() == 4 and images.shape[1] == 3:
        x = images
    else:
        arr = np.asarray(images)
        if arr.ndim != 4 or arr.shape[-1] != 3 or arr.shape[0] == 0:
            raise ValueError(f"expected a non-empty (B, H, W, 3) batch, got shape {arr.shape}")
        x = to_tensor(arr)
    size = get_arch(model.arch_id).input_size
    if size is not None and tuple(x.shape[2:]) != (size, size):
        raise ValueError(f"{model.arch_id} expects {size}x{size} inputs, got {tuple(x.shape[2:])}")
    return model.encode(x)


def aggregate_set(features) -> torch.Tensor:
    """Temporal average pooling of a list (or (n, D) stack) of features."""
    if isinstance(features, torch.Tensor):
        stacked = features
    else:
        if len(features) == 0:
            raise ValueError("cannot aggregate an empty set")
        stacked = torch.stack([torch.as_tensor(f) for f in features])
    if stacked.dim() != 2 or stacked.shape[0] == 0:
        raise ValueError("features must be a non-empty list of D-dim vectors")
    return stacked.mean(dim=0)


def head_forward(model: ModelBundle, raw: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    if raw.dim() != 2 or raw.shape[1] != model.embed_dim:
        raise ValueError(f"expected (B, {model.embed_dim}) raw features, got {tuple(raw.shape)}")
    return model.head(raw)


def build_model(arch_id, embed_dim, class_count, seed, pixel_mean=None, pixel_std=None) -> ModelBundle:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ModelBundle(arch_id, embed_dim, class_count, pixel_mean, pixel_std)
        fresh_init(model)
        nn.init.normal_(model.classifier.weight, std=0.001)
    return model


def init_student_from_teacher(teacher: ModelBundle, student_arch: str, seed: int, embed_dim=None) -> ModelBundle:
    """Copy the teacher except the encoder's final block; fresh model across archs."""
    spec = get_arch(student_arch)
    dim = teacher.embed_dim if embed_dim is None else embed_dim
    student = build_model(
        student_arch, dim, teacher.class_count, seed, teacher.pixel_mean.flatten(), teacher.pixel_std.flatten()
    )
    student.stage = "student"
    if student_arch != teacher.arch_id:
        return student
    fresh = {k: v.clone() for k, v in student.state_dict().items()}
    prefix = f"encoder.{spec.final_block}."
    state = {}
    for k, v in teacher.state_dict().items():
        keep_fresh = k.startswith(prefix) or fresh[k].shape != v.shape
        state[k] = fresh[k] if keep_fresh else v.clone()
    student.load_state_dict(state)
    return student


def state_hash(model: nn.Module, include_buffers=True) -> str:
    h = hashlib.sha256()
    items = model.state_dict().items() if include_buffers else model.named_parameters()
    for name, t in items:
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@contextlib.contextmanager
def batch_statistics(model: nn.Module):
    """Run norm layers on batch statistics without touching stored running stats."""
    norms = [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    saved = [{k: v.clone() for k, v in m.state_dict().items()} for m in norms]
    modes = [m.training for m in norms]
    try:
        for m in norms:
            m.train(True)
        yield model
    finally:
        for m, st, mode in zip(norms, saved, modes):
            m.load_state_dict(st)
            m.train(mode)


def save_checkpoint(model: ModelBundle, path, training_state: Optional[dict] = None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "arch_id": model.arch_id,
        "embed_dim": model.embed_dim,
        "class_count": model.class_count,
        "stage": model.stage,
        "config_hash": model.config_hash,
        "extra": model.extra,
        "state_dict": model.state_dict(),
        "training_state": training_state,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, with_training_state=False):
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        raise ConfigurationError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"{path} is not a checkpoint of this toolkit")
    model = ModelBundle(payload["arch_id"], payload["embed_dim"], payload["class_count"])
    model.load_state_dict(payload["state_dict"])
    model.stage = payload["stage"]
    model.config_hash = payload["config_hash"]
    model.extra = payload["extra"]
    model.eval()
    if with_training_state:
        return model, payload["training_state"]
    return model


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
