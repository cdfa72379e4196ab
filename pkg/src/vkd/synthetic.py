"""Deterministic synthetic re-identification dataset.

Each image is a textured foreground shape on a camera-specific background:

* identity -> shape, hue and stripe phase of the foreground;
* camera -> background colour, stripe orientation and a global colour gain;
* (tracklet, frame, seed) -> translation, scale, brightness and pixel noise.

Splits follow a fixed rule per identity: one tracklet from a seeded camera
goes to query, then one remaining tracklet per camera goes to gallery, and
whatever is left goes to train. With two tracklets per (identity, camera)
the query camera is therefore never seen in training for that identity.
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .datamodel import SPLIT_FILES, Sample, Split, make_dataset, write_manifest

GOLDEN = 0.6180339887498949
SHAPES = ("disk", "square", "diamond", "ring")


@dataclass(frozen=True)
class SynthConfig:
    num_identities: int = 30
    num_cameras: int = 4
    tracklets_per_id_camera: int = 2
    frames_per_tracklet: int = 6
    image_size: int = 32
    seed: int = 0
    noise: float = 0.06
    camera_gain: float = 0.25

    def __post_init__(self):
        for name in ("num_identities", "num_cameras", "tracklets_per_id_camera", "frames_per_tracklet"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")


def _hsv(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v), dtype=np.float64)


def identity_appearance(identity: int) -> dict:
    return {
        "shape": SHAPES[identity % len(SHAPES)],
        "color": _hsv(identity * GOLDEN, 0.75, 0.9),
        "stripe_color": _hsv(identity * GOLDEN + 0.5, 0.6, 0.5),
        "stripe_phase": (identity // len(SHAPES)) * 0.9,
        "stripe_freq": 0.35 + 0.15 * (identity % 3),
    }


def camera_appearance(camera: int) -> dict:
    rng = np.random.default_rng([7919, camera])
    return {
        "color": _hsv(camera * 0.29 + 0.1, 0.55, 0.35 + 0.4 * rng.random()),
        "texture_color": _hsv(camera * 0.29 + 0.6, 0.5, 0.8),
        "angle": camera * math.pi / 3.7,
        "freq": 0.5 + 0.25 * (camera % 3),
        "gain": rng.uniform(-1.0, 1.0, size=3),
    }


def tracklet_tid(identity, camera, t, cfg: SynthConfig) -> int:
    return (identity * cfg.num_cameras + camera) * cfg.tracklets_per_id_camera + t


def render(identity: int, camera: int, tracklet: int, frame: int, cfg: SynthConfig) -> np.ndarray:
    """Render one frame as a float image in [0, 1], shape (S, S, 3)."""
    size = cfg.image_size
    fg, bg = identity_appearance(identity), camera_appearance(camera)
    trk = np.random.default_rng([cfg.seed, tracklet])
    rng = np.random.default_rng([cfg.seed, tracklet, frame])

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    u = xx * math.cos(bg["angle"]) + yy * math.sin(bg["angle"])
    wave = 0.5 + 0.5 * np.sin(bg["freq"] * u * 32.0 / size)
    img = bg["color"] * (1 - 0.6 * wave[..., None]) + bg["texture_color"] * (0.6 * wave[..., None])

    scale = trk.uniform(0.85, 1.1) * rng.uniform(0.95, 1.05)
    cx = size / 2 + trk.uniform(-1.5, 1.5) + rng.uniform(-1.5, 1.5)
    cy = size / 2 + trk.uniform(-1.5, 1.5) + rng.uniform(-1.5, 1.5)
    r = 0.3 * size * scale
    dx, dy = (xx - cx) / r, (yy - cy) / r
    shape = fg["shape"]
    if shape == "disk":
        mask = dx**2 + dy**2 <= 1.0
    elif shape == "square":
        mask = np.maximum(np.abs(dx), np.abs(dy)) <= 0.8
    elif shape == "diamond":
        mask = np.abs(dx) + np.abs(dy) <= 1.1
    else:
        rad = dx**2 + dy**2
        mask = (rad <= 1.0) & (rad >= 0.3)
    stripes = np.sin(fg["stripe_freq"] * (yy - cy) * 32.0 / size * 1.6 + fg["stripe_phase"]) > 0.3
    body = np.where(stripes[..., None], fg["stripe_color"], fg["color"])
    img = np.where(mask[..., None], body, img)

    img = img * (1.0 + cfg.camera_gain * bg["gain"])
    img = img * rng.uniform(0.85, 1.15)
    img = img + rng.normal(0.0, cfg.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(img * 255.0).astype(np.uint8)


def split_tracklets(cfg: SynthConfig):
    """Return {split: [(identity, camera, tracklet_id), ...]} under the fixed rule."""
    rng = np.random.default_rng([cfg.seed, 104729])
    out = {Split.TRAIN: [], Split.QUERY: [], Split.GALLERY: []}
    for i in range(cfg.num_identities):
        remaining = {
            c: [tracklet_tid(i, c, t, cfg) for t in rng.permutation(cfg.tracklets_per_id_camera)]
            for c in range(cfg.num_cameras)
        }
        qcam = int(rng.integers(cfg.num_cameras))
        out[Split.QUERY].append((i, qcam, remaining[qcam].pop(0)))
        for c in range(cfg.num_cameras):
            if remaining[c]:
                out[Split.GALLERY].append((i, c, remaining[c].pop(0)))
        for c in range(cfg.num_cameras):
            out[Split.TRAIN].extend((i, c, t) for t in sorted(remaining[c]))
    return out


def generate_synthetic(cfg: SynthConfig, out_dir) -> dict:
    """Write images and the three split manifests; return {split: Dataset or None}.

    A split with no tracklets (e.g. train with one tracklet per camera) gets a
    header-only manifest and maps to None.
    """
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    header = "synthetic " + " ".join(f"{k}={v}" for k, v in asdict(cfg).items())
    result = {}
    for split, entries in split_tracklets(cfg).items():
        samples = []
        for identity, camera, tid in entries:
            for f in range(cfg.frames_per_tracklet):
                name = f"id{identity:04d}_c{camera:02d}_t{tid:05d}_f{f:03d}.png"
                path = img_dir / name
                Image.fromarray(to_uint8(render(identity, camera, tid, f, cfg))).save(path, format="PNG")
                samples.append(Sample(str(path), identity, camera, tid, f))
        write_manifest(out_dir / SPLIT_FILES[split.value], samples, header=f"{header} split={split.value}")
        result[split.value] = make_dataset(samples, split, root=out_dir) if samples else None
    return result
