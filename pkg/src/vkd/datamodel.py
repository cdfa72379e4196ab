"""Dataset records, manifest I/O and set grouping.

A manifest is a UTF-8 text file with one record per line::

    path=images/a.png identity=3 camera=1 tracklet=12 frame=0

Blank lines and lines starting with ``#`` are ignored. Relative paths are
resolved against the manifest's directory. A dataset root holds three
manifests: ``train.manifest``, ``query.manifest`` and ``gallery.manifest``.
"""

from __future__ import annotations

import enum
import os
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import EmptyDatasetError, IntegrityError, ManifestFormatError

FIELDS = ("path", "identity", "camera", "tracklet", "frame")
INT_FIELDS = FIELDS[1:]
SPLIT_FILES = {"train": "train.manifest", "query": "query.manifest", "gallery": "gallery.manifest"}


class Split(str, enum.Enum):
    TRAIN = "train"
    QUERY = "query"
    GALLERY = "gallery"


class BagMode(str, enum.Enum):
    TRACKLET = "tracklet"
    VIEWS = "views"


@dataclass(frozen=True)
class Sample:
    path: str
    identity: int
    camera: int
    tracklet: int
    frame: int


@dataclass(frozen=True)
class SetBag:
    """An ordered group of samples of one identity, treated as one entity."""

    members: Tuple[Sample, ...]
    identity: int
    mode: BagMode

    def __post_init__(self):
        if not self.members:
            raise ValueError("a set bag needs at least one member")
        if any(s.identity != self.identity for s in self.members):
            raise ValueError("all members of a bag must share its identity")
        if self.mode == BagMode.TRACKLET and len({s.tracklet for s in self.members}) != 1:
            raise ValueError("a tracklet bag must draw from a single tracklet")

    def __len__(self):
        return len(self.members)

    @property
    def cameras(self):
        return [s.camera for s in self.members]


@dataclass(frozen=True)
class Dataset:
    samples: Tuple[Sample, ...]
    split: Split
    class_count: int
    # dense label -> original identity; empty for query/gallery splits,
    # which keep original identities.
    id_map: Tuple[int, ...] = ()
    root: str = ""

    def __len__(self):
        return len(self.samples)

    @property
    def identities(self) -> List[int]:
        return sorted({s.identity for s in self.samples})

    @property
    def cameras(self) -> List[int]:
        return sorted({s.camera for s in self.samples})

    def tracklets(self) -> Dict[int, List[Sample]]:
        """Tracklet id -> samples ordered by frame index."""
        out: Dict[int, List[Sample]] = defaultdict(list)
        for s in self.samples:
            out[s.tracklet].append(s)
        return {t: sorted(v, key=lambda s: s.frame) for t, v in sorted(out.items())}


@dataclass(frozen=True)
class ReidData:
    train: Dataset
    query: Dataset
    gallery: Dataset


def _parse_line(text: str, lineno: int) -> Dict[str, str]:
    record = {}
    for token in text.split():
        key, sep, value = token.partition("=")
        if not sep or not value:
            raise ManifestFormatError(f"malformed token {token!r}", lineno)
        if key not in FIELDS:
            raise ManifestFormatError(f"unknown field {key!r}", lineno)
        if key in record:
            raise ManifestFormatError(f"repeated field {key!r}", lineno)
        record[key] = value
    missing = [f for f in FIELDS if f not in record]
    if missing:
        raise ManifestFormatError(f"missing field(s) {', '.join(missing)}", lineno)
    return record


def parse_manifest(path) -> List[Sample]:
    path = Path(path)
    base = path.parent
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            rec = _parse_line(text, lineno)
            values = {}
            for key in INT_FIELDS:
                try:
                    values[key] = int(rec[key])
                except ValueError:
                    raise ManifestFormatError(f"field {key!r} is not an integer", lineno) from None
                if values[key] < 0:
                    raise ManifestFormatError(f"field {key!r} must be non-negative", lineno)
            img = rec["path"]
            if not os.path.isabs(img):
                img = str(base / img)
            samples.append(Sample(path=img, **values))
    return samples


def validate_samples(samples: Sequence[Sample]) -> None:
    seen = set()
    owner: Dict[int, Tuple[int, int]] = {}
    for s in samples:
        key = (s.tracklet, s.frame)
        if key in seen:
            raise IntegrityError(f"duplicate (tracklet={s.tracklet}, frame={s.frame})")
        seen.add(key)
        who = (s.identity, s.camera)
        if owner.setdefault(s.tracklet, who) != who:
            raise IntegrityError(f"tracklet {s.tracklet} mixes identities or cameras")


def make_dataset(samples: Sequence[Sample], split, root="") -> Dataset:
    split = Split(split)
    samples = list(samples)
    if not samples:
        raise EmptyDatasetError(f"{split.value} split has no samples")
    validate_samples(samples)
    ids = sorted({s.identity for s in samples})
    if split == Split.TRAIN:
        dense = {orig: i for i, orig in enumerate(ids)}
        samples = [
            Sample(s.path, dense[s.identity], s.camera, s.tracklet, s.frame) for s in samples
        ]
        id_map = tuple(ids)
    else:
        id_map = ()
    return Dataset(tuple(samples), split, len(ids), id_map, str(root))


def load_manifest(path, split) -> Dataset:
    path = Path(path)
    return make_dataset(parse_manifest(path), split, root=path.parent)


def write_manifest(path, samples: Sequence[Sample], header=None) -> None:
    path = Path(path)
    base = path.parent
    lines = []
    if header:
        lines.append(f"# {header}")
    for s in samples:
        p = Path(s.path)
        rel = os.path.relpath(p, base) if p.is_absolute() else s.path
        lines.append(
            f"path={Path(rel).as_posix()} identity={s.identity} camera={s.camera} "
            f"tracklet={s.tracklet} frame={s.frame}"
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset_root(root) -> ReidData:
    root = Path(root)
    train = load_manifest(root / SPLIT_FILES["train"], Split.TRAIN)
    query = load_manifest(root / SPLIT_FILES["query"], Split.QUERY)
    gallery = load_manifest(root / SPLIT_FILES["gallery"], Split.GALLERY)
    missing = set(query.identities) - set(gallery.identities)
    if missing:
        raise IntegrityError(f"query identities absent from gallery: {sorted(missing)[:10]}")
    return ReidData(train, query, gallery)


def group_sets(dataset: Dataset, mode) -> List[SetBag]:
    """Group samples into tracklet bags (frame order) or per-identity view bags.

    View bags list members camera by camera, then by tracklet and frame, so
    the sampler can walk cameras round-robin.
    """
    mode = BagMode(mode)
    if not dataset.samples:
        raise EmptyDatasetError("cannot group an empty dataset")
    if mode == BagMode.TRACKLET:
        return [
            SetBag(tuple(members), members[0].identity, mode)
            for members in dataset.tracklets().values()
        ]
    by_id: Dict[int, List[Sample]] = defaultdict(list)
    for s in dataset.samples:
        by_id[s.identity].append(s)
    return [
        SetBag(tuple(sorted(v, key=lambda s: (s.camera, s.tracklet, s.frame))), i, mode)
        for i, v in sorted(by_id.items())
    ]


@dataclass
class ImageStore:
    """All images of a dataset decoded once into an (n, H, W, 3) uint8 array."""

    pixels: np.ndarray
    index: Dict[Sample, int] = field(repr=False)

    @classmethod
    def from_dataset(cls, dataset: Dataset) -> "ImageStore":
        arrays = [read_image(s.path) for s in dataset.samples]
        shapes = {a.shape for a in arrays}
        if len(shapes) != 1:
            raise ValueError(f"images have mixed shapes: {sorted(shapes)}")
        return cls(np.stack(arrays), {s: i for i, s in enumerate(dataset.samples)})

    def rows(self, samples: Sequence[Sample]) -> np.ndarray:
        return np.fromiter((self.index[s] for s in samples), dtype=np.int64, count=len(samples))

    def get(self, samples: Sequence[Sample]) -> np.ndarray:
        return self.pixels[self.rows(samples)]


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)
