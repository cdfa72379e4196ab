"""Cross-camera ranking evaluation for the I2I, I2V and V2V protocols."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch

from .datamodel import Dataset, ImageStore, ReidData
from .errors import ConfigurationError, EmptyDatasetError
from .losses import Metric
from .model import ModelBundle, load_checkpoint, to_tensor
from .sampling import equally_spaced_frames


class Protocol(str, enum.Enum):
    I2I = "I2I"
    I2V = "I2V"
    V2V = "V2V"

    @classmethod
    def parse(cls, value):
        return cls(str(value.value if isinstance(value, cls) else value).upper())


class Exclusion(str, enum.Enum):
    # drop gallery entries sharing both identity and camera with the query
    STANDARD = "standard"
    # drop every gallery entry from the query's camera
    ALL_SAME_CAMERA = "all-same-camera"


@dataclass
class FeatureTable:
    entity_ids: np.ndarray
    identities: np.ndarray
    cameras: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        n = len(self.entity_ids)
        if not (len(self.identities) == len(self.cameras) == len(self.features) == n):
            raise ValueError("feature table columns differ in length")
        if len(np.unique(self.entity_ids)) != n:
            raise ValueError("entity ids must be unique")
        if not np.isfinite(self.features).all():
            raise ValueError("features must be finite")

    def __len__(self):
        return len(self.entity_ids)

    def take(self, idx) -> "FeatureTable":
        return FeatureTable(self.entity_ids[idx], self.identities[idx], self.cameras[idx], self.features[idx])


@dataclass
class RankedQuery:
    entity_id: int
    gallery_ids: np.ndarray
    relevant: np.ndarray


@dataclass
class Ranking:
    queries: List[RankedQuery]
    dropped: int


@dataclass
class EvalReport:
    protocol: str
    cmc: Dict[int, float]
    mAP: float
    num_queries: int
    exclusion_rule: str
    dropped: int = 0
    gallery_frames: Optional[int] = None
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        out = {
            "protocol": self.protocol,
            "exclusion_rule": self.exclusion_rule,
            "cmc1": round(self.cmc.get(1, float("nan")), 6),
            "cmc5": round(self.cmc.get(5, float("nan")), 6),
            "cmc10": round(self.cmc.get(10, float("nan")), 6),
            "mAP": round(self.mAP, 6),
            "num_queries": self.num_queries,
            "dropped": self.dropped,
        }
        if self.gallery_frames is not None:
            out["gallery_frames"] = self.gallery_frames
        return out

    def to_text(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"


@torch.no_grad()
def embed_groups(model: ModelBundle, store: ImageStore, groups: Sequence[Sequence], chunk=512) -> np.ndarray:
    """Average-pooled post-neck features of each sample group."""
    flat = [s for g in groups for s in g]
    model.eval()
    raw = []
    for i in range(0, len(flat), chunk):
        raw.append(model.encode(to_tensor(store.get(flat[i:i + chunk]))))
    raw = torch.cat(raw)
    sizes = torch.as_tensor([len(g) for g in groups])
    owner = torch.repeat_interleave(torch.arange(len(groups)), sizes)
    pooled = torch.zeros(len(groups), raw.shape[1]).index_add_(0, owner, raw) / sizes[:, None]
    feat, _ = model.head(pooled)
    return feat.double().numpy()


def extract_features(
    model: Union[ModelBundle, str],
    dataset: Dataset,
    side: str,
    protocol,
    gallery_frames: Union[int, str, None] = "all",
    store: Optional[ImageStore] = None,
) -> FeatureTable:
    """One row per tracklet: first frame for image sides, pooled frames for video sides."""
    if not isinstance(model, ModelBundle):
        model = load_checkpoint(model)
    if not dataset.samples:
        raise EmptyDatasetError(f"{side} split is empty")
    protocol = Protocol.parse(protocol)
    if side not in ("query", "gallery"):
        raise ValueError(f"side must be 'query' or 'gallery', got {side!r}")
    image_side = protocol == Protocol.I2I or (protocol == Protocol.I2V and side == "query")
    store = store or ImageStore.from_dataset(dataset)
    tracklets = dataset.tracklets()
    groups = []
    for frames in tracklets.values():
        if image_side:
            groups.append(frames[:1])
        elif side == "gallery" and gallery_frames not in (None, "all"):
            groups.append([frames[i] for i in equally_spaced_frames(len(frames), int(gallery_frames))])
        else:
            groups.append(frames)
    feats = embed_groups(model, store, groups)
    first = [g[0] for g in groups]
    return FeatureTable(
        np.array(list(tracklets), dtype=np.int64),
        np.array([s.identity for s in first], dtype=np.int64),
        np.array([s.camera for s in first], dtype=np.int64),
        feats,
    )


def distance_matrix(a: np.ndarray, b: np.ndarray, metric=Metric.EUCLIDEAN) -> np.ndarray:
    metric = Metric(metric)
    if metric == Metric.EUCLIDEAN:
        return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    an = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    bn = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    return np.clip(1.0 - an @ bn.T, 0.0, None)


def exclusion_mask(query: FeatureTable, gallery: FeatureTable, rule) -> np.ndarray:
    """(Q, G) boolean mask of gallery entries kept for each query."""
    try:
        rule = Exclusion(rule)
    except ValueError:
        raise ConfigurationError(f"unknown exclusion rule {rule!r}") from None
    same_cam = query.cameras[:, None] == gallery.cameras[None, :]
    if rule == Exclusion.ALL_SAME_CAMERA:
        return ~same_cam
    same_id = query.identities[:, None] == gallery.identities[None, :]
    return ~(same_cam & same_id)


def rank_queries(query: FeatureTable, gallery: FeatureTable, metric=Metric.EUCLIDEAN, exclusion_rule=Exclusion.STANDARD) -> Ranking:
    """Sort the kept gallery by distance (ties by entity id) for every query."""
    if len(gallery) == 0:
        raise ValueError("gallery is empty")
    keep = exclusion_mask(query, gallery, exclusion_rule)
    dist = distance_matrix(query.features, gallery.features, metric)
    ranked, dropped = [], 0
    for q in range(len(query)):
        cols = np.flatnonzero(keep[q])
        order = cols[np.lexsort((gallery.entity_ids[cols], dist[q, cols]))]
        rel = gallery.identities[order] == query.identities[q]
        if not rel.any():
            dropped += 1
            continue
        ranked.append(RankedQuery(int(query.entity_ids[q]), gallery.entity_ids[order], rel))
    return Ranking(ranked, dropped)


def average_precision(relevant: Sequence[bool]) -> float:
    rel = np.asarray(relevant, dtype=bool)
    if not rel.any():
        raise ValueError("average precision is undefined without a relevant item")
    hits = np.flatnonzero(rel)
    precision = np.arange(1, len(hits) + 1) / (hits + 1)
    return float(precision.mean())


def cmc_curve(first_ranks: Sequence[int], max_rank: int) -> Dict[int, float]:
    ranks = np.asarray(first_ranks, dtype=np.int64)
    if len(ranks) and ranks.min() < 1:
        raise ValueError("ranks are 1-based")
    if len(ranks) == 0:
        return {k: 0.0 for k in range(1, max_rank + 1)}
    return {k: float((ranks <= k).mean()) for k in range(1, max_rank + 1)}


def evaluate_features(
    query: FeatureTable,
    gallery: FeatureTable,
    protocol="I2V",
    metric=Metric.EUCLIDEAN,
    exclusion_rule=Exclusion.STANDARD,
    max_rank: int = 10,
) -> EvalReport:
    ranking = rank_queries(query, gallery, metric, exclusion_rule)
    aps = [average_precision(r.relevant) for r in ranking.queries]
    firsts = [int(np.argmax(r.relevant)) + 1 for r in ranking.queries]
    return EvalReport(
        protocol=Protocol.parse(protocol).value,
        cmc=cmc_curve(firsts, max_rank),
        mAP=float(np.mean(aps)) if aps else 0.0,
        num_queries=len(ranking.queries),
        exclusion_rule=Exclusion(exclusion_rule).value,
        dropped=ranking.dropped,
    )


def evaluate_protocol(
    model: Union[ModelBundle, str],
    data: ReidData,
    protocol="I2V",
    exclusion_rule=Exclusion.STANDARD,
    metric=Metric.EUCLIDEAN,
    gallery_frames: Union[int, str, None] = "all",
    max_rank: int = 10,
    stores: Optional[dict] = None,
) -> EvalReport:
    if not isinstance(model, ModelBundle):
        model = load_checkpoint(model)
    stores = stores or {}
    q = extract_features(model, data.query, "query", protocol, store=stores.get("query"))
    g = extract_features(model, data.gallery, "gallery", protocol, gallery_frames, store=stores.get("gallery"))
    report = evaluate_features(q, g, protocol, metric, exclusion_rule, max_rank)
    if gallery_frames not in (None, "all"):
        report.gallery_frames = int(gallery_frames)
    return report


def gallery_size_sweep(model, data: ReidData, sizes: Sequence[int], exclusion_rule=Exclusion.STANDARD, stores=None) -> List[dict]:
    """I2V metrics with each gallery tracklet cut to ``size`` equally spaced frames."""
    rows = []
    for size in sizes:
        if size < 1:
            raise ValueError("gallery sizes must be >= 1")
        rep = evaluate_protocol(model, data, "I2V", exclusion_rule, gallery_frames=size, stores=stores)
        rows.append({"size": int(size), "cmc1": rep.cmc[1], "mAP": rep.mAP})
    return rows


def load_stores(data: ReidData) -> dict:
    return {
        "train": ImageStore.from_dataset(data.train),
        "query": ImageStore.from_dataset(data.query),
        "gallery": ImageStore.from_dataset(data.gallery),
    }
