"""Camera-bias probe and identity block structure of distance matrices."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .datamodel import BagMode, Dataset, ImageStore, group_sets
from .evaluation import FeatureTable, embed_groups
from .losses import Metric, pairwise_distance_matrix
from .model import ModelBundle, load_checkpoint
from .sampling import make_rng, sample_view_bag, tracklet_frames


@dataclass
class ProbeReport:
    accuracy: float
    prior_accuracy: float
    num_cameras: int
    epochs_trained: int

    def to_text(self) -> str:
        return json.dumps({k: (round(v, 6) if isinstance(v, float) else v) for k, v in asdict(self).items()},
                          indent=2, sort_keys=True) + "\n"


@dataclass
class BlockReport:
    matrix: np.ndarray
    identities: np.ndarray
    intra_mean: float
    inter_mean: float
    ratio: float

    def summary(self) -> dict:
        return {"intra_mean": round(self.intra_mean, 6), "inter_mean": round(self.inter_mean, 6),
                "ratio": round(self.ratio, 6), "size": int(len(self.matrix))}


def prior_classifier_accuracy(camera_histogram) -> float:
    """Expected accuracy of guessing cameras by sampling their empirical prior."""
    counts = np.asarray(list(camera_histogram.values()) if isinstance(camera_histogram, dict) else camera_histogram,
                        dtype=np.float64)
    if counts.size == 0 or counts.sum() <= 0:
        raise ValueError("camera histogram is empty")
    p = counts / counts.sum()
    return float((p**2).sum())


def fit_camera_probe(features: FeatureTable, epochs=300, lr=1e-3, halve_every=50, batch_size=64, seed=0) -> ProbeReport:
    """Linear camera classifier on frozen features, scored on its own training rows.

    Adam with the learning rate halved every ``halve_every`` epochs. Scoring
    on the fitting set mirrors the protocol being reproduced; it measures
    how much camera information is linearly decodable, not generalisation.
    """
    cams = np.unique(features.cameras)
    if len(cams) < 2:
        raise ValueError("the camera probe needs at least two cameras")
    x = torch.as_tensor(features.features, dtype=torch.float32).detach()
    y = torch.as_tensor(np.searchsorted(cams, features.cameras), dtype=torch.long)
    gen = torch.Generator().manual_seed(seed)
    probe = torch.nn.Linear(x.shape[1], len(cams))
    with torch.no_grad():
        bound = 1.0 / np.sqrt(x.shape[1])
        probe.weight.uniform_(-bound, bound, generator=gen)
        probe.bias.uniform_(-bound, bound, generator=gen)
    opt = torch.optim.Adam(probe.parameters(), lr=lr)
    rng = make_rng(seed, 0, 7)
    for epoch in range(epochs):
        for g in opt.param_groups:
            g["lr"] = lr * 0.5 ** (epoch // halve_every)
        perm = torch.from_numpy(rng.permutation(len(x)))
        for i in range(0, len(x), batch_size):
            idx = perm[i:i + batch_size]
            loss = F.cross_entropy(probe(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    with torch.no_grad():
        acc = float((probe(x).argmax(1) == y).float().mean())
    _, counts = np.unique(features.cameras, return_counts=True)
    return ProbeReport(acc, prior_classifier_accuracy(counts), len(cams), epochs)


def block_statistics(matrix: np.ndarray, identities: Sequence[int]):
    ids = np.asarray(identities)
    same = ids[:, None] == ids[None, :]
    off = ~np.eye(len(ids), dtype=bool)
    intra = matrix[same & off]
    inter = matrix[~same]
    if intra.size == 0 or inter.size == 0:
        raise ValueError("need at least two identities with two bags each")
    intra_mean, inter_mean = float(intra.mean()), float(inter.mean())
    ratio = intra_mean / inter_mean if inter_mean > 0 else float("inf")
    return intra_mean, inter_mean, ratio


def block_report_from_features(features: np.ndarray, identities, metric=Metric.EUCLIDEAN) -> BlockReport:
    ids = np.asarray(identities)
    order = np.argsort(ids, kind="stable")
    feats, ids = np.asarray(features)[order], ids[order]
    mat = pairwise_distance_matrix(torch.as_tensor(feats, dtype=torch.float64), metric).numpy()
    intra, inter, ratio = block_statistics(mat, ids)
    return BlockReport(mat, ids, intra, inter, ratio)


def distance_block_report(
    model,
    dataset: Dataset,
    mode="tracklet",
    ids: int = 8,
    bags_per_id: int = 4,
    bag_size: int = 8,
    seed: int = 0,
    store=None,
) -> BlockReport:
    """Pairwise distances of set embeddings for the first ``ids`` identities.

    ``tracklet`` bags are distinct tracklets (equally spaced frames);
    ``views`` bags are drawn across cameras with the view sampler.
    """
    if not isinstance(model, ModelBundle):
        model = load_checkpoint(model)
    mode = BagMode(mode)
    chosen = dataset.identities[:ids]
    if len(chosen) < ids or ids < 2:
        raise ValueError(f"need at least {max(ids, 2)} identities, dataset has {len(dataset.identities)}")
    rng = make_rng(seed, 0, 11)
    groups, labels = [], []
    if mode == BagMode.TRACKLET:
        by_id = {}
        for bag in group_sets(dataset, BagMode.TRACKLET):
            by_id.setdefault(bag.identity, []).append(bag)
        for i in chosen:
            bags = by_id.get(i, [])
            if len(bags) < bags_per_id:
                raise ValueError(f"identity {i} has {len(bags)} tracklets, need {bags_per_id}")
            for bag in bags[:bags_per_id]:
                groups.append(tracklet_frames(bag, bag_size).members)
                labels.append(i)
    else:
        pools = {b.identity: b for b in group_sets(dataset, BagMode.VIEWS)}
        for i in chosen:
            for _ in range(bags_per_id):
                groups.append(sample_view_bag(pools[i], bag_size, rng).members)
                labels.append(i)
    if bags_per_id < 2:
        raise ValueError("bags_per_id must be >= 2")
    store = store or ImageStore.from_dataset(dataset)
    feats = embed_groups(model, store, groups)
    return block_report_from_features(feats, labels)


def write_block_report(report: BlockReport, out_prefix) -> list:
    """Write the matrix as text, a heatmap PNG and a JSON summary."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_prefix = Path(out_prefix)
    grid = out_prefix.with_suffix(".txt")
    png = out_prefix.with_suffix(".png")
    js = out_prefix.with_suffix(".json")
    np.savetxt(grid, report.matrix, fmt="%.6f")
    fig, ax = plt.subplots(figsize=(4, 4), dpi=100)
    ax.imshow(report.matrix, cmap="viridis")
    ax.set_xticks([])
    ax.set_yticks([])
    ax.set_title(f"intra/inter = {report.ratio:.3f}")
    fig.savefig(png, metadata={"Software": None})
    plt.close(fig)
    js.write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return [grid, png, js]
