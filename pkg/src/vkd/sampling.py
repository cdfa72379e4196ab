"""Batch composition and frame selection.

All randomness comes from ``numpy.random.Generator`` objects derived from
``(seed, epoch, stream)`` so that every epoch can be regenerated on its own,
which is what makes resumed training identical to an uninterrupted run.
"""

from __future__ import annotations

import enum
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from .datamodel import BagMode, Dataset, SetBag, group_sets
from .errors import ConfigurationError

log = logging.getLogger(__name__)

# incremented whenever a view bag is drawn for a single-camera identity
warning_counts: Counter = Counter()


class DistillSource(str, enum.Enum):
    VIEWS = "views"
    TRACKLET = "tracklet"


@dataclass(frozen=True)
class SamplerConfig:
    P: int = 8
    K: int = 4
    frames_per_bag: int = 8
    N: int = 8
    M: int = 2
    seed: int = 0
    distill_source: DistillSource = DistillSource.VIEWS

    def __post_init__(self):
        object.__setattr__(self, "distill_source", DistillSource(self.distill_source))
        if self.P < 2:
            raise ConfigurationError("P must be >= 2")
        if self.K < 1:
            raise ConfigurationError("K must be >= 1")
        if self.frames_per_bag < 1:
            raise ConfigurationError("frames_per_bag must be >= 1")
        if not 1 <= self.M < self.N:
            raise ConfigurationError(f"need 1 <= M < N, got M={self.M}, N={self.N}")


@dataclass(frozen=True)
class BatchSpec:
    bags: List[SetBag]
    labels: List[int]

    def __post_init__(self):
        if len(self.bags) != len(self.labels):
            raise ValueError("bags and labels must align")


def make_rng(seed: int, epoch: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, stream])


def equally_spaced_frames(tracklet_length: int, n: int) -> List[int]:
    """Indices ``round(i * (L - 1) / (n - 1))`` with halves rounded up."""
    if tracklet_length < 1 or n < 1:
        raise ValueError("tracklet_length and n must be >= 1")
    if n == 1:
        return [0]
    # integer arithmetic keeps the half-up rule exact
    span, den = tracklet_length - 1, n - 1
    return [(2 * i * span + den) // (2 * den) for i in range(n)]


def tracklet_frames(bag: SetBag, n: int) -> SetBag:
    """Select n equally spaced frames of a tracklet bag."""
    idx = equally_spaced_frames(len(bag.members), n)
    return SetBag(tuple(bag.members[i] for i in idx), bag.identity, BagMode.TRACKLET)


def sample_view_bag(identity_pool: SetBag, N: int, rng: np.random.Generator) -> SetBag:
    """Draw N members round-robin over the identity's cameras.

    The camera order is shuffled per draw. Within a camera, frames are taken
    without replacement until the camera runs out, then with replacement.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    by_cam: Dict[int, List] = defaultdict(list)
    for s in identity_pool.members:
        by_cam[s.camera].append(s)
    cams = sorted(by_cam)
    if len(cams) == 1:
        warning_counts["single_camera_bags"] += 1
        log.debug("identity %d has a single camera; view bag degrades to one camera", identity_pool.identity)
    order = [cams[i] for i in rng.permutation(len(cams))]
    queues = {c: [by_cam[c][i] for i in rng.permutation(len(by_cam[c]))] for c in cams}
    members = []
    for k in range(N):
        cam = order[k % len(order)]
        pool = by_cam[cam]
        if queues[cam]:
            members.append(queues[cam].pop())
        else:
            members.append(pool[int(rng.integers(len(pool)))])
    return SetBag(tuple(members), identity_pool.identity, BagMode.VIEWS)


def subsample_bag(bag: SetBag, M: int, rng: np.random.Generator) -> SetBag:
    """Uniformly pick M members without replacement, keeping their bag order."""
    if not 1 <= M <= len(bag.members):
        raise ValueError(f"M must be in [1, {len(bag.members)}], got {M}")
    idx = np.sort(rng.choice(len(bag.members), size=M, replace=False))
    return SetBag(tuple(bag.members[i] for i in idx), bag.identity, bag.mode)


class PKSampler:
    """Epoch-wise P x K batches over a dataset.

    ``source`` selects what one batch item is: ``tracklet`` gives a tracklet
    bag of ``frames_per_bag`` equally spaced frames (teacher training);
    ``views`` gives an N-member view bag; ``distill-tracklet`` gives N equally
    spaced frames of a random tracklet of the identity.
    """

    def __init__(self, dataset: Dataset, cfg: SamplerConfig, source="tracklet", require_pairs=True):
        self.cfg = cfg
        self.source = source
        tracklets = group_sets(dataset, BagMode.TRACKLET)
        self.tracklets_by_id: Dict[int, List[SetBag]] = defaultdict(list)
        for bag in tracklets:
            self.tracklets_by_id[bag.identity].append(bag)
        self.views_by_id = {b.identity: b for b in group_sets(dataset, BagMode.VIEWS)}
        self.identities = sorted(self.tracklets_by_id)
        if len(self.identities) < cfg.P:
            raise ConfigurationError(
                f"dataset has {len(self.identities)} identities, fewer than P={cfg.P}"
            )
        if require_pairs and cfg.K < 2:
            raise ConfigurationError("triplet loss needs K >= 2 samples per identity")

    def __len__(self):
        return -(-len(self.identities) // self.cfg.P)

    def _item(self, identity: int, rng: np.random.Generator) -> SetBag:
        cfg = self.cfg
        if self.source == "views":
            return sample_view_bag(self.views_by_id[identity], cfg.N, rng)
        bags = self.tracklets_by_id[identity]
        bag = bags[int(rng.integers(len(bags)))]
        n = cfg.frames_per_bag if self.source == "tracklet" else cfg.N
        return tracklet_frames(bag, n)

    def _pick_tracklets(self, identity: int, rng: np.random.Generator) -> List[SetBag]:
        bags = self.tracklets_by_id[identity]
        K = self.cfg.K
        if len(bags) >= K:
            idx = rng.choice(len(bags), size=K, replace=False)
        else:
            idx = rng.choice(len(bags), size=K, replace=True)
        return [tracklet_frames(bags[i], self.cfg.frames_per_bag) for i in idx]

    def epoch(self, epoch: int) -> List[BatchSpec]:
        cfg = self.cfg
        rng = make_rng(cfg.seed, epoch, 1)
        ids = np.asarray(self.identities)
        perm = ids[rng.permutation(len(ids))]
        batches = []
        for start in range(0, len(perm), cfg.P):
            chosen = list(perm[start:start + cfg.P])
            if len(chosen) < cfg.P:
                rest = np.setdiff1d(ids, chosen)
                chosen += list(rng.choice(rest, size=cfg.P - len(chosen), replace=False))
            bags, labels = [], []
            for identity in chosen:
                identity = int(identity)
                if self.source == "tracklet":
                    items = self._pick_tracklets(identity, rng)
                else:
                    items = [self._item(identity, rng) for _ in range(cfg.K)]
                bags.extend(items)
                labels.extend([identity] * cfg.K)
            batches.append(BatchSpec(bags, labels))
        return batches


def pk_batches(dataset: Dataset, cfg: SamplerConfig, epoch: int, source="tracklet", require_pairs=True) -> List[BatchSpec]:
    return PKSampler(dataset, cfg, source, require_pairs).epoch(epoch)


def check_pk(batch: BatchSpec, P: int, K: int) -> bool:
    counts = Counter(batch.labels)
    return len(counts) == P and all(v == K for v in counts.values())


def student_subsets(bags: Sequence[SetBag], M: int, rng: np.random.Generator) -> List[SetBag]:
    return [subsample_bag(b, M, rng) for b in bags]

