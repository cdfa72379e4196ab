from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vkd.datamodel import BagMode, Sample, SetBag, make_dataset
from vkd.errors import ConfigurationError
from vkd.sampling import (
    PKSampler,
    SamplerConfig,
    check_pk,
    equally_spaced_frames,
    make_rng,
    pk_batches,
    sample_view_bag,
    subsample_bag,
    warning_counts,
)


def spaced_oracle(L, n):
    if n == 1:
        return [0]
    out = []
    for i in range(n):
        x = Fraction(i * (L - 1), n - 1)
        fl = x.numerator // x.denominator
        out.append(fl + 1 if x - fl >= Fraction(1, 2) else fl)
    return out


def dataset(ids, tracklets=2, frames=3, cameras=2):
    samples = []
    for i in range(ids):
        for t in range(tracklets):
            tid = i * tracklets + t
            samples += [Sample(f"{tid}-{f}", i, t % cameras, tid, f) for f in range(frames)]
    return make_dataset(samples, "train")


def pool(cams_frames, identity=0):
    members, tid = [], 0
    for cam, n in cams_frames.items():
        members += [Sample(f"{cam}-{k}", identity, cam, tid, k) for k in range(n)]
        tid += 1
    return SetBag(tuple(members), identity, BagMode.VIEWS)


@pytest.mark.parametrize("L,n,expected", [
    (15, 8, [0, 2, 4, 6, 8, 10, 12, 14]),
    (8, 8, list(range(8))),
    (3, 8, [0, 0, 1, 1, 1, 1, 2, 2]),
    (5, 1, [0]),
])
def test_equally_spaced_examples(L, n, expected):
    assert equally_spaced_frames(L, n) == expected
    assert spaced_oracle(L, n) == expected


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 60), st.integers(1, 20))
def test_equally_spaced_properties(L, n):
    idx = equally_spaced_frames(L, n)
    assert idx == spaced_oracle(L, n)
    assert len(idx) == n and idx[0] == 0
    assert all(0 <= a <= b <= L - 1 for a, b in zip(idx, idx[1:] + [L - 1]))


@pytest.mark.parametrize("L,n", [(0, 3), (3, 0)])
def test_equally_spaced_rejects(L, n):
    with pytest.raises(ValueError):
        equally_spaced_frames(L, n)


def test_pk_small_example():
    cfg = SamplerConfig(P=2, K=2, seed=0)
    batches = pk_batches(dataset(8), cfg, 0)
    assert len(batches) == 4
    for b in batches:
        assert len(b.bags) == 4 and check_pk(b, 2, 2)
        assert all(bag.identity == lab for bag, lab in zip(b.bags, b.labels))


def test_pk_too_few_ids():
    with pytest.raises(ConfigurationError):
        pk_batches(dataset(1), SamplerConfig(P=2, K=2), 0)


def test_pk_needs_pairs_for_triplet():
    with pytest.raises(ConfigurationError):
        pk_batches(dataset(4), SamplerConfig(P=2, K=1), 0)
    assert len(pk_batches(dataset(4), SamplerConfig(P=2, K=1), 0, require_pairs=False)) == 2


def test_pk_deterministic():
    cfg = SamplerConfig(P=2, K=2, seed=3)
    a, b = pk_batches(dataset(6), cfg, 0), pk_batches(dataset(6), cfg, 0)
    assert [x.bags for x in a] == [x.bags for x in b]
    c = pk_batches(dataset(6), cfg, 1)
    assert [x.bags for x in a] != [x.bags for x in c]


@settings(max_examples=40, deadline=None)
@given(
    ids=st.integers(2, 12), tracklets=st.integers(1, 4), frames=st.integers(1, 5),
    P=st.integers(2, 6), K=st.integers(2, 5), seed=st.integers(0, 1000),
    source=st.sampled_from(["tracklet", "views", "distill-tracklet"]),
)
def test_pk_invariant_property(ids, tracklets, frames, P, K, seed, source):
    if ids < P:
        return
    cfg = SamplerConfig(P=P, K=K, N=4, M=2, frames_per_bag=3, seed=seed)
    ds = dataset(ids, tracklets, frames)
    batches = pk_batches(ds, cfg, epoch=seed % 5, source=source)
    covered = set()
    for b in batches:
        assert check_pk(b, P, K)
        covered.update(b.labels)
    # every identity is visited once per epoch
    assert covered == set(ds.identities)


def test_teacher_bags_use_distinct_tracklets_when_possible():
    ds = dataset(4, tracklets=4, frames=8)
    for b in pk_batches(ds, SamplerConfig(P=2, K=4, frames_per_bag=8), 0):
        for i in set(b.labels):
            tids = [bag.members[0].tracklet for bag, lab in zip(b.bags, b.labels) if lab == i]
            assert len(set(tids)) == 4


def test_view_bag_three_cameras():
    bag = sample_view_bag(pool({1: 5, 2: 5, 3: 5}), 8, make_rng(0, 0))
    assert sorted(Counter(bag.cameras).values()) == [2, 3, 3]
    assert len(set(bag.members)) == 8


def test_view_bag_single_camera_warns():
    before = warning_counts["single_camera_bags"]
    bag = sample_view_bag(pool({4: 3}), 4, make_rng(0, 0))
    assert set(bag.cameras) == {4} and len(bag) == 4
    assert warning_counts["single_camera_bags"] == before + 1


def test_view_bag_one_member():
    bag = sample_view_bag(pool({0: 2, 1: 2}), 1, make_rng(1, 0))
    assert len(bag) == 1


@settings(max_examples=100, deadline=None)
@given(st.dictionaries(st.integers(0, 9), st.integers(1, 6), min_size=1, max_size=6),
       st.integers(1, 16), st.integers(0, 10_000))
def test_view_bag_balance(cams, N, seed):
    bag = sample_view_bag(pool(cams), N, make_rng(seed, 0))
    counts = Counter(bag.cameras)
    assert len(bag) == N
    if len(cams) <= N:
        assert set(counts) == set(cams)
        assert all(N // len(cams) <= v <= -(-N // len(cams)) for v in counts.values())
    # no repeats inside a camera until it runs out
    for cam, v in counts.items():
        distinct = len({s for s in bag.members if s.camera == cam})
        assert distinct == min(v, cams[cam])


def test_subsample_examples():
    bag = pool({0: 4, 1: 4})
    rng = make_rng(0, 0)
    assert set(subsample_bag(bag, 8, rng).members) == set(bag.members)
    two = subsample_bag(bag, 2, rng)
    assert len(set(two.members)) == 2 and set(two.members) <= set(bag.members)
    assert two.identity == bag.identity
    for bad in (0, 9):
        with pytest.raises(ValueError):
            subsample_bag(bag, bad, rng)


def test_subsample_is_subset_over_many_draws():
    bag = pool({0: 3, 1: 3, 2: 2})
    rng = np.random.default_rng(0)
    seen = Counter()
    for _ in range(10_000):
        sub = subsample_bag(bag, 2, rng)
        assert len(set(sub.members)) == 2 and set(sub.members) <= set(bag.members)
        seen.update(sub.members)
    # uniform: each member lands in about 2/8 of the draws
    assert all(abs(v / 10_000 - 0.25) < 0.03 for v in seen.values())


@pytest.mark.parametrize("kw", [dict(P=1), dict(K=0), dict(frames_per_bag=0), dict(M=8, N=8), dict(M=0)])
def test_sampler_config_validation(kw):
    with pytest.raises(ConfigurationError):
        SamplerConfig(**kw)


def test_sampler_length():
    assert len(PKSampler(dataset(9), SamplerConfig(P=4, K=2))) == 3
