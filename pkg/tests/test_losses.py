import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import finite_difference_error, gradient_instances, kd_oracle, triplet_oracle
from vkd.errors import BatchCompositionError, ConfigurationError, NumericError
from vkd.losses import (
    LossConfig,
    LossInputs,
    batch_hard_triplet_loss,
    cross_entropy_loss,
    distance_preservation_loss,
    knowledge_distillation_loss,
    pairwise_distance_matrix,
    vkd_objective,
)


@pytest.fixture(autouse=True)
def float64_default():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


def t(x):
    return torch.tensor(x, dtype=torch.float64)


# --- pairwise distances -----------------------------------------------------

def test_distance_1d():
    d = pairwise_distance_matrix(t([[0.0], [3.0]]))
    assert d.tolist() == [[0.0, 3.0], [3.0, 0.0]]


def test_distance_345():
    d = pairwise_distance_matrix(t([[0.0, 0.0], [3.0, 4.0]]))
    assert d[0, 1].item() == 5.0 and d[1, 0].item() == 5.0


def test_distance_identical_rows():
    d = pairwise_distance_matrix(t([[1.0, 2.0]] * 3))
    assert torch.count_nonzero(d) == 0


def test_distance_nan():
    with pytest.raises(NumericError):
        pairwise_distance_matrix(t([[0.0], [float("nan")]]))


def test_cosine_distance():
    d = pairwise_distance_matrix(t([[1.0, 0.0], [0.0, 2.0], [-1.0, 0.0]]), "cosine")
    assert d[0, 1].item() == pytest.approx(1.0)
    assert d[0, 2].item() == pytest.approx(2.0)
    assert torch.equal(d, d.t())


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 10_000))
def test_distance_symmetric_zero_diag(b, dim, seed):
    x = torch.from_numpy(np.random.default_rng(seed).normal(size=(b, dim)))
    d = pairwise_distance_matrix(x)
    assert torch.equal(d, d.t())
    assert torch.all(torch.diagonal(d) == 0)


# --- cross-entropy ------------------------------------------------------------

def test_ce_perfect():
    assert cross_entropy_loss(t([[1000.0, 0.0, 0.0]]), [0]).item() == pytest.approx(0.0, abs=1e-12)


def test_ce_uniform_four():
    assert cross_entropy_loss(torch.zeros(3, 4), [0, 1, 3]).item() == pytest.approx(math.log(4), abs=1e-12)


def test_ce_two_class():
    # oracle: -log(e^2 / (e^2 + 1)) = log(1 + e^-2)
    assert cross_entropy_loss(t([[2.0, 0.0]]), [0]).item() == pytest.approx(0.126928, abs=1e-6)
    assert math.log1p(math.exp(-2)) == pytest.approx(0.126928, abs=1e-6)


def test_ce_label_range():
    with pytest.raises(ValueError):
        cross_entropy_loss(torch.zeros(1, 3), [3])


# --- batch-hard triplet ------------------------------------------------------

def test_triplet_fixture():
    emb, labels = [[0.0], [0.1], [1.0], [1.1]], [0, 0, 1, 1]
    # softplus(-0.9) = 0.341154 and softplus(-0.8) = 0.371101, two anchors each
    expected = triplet_oracle(emb, labels)
    assert expected == pytest.approx(0.356127, abs=1e-6)
    assert batch_hard_triplet_loss(t(emb), labels).item() == pytest.approx(expected, abs=1e-5)


def test_triplet_symmetric_gives_ln2():
    # unit square: each anchor's positive and nearest negative are both at distance 1
    emb = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]
    labels = [0, 0, 1, 1]
    assert batch_hard_triplet_loss(t(emb), labels).item() == pytest.approx(math.log(2), abs=1e-12)


def test_triplet_matches_enumeration_on_random_batches():
    rng = np.random.default_rng(0)
    for _ in range(100):
        ids = int(rng.integers(2, 4))
        k = int(rng.integers(2, 4))
        labels = list(np.repeat(np.arange(ids), k))
        emb = rng.normal(size=(len(labels), int(rng.integers(1, 5))))
        got = batch_hard_triplet_loss(torch.from_numpy(emb), labels).item()
        assert got == pytest.approx(triplet_oracle(emb.tolist(), labels), rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("labels", [[0, 0, 1], [0, 0, 0, 0]])
def test_triplet_bad_batch(labels):
    with pytest.raises(BatchCompositionError):
        batch_hard_triplet_loss(torch.zeros(len(labels), 2), labels)


# --- knowledge distillation --------------------------------------------------

def test_kd_identical():
    h = t([[0.3, -1.0, 2.0]])
    assert knowledge_distillation_loss(h, h.clone(), 10.0).item() == pytest.approx(0.0, abs=1e-12)


def test_kd_tau_one():
    got = knowledge_distillation_loss(t([[1.0, 0.0]]), t([[0.0, 1.0]]), 1.0).item()
    assert kd_oracle([[1.0, 0.0]], [[0.0, 1.0]], 1.0) == pytest.approx(0.462117, abs=1e-6)
    assert got == pytest.approx(0.462117, abs=1e-5)


def test_kd_tau_ten():
    got = knowledge_distillation_loss(t([[1.0, 0.0]]), t([[0.0, 1.0]]), 10.0).item()
    assert kd_oracle([[1.0, 0.0]], [[0.0, 1.0]], 10.0) == pytest.approx(0.499583, abs=1e-6)
    assert got == pytest.approx(0.499583, abs=1e-4)


def test_kd_shape_mismatch():
    with pytest.raises(ValueError):
        knowledge_distillation_loss(torch.zeros(2, 3), torch.zeros(2, 4))


def test_kd_teacher_gets_no_gradient():
    ht = t([[1.0, 0.0]]).requires_grad_()
    hs = t([[0.0, 1.0]]).requires_grad_()
    knowledge_distillation_loss(ht, hs, 2.0).backward()
    assert ht.grad is None
    assert hs.grad is not None


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_kd_shift_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    ht, hs = (torch.from_numpy(rng.normal(size=(3, 4))) for _ in range(2))
    a = knowledge_distillation_loss(ht, hs, 10.0)
    b = knowledge_distillation_loss(ht + shift, hs - shift, 10.0)
    assert a.item() == pytest.approx(b.item(), abs=1e-8)


# --- distance preservation ---------------------------------------------------

def test_dp_perfect_mirror():
    x = t([[0.0, 1.0], [2.0, 3.0], [5.0, -1.0]])
    assert distance_preservation_loss(x, x.clone()).item() == 0.0


def test_dp_fixture_is_nine():
    # teacher pair distances 1, 2, 2; a collapsed student gives 1 + 4 + 4
    teacher = t([[0.0, 0.0], [1.0, 0.0], [0.5, math.sqrt(4 - 0.25)]])
    d = pairwise_distance_matrix(teacher)
    assert sorted([d[0, 1].item(), d[0, 2].item(), d[1, 2].item()]) == pytest.approx([1.0, 2.0, 2.0])
    student = torch.zeros(3, 4)
    assert distance_preservation_loss(teacher, student).item() == pytest.approx(9.0, abs=1e-12)


def test_dp_different_dims():
    rng = np.random.default_rng(1)
    loss = distance_preservation_loss(torch.from_numpy(rng.normal(size=(5, 8))), torch.from_numpy(rng.normal(size=(5, 4))))
    assert torch.isfinite(loss)


def test_dp_needs_two():
    with pytest.raises(ValueError):
        distance_preservation_loss(torch.zeros(1, 2), torch.zeros(1, 2))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_dp_rotation_invariance(seed):
    rng = np.random.default_rng(seed)
    teacher = torch.from_numpy(rng.normal(size=(5, 3)))
    student = torch.from_numpy(rng.normal(size=(5, 3)))
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    rotated = student @ torch.from_numpy(q)
    a = distance_preservation_loss(teacher, student).item()
    b = distance_preservation_loss(teacher, rotated).item()
    assert a == pytest.approx(b, rel=1e-9)


# --- composition -------------------------------------------------------------

def _parts(rng, b=6, c=3, d=4):
    labels = torch.tensor([0, 0, 1, 1, 2, 2])[:b]
    return LossInputs(
        logits=torch.from_numpy(rng.normal(size=(b, c))),
        labels=labels,
        triplet_features=torch.from_numpy(rng.normal(size=(b, d))),
        teacher_logits=torch.from_numpy(rng.normal(size=(b, c))),
        teacher_features=torch.from_numpy(rng.normal(size=(b, d))),
        student_features=torch.from_numpy(rng.normal(size=(b, d))),
    )


def test_objective_alpha_beta_zero():
    parts = _parts(np.random.default_rng(0))
    total, br = vkd_objective(parts, LossConfig(alpha=0.0, beta=0.0))
    ce = cross_entropy_loss(parts.logits, parts.labels)
    tr = batch_hard_triplet_loss(parts.triplet_features, parts.labels)
    assert total.item() == (ce + tr).item()
    assert br["kd"] > 0 and br["dp"] > 0


def test_objective_kd_dp_only():
    parts = _parts(np.random.default_rng(1))
    cfg = LossConfig(enable_ce=False, enable_tr=False)
    total, br = vkd_objective(parts, cfg)
    assert br["ce"] == 0.0 and br["tr"] == 0.0
    assert total.item() == pytest.approx(cfg.alpha * br["kd"] + cfg.beta * br["dp"], rel=1e-12)


def test_objective_zero_inputs():
    parts = LossInputs(
        teacher_logits=torch.zeros(4, 3), logits=torch.zeros(4, 3),
        teacher_features=torch.zeros(4, 2), student_features=torch.zeros(4, 2),
    )
    total, _ = vkd_objective(parts, LossConfig(enable_ce=False, enable_tr=False))
    assert total.item() == 0.0


def test_objective_all_disabled():
    with pytest.raises(ConfigurationError):
        LossConfig(enable_ce=False, enable_tr=False, enable_kd=False, enable_dp=False)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_losses_non_negative(seed):
    parts = _parts(np.random.default_rng(seed))
    _, br = vkd_objective(parts, LossConfig())
    assert all(br[k] >= 0 for k in ("ce", "tr", "kd", "dp"))


@pytest.mark.parametrize("kind", ["ce", "tr", "kd", "dp"])
def test_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(11)
    for _ in range(20):
        fn, inputs = gradient_instances(kind, rng)
        assert finite_difference_error(fn, inputs) < 1e-3
