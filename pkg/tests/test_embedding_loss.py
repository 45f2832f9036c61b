import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvseg.config import LossConfig
from mvseg.embedding_loss import (
    embedding_loss,
    embedding_loss_and_grad,
    make_partition,
    pull_loss,
    push_loss,
    reg_loss,
)

from oracles import central_diff


def test_pull_hand_value():
    emb = np.array([[-1.0], [1.0]])
    assert pull_loss(emb, make_partition(emb, [0, 0]), 0.5) == pytest.approx(0.25, abs=1e-12)


def test_pull_inactive_inside_margin_and_at_boundary():
    emb = np.array([[0.3, 0.0], [-0.3, 0.0]])
    assert pull_loss(emb, make_partition(emb, [0, 0]), 0.5) == 0.0
    emb = np.array([[0.5, 0.0], [-0.5, 0.0]])
    assert pull_loss(emb, make_partition(emb, [0, 0]), 0.5) == 0.0


def test_push_hand_value():
    assert push_loss(np.array([[0.0, 0.0], [1.0, 0.0]]), 1.5) == pytest.approx(4.0, abs=1e-12)


def test_push_trivial():
    assert push_loss(np.array([[1.0, 2.0]]), 1.5) == 0.0
    assert push_loss(np.array([[0.0], [3.0], [6.5]]), 1.5) == 0.0


def test_reg_hand_values():
    assert reg_loss(np.array([[3.0, 4.0], [0.0, 0.0]])) == pytest.approx(2.5, abs=1e-12)
    assert reg_loss(np.zeros((3, 2))) == 0.0
    assert reg_loss(np.array([[0.0, 1.0]])) == 1.0


def test_default_weights():
    cfg = LossConfig()
    assert (cfg.alpha, cfg.beta, cfg.gamma, cfg.delta_d) == (1.0, 1.0, 0.001, 1.5)
    assert cfg.delta_d > 2 * cfg.delta_v


def test_zero_configuration_zero_gradient():
    emb = np.zeros((4, 2))
    loss, grad = embedding_loss_and_grad(emb, make_partition(emb, [0, 0, 0, 0]), LossConfig())
    assert loss == 0.0
    assert np.all(grad == 0.0)


def test_loss_matches_components():
    rng = np.random.default_rng(0)
    emb = rng.normal(size=(10, 2))
    part = make_partition(emb, rng.integers(0, 3, 10))
    cfg = LossConfig(alpha=0.7, beta=1.3, gamma=0.2)
    loss, _ = embedding_loss_and_grad(emb, part, cfg)
    assert loss == pytest.approx(embedding_loss(emb, part, cfg), abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    emb = rng.normal(scale=1.5, size=(10, 2))
    labels = np.arange(10) % 3
    cfg = LossConfig(gamma=0.05)

    def f():
        return embedding_loss(emb, make_partition(emb, labels), cfg)

    _, grad = embedding_loss_and_grad(emb, make_partition(emb, labels), cfg)
    num = central_diff(f, emb, 1e-6)
    np.testing.assert_allclose(grad, num, rtol=1e-5, atol=1e-7)


def test_separation_when_hinges_vanish():
    # zero-loss configuration: members within delta_v, centroids beyond 2 delta_d
    cfg = LossConfig()
    rng = np.random.default_rng(1)
    centers = np.array([[0.0, 0.0], [3.5, 0.0], [0.0, 3.5]])
    labels = np.repeat(np.arange(3), 6)
    # symmetric +/- offsets keep every centroid exactly on its center
    half = rng.normal(size=(9, 2))
    half *= rng.uniform(0, 0.49, (9, 1)) / np.linalg.norm(half, axis=1, keepdims=True)
    offsets = np.stack([half, -half], axis=1).reshape(18, 2)
    emb = centers[labels] + offsets
    part = make_partition(emb, labels)
    assert pull_loss(emb, part, cfg.delta_v) == 0.0
    assert push_loss(part.centroids, cfg.delta_d) == 0.0
    d = np.linalg.norm(emb[:, None, :] - part.centroids[None], axis=2)
    assert np.all(d.argmin(axis=1) == part.assignment)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), shift=st.floats(-5, 5), n=st.integers(2, 12))
def test_translation_and_nonnegativity(seed, shift, n):
    rng = np.random.default_rng(seed)
    emb = rng.normal(size=(n, 3))
    labels = rng.integers(0, 3, n)
    part = make_partition(emb, labels)
    moved = emb + shift
    part2 = make_partition(moved, labels)
    assert pull_loss(moved, part2, 0.5) == pytest.approx(pull_loss(emb, part, 0.5), abs=1e-9)
    assert push_loss(part2.centroids, 1.5) == pytest.approx(push_loss(part.centroids, 1.5), abs=1e-9)
    for v in (pull_loss(emb, part, 0.5), push_loss(part.centroids, 1.5), reg_loss(part.centroids)):
        assert v >= 0.0


def test_empty_partition_rejected():
    with pytest.raises(ValueError):
        make_partition(np.zeros((0, 2)), [])
