import math

import numpy as np
import pytest

from mvseg.config import LossConfig, TrainConfig, WindowConfig
from mvseg.embedding_loss import embedding_loss, make_partition
from mvseg.mtpnet import (
    NetworkParams,
    PredictionField,
    backward,
    export_predictions,
    forward,
    import_predictions,
    learning_rate,
    load_params,
    prediction_loss,
    save_params,
    total_loss,
    train,
)
from mvseg.scene_io import generate_synthetic_scene

from oracles import central_diff


def small_net(S=3, d=2, seed=0):
    return NetworkParams.initialize(S, d, trunk_widths=(6, 7, 8), head_width=5, rng=seed)


def test_zero_network_uniform():
    p = small_net()
    for v in p.arrays.values():
        v[...] = 0.0
    pred = forward(p, np.random.default_rng(0).normal(size=(5, 9)))
    np.testing.assert_allclose(pred.probs, 1 / 3)


def test_single_point_shapes():
    pred = forward(small_net(S=4, d=3), np.ones((1, 9)))
    assert pred.probs.shape == (1, 4)
    assert pred.embeddings.shape == (1, 3)


def test_permutation_equivariance():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(12, 9))
    perm = rng.permutation(12)
    p = NetworkParams.initialize(3, 8, rng=1)
    a, b = forward(p, x), forward(p, x[perm])
    np.testing.assert_allclose(b.probs, a.probs[perm], atol=1e-12)
    np.testing.assert_allclose(b.embeddings, a.embeddings[perm], atol=1e-12)


def test_softmax_rows():
    x = np.random.default_rng(3).normal(scale=50, size=(40, 9))
    pred = forward(NetworkParams.initialize(5, 4, rng=2), x)
    np.testing.assert_allclose(pred.probs.sum(axis=1), 1.0, atol=1e-6)


def test_loss_examples():
    cfg = LossConfig()
    pred = PredictionField(np.eye(3)[[0, 1, 2]], np.zeros((3, 2)))
    assert total_loss(pred, [0, 1, 2], [0, 0, 0], cfg) == 0.0
    pred = PredictionField(np.full((4, 13), 1 / 13), np.zeros((4, 2)))
    assert total_loss(pred, [0, 5, 7, 12], [0, 0, 0, 0], cfg) == pytest.approx(math.log(13), abs=1e-12)
    assert math.log(13) == pytest.approx(2.5649, abs=1e-4)


def test_total_is_sum_of_parts():
    rng = np.random.default_rng(4)
    pred = PredictionField(rng.dirichlet(np.ones(3), 8), rng.normal(size=(8, 2)))
    y, inst = rng.integers(0, 3, 8), rng.integers(0, 3, 8)
    cfg = LossConfig()
    parts = prediction_loss(pred, y) + embedding_loss(pred.embeddings, make_partition(pred.embeddings, inst), cfg)
    assert total_loss(pred, y, inst, cfg) == parts


def _check_grad(seed, S=2, d=2, n=8, cfg=None):
    rng = np.random.default_rng(seed)
    p = small_net(S, d, seed)
    x = rng.normal(size=(n, 9))
    y = rng.integers(0, S, n)
    inst = rng.integers(0, 3, n)
    cfg = cfg or LossConfig()
    loss, grads = backward(p, x, y, inst, cfg)

    def f():
        return total_loss(forward(p, x), y, inst, cfg)

    assert loss == pytest.approx(f(), abs=1e-12)
    for name, arr in p.arrays.items():
        num = central_diff(f, arr, 1e-5)
        np.testing.assert_allclose(grads[name], num, rtol=1e-4, atol=1e-7, err_msg=name)


@pytest.mark.parametrize("seed", range(3))
def test_backward_matches_finite_differences(seed):
    _check_grad(seed)


def test_alpha_scales_embedding_head_only():
    rng = np.random.default_rng(5)
    p = small_net()
    x, y, inst = rng.normal(size=(8, 9)), rng.integers(0, 3, 8), rng.integers(0, 3, 8)
    _, g1 = backward(p, x, y, inst, LossConfig(beta=0, gamma=0))
    _, g2 = backward(p, x, y, inst, LossConfig(alpha=2, beta=0, gamma=0))
    np.testing.assert_allclose(g2["emb1.W"], 2 * g1["emb1.W"], atol=1e-12)
    np.testing.assert_array_equal(g2["sem1.W"], g1["sem1.W"])


def test_learning_rate_schedule():
    cfg = TrainConfig(epochs=300)
    rates = [learning_rate(cfg, e) for e in range(1, 301)]
    assert set(rates[:50]) == {0.01}
    assert set(rates[50:100]) == {0.005}
    assert rates[100] == 0.0025
    assert rates[-1] == 0.01 * 0.5**5


def _two_class_scene():
    recipe = {
        "classes": ["floor", "box"],
        "primitives": [
            {"kind": "plane", "class": "floor", "center": [0.5, 0.5, 0], "size": [1, 1], "density": 120, "color": [0.5, 0.5, 0.4]},
            {"kind": "box", "class": "box", "center": [0.5, 0.5, 0], "size": [0.3, 0.3, 0.3], "density": 120, "color": [0.8, 0.2, 0.2]},
        ],
    }
    return generate_synthetic_scene(3, recipe)


def test_training_is_deterministic_and_loss_falls():
    scene = _two_class_scene()
    cfg = TrainConfig(epochs=40, batch_size=1, trunk_widths=(16, 16, 16), head_width=16, embed_dim=3)
    wcfg = WindowConfig(point_count=128)
    a = train([scene], cfg, LossConfig(), wcfg)
    b = train([scene], cfg, LossConfig(), wcfg)
    for k in a.params.arrays:
        np.testing.assert_array_equal(a.params.arrays[k], b.params.arrays[k])
    loss = np.array(a.epoch_loss)
    # 20-epoch moving average never rises
    avg = np.convolve(loss, np.ones(20) / 20, mode="valid")
    assert np.all(np.diff(avg) <= 1e-12)
    assert loss[-1] < 0.5 * loss[0]


def test_params_roundtrip(tmp_path):
    p = NetworkParams.initialize(3, 8, rng=4)
    save_params(tmp_path / "m.bin", p)
    q = load_params(tmp_path / "m.bin")
    assert (q.num_classes, q.embed_dim, q.trunk_depth) == (3, 8, 3)
    for k in p.arrays:
        np.testing.assert_array_equal(p.arrays[k], q.arrays[k])


def test_params_file_errors(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOTAMODEL" + bytes(40))
    with pytest.raises(ValueError, match="magic"):
        load_params(bad)
    save_params(tmp_path / "m.bin", small_net())
    data = (tmp_path / "m.bin").read_bytes()
    bad.write_bytes(data[:-16])
    with pytest.raises(ValueError, match="truncated"):
        load_params(bad)


def test_predictions_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    pred = PredictionField(rng.dirichlet(np.ones(3), 6), rng.normal(size=(6, 2)))
    export_predictions(tmp_path / "p.txt", pred)
    back = import_predictions(tmp_path / "p.txt", 3, 2)
    assert len(back) == 6
    np.testing.assert_array_equal(back.probs, pred.probs)


def test_predictions_validation(tmp_path):
    p = tmp_path / "p.txt"
    p.write_text("0.5 0.5 1 2\n0.4 0.4 0 0\n")
    with pytest.raises(ValueError, match="row 1"):
        import_predictions(p, 2, 2)
    p.write_text("0.5 0.5 1\n")
    with pytest.raises(ValueError, match="expected 4 columns"):
        import_predictions(p, 2, 2)


def test_forward_rejects_bad_width():
    with pytest.raises(ValueError, match="shape"):
        forward(small_net(), np.zeros((3, 8)))
