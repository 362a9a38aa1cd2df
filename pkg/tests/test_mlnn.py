"""Network-core tests with hand-computed oracles.

Forward values are recomputed here with math.exp on paper-checkable nets,
gradients are checked against central finite differences, and the checkpoint
codec is exercised against a committed fixture.
"""

import math
import os

import numpy as np
import numpy.testing as npt
import pytest

from treedoa.mlnn import (
    MlnnModel,
    TrainConfig,
    backprop_gradients,
    bce_loss,
    cce_loss,
    forward,
    load_model,
    new_model,
    predict_class,
    save_model,
    train,
    validate_layer_sizes,
)

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")


def tiny_model() -> MlnnModel:
    """2-2-2 net small enough to run by hand."""
    w1 = np.array([[1.0, -2.0], [0.5, 1.0]])
    b1 = np.array([0.25, -0.75])
    w2 = np.array([[1.0, 1.0], [-1.0, 2.0]])
    b2 = np.array([0.0, 0.5])
    return MlnnModel(weights=[w1, w2], biases=[b1, b2])


def test_forward_hand_computed():
    model = tiny_model()
    x = np.array([1.0, 2.0])
    # hidden pre-activations: [1*1 - 2*2 + 0.25, 0.5*1 + 1*2 - 0.75] = [-2.75, 1.75]
    # relu -> [0, 1.75]; output logits: [0 + 1.75 + 0, -0 + 3.5 + 0.5] = [1.75, 4.0]
    e1, e2 = math.exp(1.75 - 4.0), math.exp(0.0)
    expect = np.array([e1, e2]) / (e1 + e2)
    npt.assert_allclose(forward(model, x), expect, rtol=1e-12)


def test_forward_zero_weights_uniform():
    model = MlnnModel(
        weights=[np.zeros((4, 3)), np.zeros((5, 4))],
        biases=[np.zeros(4), np.zeros(5)],
    )
    npt.assert_allclose(forward(model, np.array([1.0, -2.0, 3.0])), np.full(5, 0.2), rtol=0, atol=0)


def test_forward_batch_matches_rows():
    model = new_model((3, 8, 4), seed=0)
    x = np.random.default_rng(1).normal(size=(6, 3))
    batch = forward(model, x)
    assert batch.shape == (6, 4)
    for i in range(6):
        # batched and row-wise matmuls may differ by an ulp in BLAS
        npt.assert_allclose(batch[i], forward(model, x[i]), rtol=1e-12)
    npt.assert_allclose(batch.sum(axis=1), 1.0, atol=1e-12)


def test_forward_rejects_wrong_input_dim():
    model = new_model((3, 8, 4), seed=0)
    with pytest.raises(ValueError):
        forward(model, np.zeros(5))


def test_softmax_shift_invariance():
    model = tiny_model()
    shifted = model.copy()
    shifted.biases[-1] = shifted.biases[-1] + 500.0  # same softmax, larger logits
    x = np.array([0.3, -1.2])
    npt.assert_allclose(forward(model, x), forward(shifted, x), atol=1e-12)


def test_predict_class_argmax_and_tie_break():
    model = tiny_model()
    assert predict_class(model, np.array([1.0, 2.0])) == 1
    zeros = MlnnModel(weights=[np.zeros((3, 2))], biases=[np.zeros(3)])
    assert predict_class(zeros, np.array([4.0, 5.0])) == 0  # exact tie -> lowest index
    batch = predict_class(model, np.array([[1.0, 2.0], [1.0, 2.0]]))
    npt.assert_array_equal(batch, [1, 1])


def test_bce_loss_frozen_values():
    p = np.array([[0.5, 0.5]])
    z = np.array([[1.0, 0.0]])
    npt.assert_allclose(bce_loss(p, z), math.log(2.0), rtol=1e-15)
    p = np.array([[0.7, 0.2, 0.1]])
    z = np.array([[1.0, 0.0, 0.0]])
    expect = -(math.log(0.7) + math.log(0.8) + math.log(0.9)) / 3.0
    npt.assert_allclose(bce_loss(p, z), expect, rtol=1e-12)


def test_cce_loss_frozen_values():
    p = np.array([[0.7, 0.2, 0.1]])
    z = np.array([[1.0, 0.0, 0.0]])
    npt.assert_allclose(cce_loss(p, z), -math.log(0.7), rtol=1e-12)
    # two samples average
    p2 = np.array([[0.7, 0.2, 0.1], [0.1, 0.8, 0.1]])
    z2 = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    npt.assert_allclose(cce_loss(p2, z2), -(math.log(0.7) + math.log(0.8)) / 2.0, rtol=1e-12)


def test_losses_clamp_extreme_probabilities():
    p = np.array([[1.0, 0.0]])
    z = np.array([[0.0, 1.0]])
    assert np.isfinite(bce_loss(p, z))
    assert np.isfinite(cce_loss(p, z))


def _fd_gradients(model, x, z, loss, h=1e-6):
    """Central-difference gradients over every parameter."""

    def loss_value():
        p = forward(model, x)
        return bce_loss(p[None, :], z[None, :]) if loss == "bce" else cce_loss(p[None, :], z[None, :])

    grads_w, grads_b = [], []
    for k in range(len(model.weights)):
        gw = np.zeros_like(model.weights[k])
        for idx in np.ndindex(*model.weights[k].shape):
            orig = model.weights[k][idx]
            model.weights[k][idx] = orig + h
            up = loss_value()
            model.weights[k][idx] = orig - h
            down = loss_value()
            model.weights[k][idx] = orig
            gw[idx] = (up - down) / (2 * h)
        gb = np.zeros_like(model.biases[k])
        for idx in np.ndindex(*model.biases[k].shape):
            orig = model.biases[k][idx]
            model.biases[k][idx] = orig + h
            up = loss_value()
            model.biases[k][idx] = orig - h
            down = loss_value()
            model.biases[k][idx] = orig
            gb[idx] = (up - down) / (2 * h)
        grads_w.append(gw)
        grads_b.append(gb)
    return grads_w, grads_b


@pytest.mark.parametrize("loss", ["bce", "cce"])
def test_backprop_matches_finite_differences(loss):
    rng = np.random.default_rng(42)
    model = new_model((6, 5, 4), seed=7)
    x = rng.normal(size=6)
    z = np.zeros(4)
    z[2] = 1.0
    gw, gb = backprop_gradients(model, x, z, loss=loss)
    fw, fb = _fd_gradients(model, x, z, loss)
    for a, b in zip(gw + gb, fw + fb):
        denom = np.maximum(np.abs(b), 1e-8)
        assert np.max(np.abs(a - b) / denom) < 1e-5


def test_backprop_zero_input_kills_first_weight_grad():
    model = new_model((4, 3, 2), seed=1)
    z = np.array([1.0, 0.0])
    gw, gb = backprop_gradients(model, np.zeros(4), z)
    npt.assert_array_equal(gw[0], np.zeros_like(gw[0]))  # grad_W1 = delta^T x = 0
    assert np.any(gb[0] != 0.0) or np.all(forward(model, np.zeros(4)) == 0.5)


def _toy_problem(n=120, seed=3):
    """Two linearly separable 2-D blobs."""
    rng = np.random.default_rng(seed)
    half = n // 2
    x = np.concatenate([rng.normal(-2.0, 0.5, (half, 2)), rng.normal(2.0, 0.5, (half, 2))])
    z = np.zeros((n, 2))
    z[:half, 0] = 1.0
    z[half:, 1] = 1.0
    return x, z


def test_train_reaches_separable_optimum():
    x, z = _toy_problem()
    cfg = TrainConfig(epochs=200, batch_size=16, seed=5, target_accuracy=1.0, min_epochs=3)
    result = train(new_model((2, 8, 2), seed=2), x, z, cfg)
    assert result.final_accuracy == 1.0
    pred = predict_class(result.model, x)
    npt.assert_array_equal(pred, z.argmax(axis=1))


def test_train_zero_learning_rate_keeps_weights():
    x, z = _toy_problem(40)
    start = new_model((2, 6, 2), seed=9)
    for opt in ("adam", "sgd"):
        cfg = TrainConfig(learning_rate=0.0, epochs=3, batch_size=8, optimizer=opt, seed=0)
        result = train(start, x, z, cfg)
        for w0, w1 in zip(start.weights, result.model.weights):
            npt.assert_array_equal(w0, w1)


def test_train_does_not_mutate_input_model():
    x, z = _toy_problem(40)
    start = new_model((2, 6, 2), seed=9)
    snapshot = start.copy()
    train(start, x, z, TrainConfig(epochs=3, batch_size=8, seed=0))
    for w0, w1 in zip(start.weights, snapshot.weights):
        npt.assert_array_equal(w0, w1)


def test_train_deterministic_per_seed():
    x, z = _toy_problem(60)
    cfg = TrainConfig(epochs=5, batch_size=8, seed=11)
    r1 = train(new_model((2, 6, 2), seed=4), x, z, cfg)
    r2 = train(new_model((2, 6, 2), seed=4), x, z, cfg)
    npt.assert_array_equal(r1.loss_history, r2.loss_history)
    for w0, w1 in zip(r1.model.weights, r2.model.weights):
        npt.assert_array_equal(w0, w1)


def test_train_shuffle_seed_changes_path():
    x, z = _toy_problem(60)
    r1 = train(new_model((2, 6, 2), seed=4), x, z, TrainConfig(epochs=5, batch_size=8, seed=1))
    r2 = train(new_model((2, 6, 2), seed=4), x, z, TrainConfig(epochs=5, batch_size=8, seed=2))
    assert not np.array_equal(r1.loss_history, r2.loss_history)


def test_train_patience_stops_on_plateau():
    x, z = _toy_problem(40)
    cfg = TrainConfig(learning_rate=0.0, epochs=50, batch_size=8, seed=0, patience=3, min_epochs=1)
    result = train(new_model((2, 6, 2), seed=1), x, z, cfg)
    # epoch 1 sets the best loss; 3 non-improving epochs exhaust the patience
    assert len(result.loss_history) == 4


def test_train_min_epochs_defers_early_stop():
    x, z = _toy_problem(40)
    cfg = TrainConfig(learning_rate=0.0, epochs=50, batch_size=8, seed=0, patience=1, min_epochs=10)
    result = train(new_model((2, 6, 2), seed=1), x, z, cfg)
    assert len(result.loss_history) >= 10


def test_train_target_accuracy_stops_early():
    x, z = _toy_problem()
    cfg = TrainConfig(epochs=500, batch_size=16, seed=5, target_accuracy=0.99, min_epochs=1)
    result = train(new_model((2, 8, 2), seed=2), x, z, cfg)
    assert len(result.loss_history) < 500
    assert result.final_accuracy >= 0.99


def test_train_raises_on_non_finite_loss():
    x, z = _toy_problem(20)
    x[3, 0] = np.nan
    with pytest.raises(RuntimeError, match="epoch"):
        train(new_model((2, 6, 2), seed=0), x, z, TrainConfig(epochs=3, batch_size=4, seed=0))


def test_train_shape_validation():
    x, z = _toy_problem(20)
    with pytest.raises(ValueError):
        train(new_model((2, 6, 2), seed=0), x, z[:10], TrainConfig())
    with pytest.raises(ValueError):
        train(new_model((3, 6, 2), seed=0), x, z, TrainConfig())


def test_validate_layer_sizes():
    assert validate_layer_sizes((4, 3, 2)) == (4, 3, 2)
    for bad in ((4,), (4, 2), (4, 0, 2), (4, 3, 1), (-1, 3, 2)):
        with pytest.raises(ValueError):
            validate_layer_sizes(bad)


def test_new_model_seeded_and_bounded():
    m1 = new_model((10, 7, 5), seed=21)
    m2 = new_model((10, 7, 5), seed=21)
    for w0, w1 in zip(m1.weights, m2.weights):
        npt.assert_array_equal(w0, w1)
    assert m1.layer_sizes == (10, 7, 5)
    for b in m1.biases:
        npt.assert_array_equal(b, np.zeros_like(b))
    # he-uniform hidden bound sqrt(6/fan_in), glorot-uniform output bound
    assert np.max(np.abs(m1.weights[0])) <= math.sqrt(6.0 / 10.0)
    assert np.max(np.abs(m1.weights[1])) <= math.sqrt(6.0 / (7.0 + 5.0))


def test_checkpoint_round_trip_bitwise(tmp_path):
    model = new_model((6, 5, 4), seed=13)
    path = tmp_path / "net.mlnn"
    save_model(model, path)
    loaded = load_model(path)
    assert loaded.layer_sizes == model.layer_sizes
    for w0, w1 in zip(model.weights + model.biases, loaded.weights + loaded.biases):
        npt.assert_array_equal(w0, w1)
    x = np.linspace(-1.0, 1.0, 6)
    npt.assert_array_equal(forward(model, x), forward(loaded, x))


def test_checkpoint_rejects_foreign_and_corrupt_files(tmp_path):
    model = new_model((3, 4, 2), seed=0)
    path = tmp_path / "net.mlnn"
    save_model(model, path)
    raw = path.read_bytes()

    (tmp_path / "foreign.mlnn").write_bytes(b"PKZZ" + raw[4:])
    with pytest.raises(ValueError, match="checkpoint"):
        load_model(tmp_path / "foreign.mlnn")

    bad_version = bytearray(raw)
    bad_version[4] = 99
    (tmp_path / "version.mlnn").write_bytes(bytes(bad_version))
    with pytest.raises(ValueError, match="version"):
        load_model(tmp_path / "version.mlnn")

    (tmp_path / "short.mlnn").write_bytes(raw[: len(raw) - 16])
    with pytest.raises(ValueError):
        load_model(tmp_path / "short.mlnn")

    (tmp_path / "trailing.mlnn").write_bytes(raw + b"\x00" * 8)
    with pytest.raises(ValueError):
        load_model(tmp_path / "trailing.mlnn")


def test_checkpoint_fixture_still_loads():
    """A committed checkpoint must keep loading with identical behavior."""
    path = os.path.join(DATA_DIR, "ref_model.mlnn")
    model = load_model(path)
    assert model.layer_sizes == (8, 6, 4)
    x = np.load(os.path.join(DATA_DIR, "ref_input.npy"))
    expect = np.load(os.path.join(DATA_DIR, "ref_output.npy"))
    npt.assert_array_equal(forward(model, x), expect)
