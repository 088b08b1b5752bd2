"""MLP forward/gradient correctness, training to interpolation, checkpoints."""
import numpy as np
import pytest

from marginlab import data, synth
from marginlab.model import (LinearModel, MlpModel, TrainConfig, evaluate,
                             init_model, input_gradient, load_checkpoint,
                             param_count, save_checkpoint, train)


def test_forward_matches_manual():
    m = MlpModel(W1=np.array([[1.0, -2.0], [0.5, 0.0]]),
                 b1=np.array([0.1, -0.3]),
                 W2=np.array([[1.0, 1.0], [2.0, -1.0], [0.0, 3.0]]),
                 b2=np.array([0.0, 0.5, -1.0]))
    x = np.array([1.0, 0.5])
    # hidden pre-activations: [1 - 1 + 0.1, 0.5 - 0.3] = [0.1, 0.2]
    h = np.array([0.1, 0.2])
    want = np.array([h @ [1, 1], h @ [2, -1] + 0.5, h @ [0, 3] - 1.0])
    assert np.allclose(m.forward(x), want)
    assert np.allclose(m.forward_batch(x[None, :])[0], want)


def test_relu_masks_negative_units():
    m = MlpModel(W1=np.array([[1.0]]), b1=np.array([-5.0]),
                 W2=np.array([[2.0], [1.0]]), b2=np.array([0.0, 0.0]))
    # pre-activation 1 - 5 < 0: the unit is off, logits are just b2
    assert np.allclose(m.forward(np.array([1.0])), [0.0, 0.0])


def test_pair_value_consistent_with_forward():
    m = init_model(input_dim=7, hidden_width=9, num_classes=4, seed=0)
    rng = np.random.default_rng(1)
    X = rng.normal(size=(20, 7))
    I = rng.integers(0, 4, size=20)
    J = (I + 1 + rng.integers(0, 3, size=20)) % 4
    logits = m.forward_batch(X)
    want = logits[np.arange(20), I] - logits[np.arange(20), J]
    assert np.allclose(m.pair_value(X, I, J), want)


def test_input_gradient_matches_finite_differences():
    m = init_model(input_dim=10, hidden_width=16, num_classes=3, seed=2)
    rng = np.random.default_rng(3)
    h = 1e-6
    for _ in range(5):
        x = rng.normal(size=10)
        pre = m.W1 @ x + m.b1
        if np.min(np.abs(pre)) < 1e-3:
            continue  # stay away from kinks
        g = input_gradient(m, x, 0, 2)
        fd = np.empty(10)
        for k in range(10):
            e = np.zeros(10)
            e[k] = h
            fd[k] = (m.pair_value((x + e)[None], [0], [2])[0]
                     - m.pair_value((x - e)[None], [0], [2])[0]) / (2 * h)
        assert np.linalg.norm(g - fd) <= 1e-6 * max(1.0, np.linalg.norm(fd))


def test_input_gradient_rejects_equal_classes():
    m = init_model(input_dim=3, hidden_width=4, num_classes=3, seed=0)
    with pytest.raises(ValueError, match="differ"):
        input_gradient(m, np.zeros(3), 1, 1)


def test_linear_model_protocol():
    lm = LinearModel(W=np.array([[1.0, 0.0], [0.0, 1.0]]), b=np.array([0.0, -0.5]))
    X = np.array([[2.0, 1.0], [0.0, 3.0]])
    assert np.allclose(lm.forward_batch(X), [[2.0, 0.5], [0.0, 2.5]])
    assert np.array_equal(lm.predict_batch(X), [0, 1])
    g, grad = lm.pair_value_grad(X, np.array([0, 0]), np.array([1, 1]))
    assert np.allclose(g, [1.5, -2.5])
    assert np.allclose(grad, [[1.0, -1.0], [1.0, -1.0]])


def test_param_count():
    m = init_model(input_dim=5, hidden_width=7, num_classes=3, seed=0)
    assert m.param_count == param_count(5, 7, 3) == 7 * 5 + 7 + 3 * 7 + 3


def test_init_model_deterministic_and_scaled():
    a = init_model(input_dim=100, hidden_width=50, num_classes=4, seed=9)
    b = init_model(input_dim=100, hidden_width=50, num_classes=4, seed=9)
    assert np.array_equal(a.W1, b.W1) and np.array_equal(a.W2, b.W2)
    c = init_model(input_dim=100, hidden_width=50, num_classes=4, seed=10)
    assert not np.array_equal(a.W1, c.W1)
    assert np.abs(a.W1).max() <= 1 / np.sqrt(100)
    assert np.abs(a.W2).max() <= 1 / np.sqrt(50)


@pytest.fixture(scope="module")
def blob_split():
    imgs, labels = synth.blob_points(200, seed=3, spread=0.08)
    ds = data.LabeledDataset(
        ids=np.arange(200, dtype=np.int64),
        features=imgs.reshape(200, -1).astype(np.float64) / 255.0,
        true_labels=labels, effective_labels=labels.copy(),
        corruption=np.zeros(200, dtype=np.uint8), num_classes=3)
    return data.train_validation_split(ds, 140, 50, seed=0)


def test_train_reaches_interpolation(blob_split):
    tr, va = blob_split
    m0 = init_model(tr.input_dim, 32, tr.num_classes, seed=1)
    cfg = TrainConfig(lr0=0.1, max_epochs=300, seed=1)
    m, report = train(m0, tr, va, cfg)
    assert report.interpolated
    assert report.final_train_error == 0.0
    assert evaluate(m, tr) == 0.0
    assert report.epochs_run < cfg.max_epochs  # early stop engaged
    assert len(report.train_error) == report.epochs_run
    assert len(report.val_error) == report.epochs_run


def test_train_deterministic(blob_split):
    tr, va = blob_split
    cfg = TrainConfig(lr0=0.1, max_epochs=40, target_train_error=-1.0, seed=5)
    m1, _ = train(init_model(tr.input_dim, 16, 3, seed=5), tr, va, cfg)
    m2, _ = train(init_model(tr.input_dim, 16, 3, seed=5), tr, va, cfg)
    for attr in ("W1", "b1", "W2", "b2"):
        assert np.array_equal(getattr(m1, attr), getattr(m2, attr)), attr


def test_train_validates_dimensions(blob_split):
    tr, va = blob_split
    m0 = init_model(input_dim=5, hidden_width=8, num_classes=3, seed=0)
    with pytest.raises(ValueError, match="dimensions"):
        train(m0, tr, va, TrainConfig())


def test_evaluate_uses_split_appropriate_labels(blob_split):
    tr, _ = blob_split
    spec = data.CorruptionSpec(data.CorruptionKind.LABEL, 0.3, 4)
    corrupted = data.corrupt_labels(tr, spec)
    m = init_model(tr.input_dim, 16, 3, seed=0)
    # train split scores against effective labels: corruption must move the error
    assert evaluate(m, corrupted) != evaluate(m, tr) or \
        np.array_equal(corrupted.effective_labels, tr.effective_labels)


def test_train_config_validation():
    with pytest.raises(ValueError, match="lr0"):
        TrainConfig(lr0=0.0)
    with pytest.raises(ValueError, match="lr_decay"):
        TrainConfig(lr_decay=1.5)
    cfg = TrainConfig(lr0=0.2, lr_decay=0.5, lr_decay_every=10)
    assert cfg.lr_at(0) == 0.2
    assert cfg.lr_at(9) == 0.2
    assert cfg.lr_at(10) == 0.1
    assert cfg.lr_at(25) == 0.05


def test_checkpoint_round_trip(tmp_path, blob_split):
    tr, va = blob_split
    m, _ = train(init_model(tr.input_dim, 12, 3, seed=2), tr, va,
                 TrainConfig(lr0=0.1, max_epochs=5, target_train_error=-1.0, seed=2))
    p = tmp_path / "m.ckpt"
    tag = bytes.fromhex("00112233445566778899aabbccddeeff")
    save_checkpoint(m, p, tag=tag)
    back = load_checkpoint(p, expect_tag=tag)
    for attr in ("W1", "b1", "W2", "b2"):
        assert np.array_equal(getattr(back, attr), getattr(m, attr)), attr
    assert back.seed == m.seed


def test_checkpoint_tag_mismatch(tmp_path):
    m = init_model(3, 4, 2, seed=0)
    p = tmp_path / "m.ckpt"
    save_checkpoint(m, p, tag=b"aaaa")
    with pytest.raises(ValueError, match="tag mismatch"):
        load_checkpoint(p, expect_tag=b"bbbb")
    # no expectation: loads fine
    load_checkpoint(p)


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "m.ckpt"
    p.write_bytes(b"not a checkpoint at all, padded past the header length...")
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(p)
    m = init_model(3, 4, 2, seed=0)
    save_checkpoint(m, p)
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(p)
