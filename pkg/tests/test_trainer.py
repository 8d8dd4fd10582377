import math

import numpy as np
import pytest
import torch

from handhygiene.errors import ConfigError, ExportError, LossError, ModelLoadError, TrainingError
from handhygiene.labels import SET_1
from handhygiene.model import backbone_checksum, head_checksum
from handhygiene.prep import encode_labels
from handhygiene.trainer import (
    EPSILON,
    EpochRecord,
    TrainConfig,
    TrainingHistory,
    cross_entropy,
    cross_entropy_logit_grad,
    export_curves,
    load_model,
    read_history_csv,
    save_model,
    smoothed,
    softmax,
    train,
)


def toy_features(n_per_class=12, seed=0):
    """Well separated random features: each class shifts its own block of dims."""
    rng = np.random.default_rng(seed)
    feats, labels = [], []
    for k, label in enumerate(SET_1):
        x = rng.normal(0, 0.1, (n_per_class, 2048)).astype(np.float32)
        x[:, k * 600 : (k + 1) * 600] += 1.0
        feats.append(x)
        labels += [label] * n_per_class
    return torch.from_numpy(np.concatenate(feats)), encode_labels(labels, SET_1)


# -- loss -------------------------------------------------------------------


def test_perfect_prediction_has_zero_loss():
    y = np.eye(3)
    assert cross_entropy(y, y) <= 1e-6


def test_uniform_three_class_is_ln3():
    assert cross_entropy(np.full((4, 3), 1 / 3), np.eye(3)[[0, 1, 2, 0]]) == pytest.approx(math.log(3), abs=1e-6)
    assert cross_entropy(np.full(3, 1 / 3), [0, 1, 0]) == pytest.approx(1.0986, abs=1e-4)


def test_batch_mean():
    p = np.array([[0.5, 0.25, 0.25], [0.6, 0.2, 0.2]])
    y = np.array([[1, 0, 0], [1, 0, 0]])
    assert cross_entropy(p, y) == pytest.approx((-math.log(0.5) - math.log(0.6)) / 2, abs=1e-12)

    pair = np.array([[0.0, 1.0, 0.0], [1 / 3, 1 / 3, 1 / 3]])
    assert cross_entropy(pair, np.array([[0, 1, 0], [0, 1, 0]])) == pytest.approx(0.5493, abs=1e-4)


def test_loss_bounded_by_clip():
    y = np.array([[1, 0, 0]])
    bound = -math.log(EPSILON)
    assert cross_entropy(np.array([[0.0, 0.5, 0.5]]), y) == pytest.approx(bound)
    assert cross_entropy(np.array([[0.0, 0.0, 1.0]]), y) <= bound + 1e-9


def test_shape_mismatch():
    with pytest.raises(LossError):
        cross_entropy(np.full((2, 3), 1 / 3), np.eye(2))


def test_logit_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    z = rng.normal(0, 2, (5, 4))
    y = np.eye(4)[rng.integers(0, 4, 5)]
    analytic = cross_entropy_logit_grad(z, y)
    h = 1e-6
    numeric = np.zeros_like(z)
    for idx in np.ndindex(*z.shape):
        up, down = z.copy(), z.copy()
        up[idx] += h
        down[idx] -= h
        numeric[idx] = (cross_entropy(softmax(up), y) - cross_entropy(softmax(down), y)) / (2 * h)
    rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-8)
    assert rel.max() < 1e-4


def test_logit_gradient_matches_autograd_through_head(make_model):
    model = make_model()
    feats, y = toy_features(4)
    logits = model.head_logits(feats).detach().double().requires_grad_(True)
    probs = torch.softmax(logits, dim=1)
    loss = -(torch.as_tensor(y, dtype=torch.float64) * torch.log(probs)).sum(1).mean()
    loss.backward()
    analytic = cross_entropy_logit_grad(logits.detach().numpy(), y)
    assert np.allclose(logits.grad.numpy(), analytic, rtol=1e-4, atol=1e-12)


# -- train ------------------------------------------------------------------


def test_train_records_every_epoch_and_freezes_backbone(make_model):
    model = make_model()
    feats, y = toy_features()
    bb, head = backbone_checksum(model), head_checksum(model)
    model, history = train(model, (feats, y), (feats[::3], y[::3]), TrainConfig(epochs=4, learning_rate=1e-2))
    assert [r.epoch for r in history.records] == [1, 2, 3, 4]
    assert backbone_checksum(model) == bb
    assert head_checksum(model) != head
    assert model.class_order == SET_1
    assert all(0 <= r.train_accuracy <= 1 and 0 <= r.val_accuracy <= 1 for r in history.records)


def test_train_is_deterministic(make_model):
    feats, y = toy_features()
    cfg = TrainConfig(epochs=3, seed=5)
    _, h1 = train(make_model(), (feats, y), (feats, y), cfg)
    _, h2 = train(make_model(), (feats, y), (feats, y), cfg)
    assert h1.records == h2.records


def test_train_learns_separable_features(make_model):
    feats, y = toy_features()
    _, history = train(make_model(), (feats, y), (feats, y), TrainConfig(epochs=10, learning_rate=1e-2))
    assert history.records[-1].val_accuracy == 1.0
    assert history.records[-1].train_loss < history.records[0].train_loss


def test_train_rejects_empty_sets(make_model):
    feats, y = toy_features(2)
    with pytest.raises(TrainingError):
        train(make_model(), (feats[:0], y[:0]), (feats, y), TrainConfig(epochs=1))
    with pytest.raises(TrainingError):
        train(make_model(), (feats, y), (feats[:0], y[:0]), TrainConfig(epochs=1))


def test_train_aborts_on_nan(make_model):
    feats, y = toy_features(2)
    feats[0, 0] = float("nan")
    with pytest.raises(TrainingError, match="epoch 1, step 0"):
        train(make_model(), (feats, y), (feats, y), TrainConfig(epochs=2))


def test_train_requires_frozen_backbone(make_model):
    model = make_model()
    for p in model.backbone.parameters():
        p.requires_grad_(True)
    feats, y = toy_features(2)
    with pytest.raises(TrainingError, match="frozen"):
        train(model, (feats, y), (feats, y), TrainConfig(epochs=1))


def test_class_count_mismatch(make_model):
    feats, y = toy_features(2)
    with pytest.raises(TrainingError):
        train(make_model(num_classes=4), (feats, y), (feats, y), TrainConfig(epochs=1))


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="rmsprop")


# -- artifact ---------------------------------------------------------------


@pytest.fixture
def trained(make_model):
    feats, y = toy_features(4)
    model, history = train(make_model(), (feats, y), (feats, y), TrainConfig(epochs=2))
    return model, history


def test_save_load_round_trip(trained, tmp_path, random_batch):
    model, history = trained
    path = save_model(model, history, tmp_path / "model.pt")
    loaded, h2 = load_model(path)
    assert head_checksum(loaded) == head_checksum(model)
    assert backbone_checksum(loaded) == backbone_checksum(model)
    assert loaded.class_order == SET_1
    assert loaded.preprocess == model.preprocess
    assert h2.records == history.records and h2.config == history.config
    x = torch.from_numpy(random_batch(2)).permute(0, 3, 1, 2)
    with torch.no_grad():
        assert torch.equal(model(x), loaded(x))


def test_save_is_byte_stable(trained, tmp_path):
    model, history = trained
    a = save_model(model, history, tmp_path / "a.pt").read_bytes()
    b = save_model(model, history, tmp_path / "b.pt").read_bytes()
    assert a == b


def test_truncated_artifact(trained, tmp_path):
    model, history = trained
    path = save_model(model, history, tmp_path / "model.pt")
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(ModelLoadError):
        load_model(path)


def test_missing_artifact(tmp_path):
    with pytest.raises(ModelLoadError):
        load_model(tmp_path / "nope.pt")


def test_foreign_artifact(tmp_path):
    torch.save({"format": "something-else"}, tmp_path / "x.pt")
    with pytest.raises(ModelLoadError):
        load_model(tmp_path / "x.pt")


def test_backbone_weights_swapped(trained, tmp_path, weights):
    model, history = trained
    path = save_model(model, history, tmp_path / "model.pt")
    other = tmp_path / "other.pt"
    other.write_bytes(weights[0].read_bytes() + b"\0")
    with pytest.raises(ModelLoadError):
        load_model(path, weights_path=other)


# -- history export ---------------------------------------------------------


def make_history(n):
    rng = np.random.default_rng(n)
    records = [EpochRecord(i + 1, *(float(v) for v in rng.random(4))) for i in range(n)]
    return TrainingHistory(records, TrainConfig(epochs=max(n, 1)))


@pytest.mark.parametrize("n", [1, 25, 50])
def test_export_curves(tmp_path, n):
    history = make_history(n)
    png, csv_path = export_curves(history, tmp_path)
    assert png.stat().st_size > 0 and png.read_bytes()[:4] == b"\x89PNG"
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "epoch,train_loss,train_accuracy,val_loss,val_accuracy"
    assert len(lines) == n + 1
    back = read_history_csv(csv_path)
    for a, b in zip(back, history.records):
        assert a.epoch == b.epoch
        for f in ("train_loss", "train_accuracy", "val_loss", "val_accuracy"):
            assert abs(getattr(a, f) - getattr(b, f)) <= 1e-9


def test_export_empty_history(tmp_path):
    with pytest.raises(ExportError):
        export_curves(TrainingHistory([], TrainConfig()), tmp_path)


def test_export_csv_is_byte_stable(tmp_path):
    h = make_history(5)
    _, a = export_curves(h, tmp_path / "a")
    _, b = export_curves(h, tmp_path / "b")
    assert a.read_bytes() == b.read_bytes()


def test_smoothed():
    assert smoothed([3, 1, 2, 6], window=3).tolist() == pytest.approx([3, 2, 2, 3])
    assert smoothed([1.0, 2.0], window=1).tolist() == [1.0, 2.0]
