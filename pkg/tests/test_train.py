import dataclasses
import json

import numpy as np
import pytest

from crowdflow import data
from crowdflow import tensor as T
from crowdflow.evaluation import euclidean_loss, mean_loss
from crowdflow.spn import Variant
from crowdflow.tensor import Tensor
from crowdflow.train import AdamState, TrainConfig, adam_step, load_checkpoint, save_checkpoint, train


def test_euclidean_loss_examples(rng):
    x = rng.normal(size=(2, 2, 3, 3))
    assert euclidean_loss(Tensor(x), x).item() == 0.0
    assert euclidean_loss(Tensor(x + 1.0), x).item() == pytest.approx(1.0, abs=1e-15)
    assert euclidean_loss(Tensor([0.0, 0.0]), np.array([1.0, 3.0])).item() == 5.0
    with pytest.raises(ValueError):
        euclidean_loss(Tensor(np.zeros(3)), np.zeros(4))


def test_adam_single_step_hand_oracle():
    p = T.parameter([1.0, -2.0, 0.5])
    g = np.array([0.3, -4.0, 1e-3])
    p.grad = g.copy()
    state = AdamState.create([p], lr=0.01)
    adam_step([p], state)
    # m = 0.1 g, v = 0.001 g^2, bias-corrected back to g and g^2
    m_hat = (0.1 * g) / (1 - 0.9)
    v_hat = (0.001 * g**2) / (1 - 0.999)
    np.testing.assert_allclose(p.data, np.array([1.0, -2.0, 0.5]) - 0.01 * m_hat / (np.sqrt(v_hat) + 1e-8), rtol=1e-14)
    assert state.step == 1
    np.testing.assert_allclose(state.m[0], 0.1 * g)


def test_adam_two_steps_match_recurrence():
    p = T.parameter([0.0])
    state = AdamState.create([p], lr=0.1, beta1=0.5, beta2=0.75, eps=0.0)
    for g in (2.0, -1.0):
        p.grad = np.array([g])
        adam_step([p], state)
    m = 0.5 * (0.5 * 2.0) + 0.5 * -1.0
    v = 0.75 * (0.25 * 4.0) + 0.25 * 1.0
    step2 = 0.1 * (m / (1 - 0.25)) / np.sqrt(v / (1 - 0.5625))
    assert p.data[0] == pytest.approx(-0.1 - step2, rel=1e-14)


def test_adam_zero_gradient_keeps_params():
    p = T.parameter([1.0, 2.0])
    p.zero_grad()
    state = AdamState.create([p])
    adam_step([p], state)
    np.testing.assert_array_equal(p.data, [1.0, 2.0])
    assert state.step == 1


def test_adam_missing_gradient():
    p = T.parameter([1.0])
    with pytest.raises(RuntimeError):
        adam_step([p], AdamState.create([p]))


def test_adam_lr_scale_per_tensor():
    a, b = T.parameter([0.0]), T.parameter([0.0])
    a.grad, b.grad = np.array([1.0]), np.array([1.0])
    state = AdamState.create([a, b], lr=0.1)
    state.lr_scale = [1.0, 0.01]
    adam_step([a, b], state)
    assert b.data[0] == pytest.approx(0.01 * a.data[0], rel=1e-12)


def test_train_is_deterministic(tmp_path, tiny_dataset, tiny_train_config):
    p1, r1 = train(tiny_dataset, tiny_train_config, Variant.SPN, 3, out_dir=tmp_path / "a")
    p2, r2 = train(tiny_dataset, tiny_train_config, Variant.SPN, 3, out_dir=tmp_path / "b")
    assert r1 == r2
    for x, y in zip(p1.tensors(), p2.tensors()):
        assert x.data.tobytes() == y.data.tobytes()
    for sub in ("final", "best"):
        assert (tmp_path / "a" / sub / "params.bin").read_bytes() == (tmp_path / "b" / sub / "params.bin").read_bytes()
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert len(report["epoch_losses"]) == len(report["val_rmse"]) == tiny_train_config.epochs


def test_train_report_and_best_checkpoint(tmp_path, tiny_dataset, tiny_train_config):
    cfg = dataclasses.replace(tiny_train_config, epochs=3)
    _, report = train(tiny_dataset, cfg, Variant.SRNN, 0, out_dir=tmp_path)
    assert all(np.isfinite(report.epoch_losses)) and len(report.epoch_losses) == 3
    assert report.best_epoch == int(np.argmin(report.val_rmse))
    best, variant, _ = load_checkpoint(tmp_path / "best")
    assert variant is Variant.SRNN
    train_s, val_s, _ = data.split_samples(data.build_samples(tiny_dataset, cfg.model_config(tiny_dataset)), tiny_dataset.manifest)
    from crowdflow.evaluation import evaluate_rmse

    assert evaluate_rmse(best, Variant.SRNN, val_s, tiny_dataset, batch_size=cfg.batch_size) == min(report.val_rmse)


def test_train_rejects_empty_training_set(tiny_dataset, tiny_train_config):
    with pytest.raises(ValueError):
        train(tiny_dataset, tiny_train_config, Variant.SPN, 0, train_samples=[])


def test_one_epoch_reduces_loss_for_most_seeds(tiny_dataset):
    cfg = TrainConfig(n=2, m=2, n_units=1, epochs=1, batch_size=8, lr=1e-3)
    train_s = data.split_samples(data.build_samples(tiny_dataset, cfg.model_config(tiny_dataset)), tiny_dataset.manifest)[0]
    improved = 0
    for seed in range(5):
        params, report = train(tiny_dataset, cfg, Variant.SPN, seed, train_samples=train_s, val_samples=[])
        improved += mean_loss(params, Variant.SPN, tiny_dataset, train_s) < report.initial_loss
    assert improved >= 4


def test_checkpoint_round_trip_and_corruption(tmp_path, small_config):
    from crowdflow.spn import init_params

    params = init_params(small_config, Variant.PRNN, 5)
    path = save_checkpoint(params, tmp_path / "ck", Variant.PRNN, small_config)
    back, variant, cfg = load_checkpoint(path)
    assert variant is Variant.PRNN and cfg == small_config
    for (n1, a), (n2, b) in zip(params.named(), back.named()):
        assert n1 == n2 and a.data.tobytes() == b.data.tobytes()
    raw = bytearray((path / "params.bin").read_bytes())
    raw[0] ^= 1
    (path / "params.bin").write_bytes(bytes(raw))
    with pytest.raises(ValueError):
        load_checkpoint(path)
