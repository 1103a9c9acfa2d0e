"""Training recipe: schedule, loss, optimizer, loop determinism."""

import numpy as np
import pytest

from nextlvt.blocks import build_model
from nextlvt.config import micro_config
from nextlvt.data import ArrayDataset
from nextlvt.errors import ConfigError, ContractError
from nextlvt.module import Parameter
from nextlvt.synth import generate_images
from nextlvt.tensor import Tape, Tensor
from nextlvt.train import (
    SGD,
    TrainConfig,
    cross_entropy,
    evaluate,
    lr_at,
    train,
)


class TestSchedule:
    def test_epoch_zero_is_base_rate(self):
        assert lr_at(0, TrainConfig()) == 0.007

    def test_one_decay_step(self):
        assert lr_at(3, TrainConfig()) == pytest.approx(7e-4)

    def test_two_decay_steps(self):
        assert lr_at(7, TrainConfig()) == pytest.approx(7e-5)

    def test_non_increasing(self):
        cfg = TrainConfig()
        rates = [lr_at(e, cfg) for e in range(25)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))
        assert rates[0] == cfg.base_lr

    def test_one_shot_variant(self):
        cfg = TrainConfig(decay_every_epochs=21, epochs=20)
        assert lr_at(19, cfg) == cfg.base_lr

    def test_negative_epoch_rejected(self):
        with pytest.raises(ContractError):
            lr_at(-1, TrainConfig())


class TestCrossEntropy:
    def test_uniform_two_class(self):
        loss = cross_entropy(Tensor([[0.0, 0.0]]), [0])
        assert loss.item() == pytest.approx(np.log(2.0), abs=1e-12)

    def test_uniform_43_class(self):
        logits = Tensor(np.zeros((4, 43)))
        loss = cross_entropy(logits, [0, 7, 21, 42])
        assert loss.item() == pytest.approx(np.log(43.0), abs=1e-12)

    def test_confident_correct_closed_form(self):
        loss = cross_entropy(Tensor([[10.0, -10.0]]), [0])
        assert loss.item() == pytest.approx(np.log1p(np.exp(-20.0)), rel=1e-9)
        assert loss.item() == pytest.approx(2.06e-9, rel=0.01)

    def test_nonnegative_and_zero_only_in_onehot_limit(self, rng):
        for _ in range(20):
            logits = Tensor(rng.uniform(-5, 5, (3, 7)))
            targets = rng.integers(0, 7, 3)
            assert cross_entropy(logits, targets).item() >= 0.0
        nearly_onehot = Tensor([[300.0, 0.0, 0.0]])
        assert cross_entropy(nearly_onehot, [0]).item() == 0.0

    def test_out_of_range_target_rejected(self):
        with pytest.raises(ContractError, match="targets"):
            cross_entropy(Tensor(np.zeros((1, 3))), [3])

    def test_gradient_matches_softmax_minus_onehot(self, rng):
        logits = Tensor(rng.uniform(-2, 2, (5, 4)), requires_grad=True)
        targets = rng.integers(0, 4, 5)
        with Tape() as tape:
            loss = cross_entropy(logits, targets)
        tape.backward(loss)
        from nextlvt.tensor import softmax
        soft = softmax(Tensor(logits.data), axis=-1).numpy()
        onehot = np.zeros((5, 4))
        onehot[np.arange(5), targets] = 1.0
        want = (soft - onehot) / 5.0
        np.testing.assert_allclose(logits.grad, want, atol=1e-10)


class TestSGD:
    def _param(self, value):
        return Parameter(np.array([value]))

    def test_vanilla_step(self):
        p = self._param(1.0)
        opt = SGD([("w", p)], momentum=0.0)
        p.grad = np.array([0.5])
        opt.step(lr=0.1)
        np.testing.assert_allclose(p.data, [0.95], atol=1e-15)

    def test_zero_gradient_fixpoint(self):
        p = self._param(1.0)
        opt = SGD([("w", p)], momentum=0.9)
        p.grad = np.array([1.0])
        opt.step(lr=0.1)
        value_after_one = p.data.copy()
        velocity_after_one = opt.velocity["w"].copy()
        for k in range(1, 4):
            p.grad = np.array([0.0])
            opt.step(lr=0.0)
            np.testing.assert_array_equal(p.data, value_after_one)
            np.testing.assert_allclose(opt.velocity["w"],
                                       velocity_after_one * 0.9 ** k,
                                       atol=1e-15)

    def test_hand_recurrence_two_steps(self):
        p = self._param(1.0)
        opt = SGD([("w", p)], momentum=0.9)
        lr, g1, g2 = 0.1, 0.5, -0.25
        p.grad = np.array([g1])
        opt.step(lr)
        v1 = g1
        w1 = 1.0 - lr * v1
        np.testing.assert_allclose(p.data, [w1], atol=1e-15)
        p.grad = np.array([g2])
        opt.step(lr)
        v2 = 0.9 * v1 + g2
        w2 = w1 - lr * v2
        np.testing.assert_allclose(p.data, [w2], atol=1e-15)

    def test_shape_mismatch_rejected(self):
        p = self._param(1.0)
        opt = SGD([("w", p)], momentum=0.0)
        p.grad = np.zeros(3)
        with pytest.raises(ContractError, match="shape"):
            opt.step(0.1)


def _tiny_dataset(n, classes, side, seed):
    images, labels = generate_images(n, classes, side, seed)
    return ArrayDataset(images, labels)


class TestEvaluate:
    def test_constant_predictor_accuracy(self, rng):
        cfg = micro_config(num_classes=4)
        model = build_model(cfg, seed=0)
        # zero trunk + biased head = constant class-0 predictor
        for _, p in model.named_parameters():
            p.data[:] = 0.0
        model.head.bias.data[:] = [1.0, 0.0, 0.0, 0.0]
        all_zero = ArrayDataset(np.zeros((6, 3, 8, 8)), np.zeros(6, dtype=int))
        assert evaluate(model, all_zero, batch=4) == 1.0
        no_zero = ArrayDataset(np.zeros((6, 3, 8, 8)), np.ones(6, dtype=int))
        assert evaluate(model, no_zero, batch=4) == 0.0

    def test_untrained_model_near_chance(self):
        cfg = micro_config(num_classes=4)
        model = build_model(cfg, seed=0)
        r = np.random.default_rng(3)
        images = r.uniform(0, 1, (400, 3, 8, 8))
        labels = r.integers(0, 4, 400)
        acc = evaluate(model, ArrayDataset(images, labels), batch=100)
        assert abs(acc - 0.25) < 0.1

    def test_untrained_43_class_chance_level(self):
        cfg = micro_config(num_classes=43)
        model = build_model(cfg, seed=2)
        r = np.random.default_rng(8)
        images = r.uniform(0, 1, (4300, 3, 8, 8))
        labels = r.integers(0, 43, 4300)
        acc = evaluate(model, ArrayDataset(images, labels), batch=256)
        assert abs(acc - 1.0 / 43.0) < 0.02

    def test_evaluate_is_a_pure_read(self):
        cfg = micro_config()
        model = build_model(cfg, seed=1)
        data = _tiny_dataset(8, 4, 8, seed=5)
        before = [(n, p.data.copy()) for n, p in model.named_parameters()]
        buffers_before = [(n, b.copy()) for n, b in model.named_buffers()]
        evaluate(model, data, batch=4)
        for (n, old), (_, p) in zip(before, model.named_parameters()):
            np.testing.assert_array_equal(old, p.data, err_msg=n)
        for (n, old), (_, b) in zip(buffers_before, model.named_buffers()):
            np.testing.assert_array_equal(old, b, err_msg=n)


class TestTrainLoop:
    def test_initial_loss_near_log_k(self):
        cfg = micro_config(num_classes=4)
        model = build_model(cfg, seed=0)
        data = _tiny_dataset(16, 4, 8, seed=2)
        tc = TrainConfig(epochs=1, train_batch=16, augmix=None, seed=0)
        _, metrics = train(model, data, None, tc)
        log_k = np.log(4.0)
        assert 0.8 * log_k <= metrics[0].train_loss <= 1.3 * log_k

    def test_lr_zero_freezes_parameters(self):
        cfg = micro_config()
        model = build_model(cfg, seed=0)
        before = [p.data.copy() for _, p in model.named_parameters()]
        data = _tiny_dataset(8, 4, 8, seed=2)
        tc = TrainConfig(base_lr=1e-30, epochs=1, train_batch=8,
                         augmix=None, seed=0)
        train(model, data, None, tc)
        for old, (_, p) in zip(before, model.named_parameters()):
            np.testing.assert_allclose(old, p.data, atol=1e-25)

    def test_same_seed_runs_are_bit_identical(self, tmp_path):
        logs = []
        for run in range(2):
            cfg = micro_config()
            model = build_model(cfg, seed=4)
            data = _tiny_dataset(24, 4, 8, seed=6)
            tc = TrainConfig(epochs=2, train_batch=8, seed=9)
            log = tmp_path / f"run{run}.log"
            _, metrics = train(model, data, data, tc, log_path=log)
            logs.append((log.read_text(),
                         [(m.train_loss, m.train_acc, m.eval_acc)
                          for m in metrics]))
        assert logs[0][0] == logs[1][0]
        assert logs[0][1] == logs[1][1]

    def test_metrics_log_format(self, tmp_path):
        cfg = micro_config()
        model = build_model(cfg, seed=0)
        data = _tiny_dataset(8, 4, 8, seed=2)
        log = tmp_path / "metrics.log"
        tc = TrainConfig(epochs=3, train_batch=8, augmix=None, seed=0)
        train(model, data, data, tc, log_path=log)
        lines = log.read_text().strip().splitlines()
        assert len(lines) == 3
        for epoch, line in enumerate(lines):
            cells = line.split(",")
            assert len(cells) == 5
            assert int(cells[0]) == epoch

    def test_overfit_smoke_memorizes_32_samples(self):
        cfg = micro_config(num_classes=4)
        model = build_model(cfg, seed=0)
        data = _tiny_dataset(32, 4, 8, seed=1)
        # 50 epochs x 4 steps/epoch = 200 steps, constant learning rate
        tc = TrainConfig(epochs=50, train_batch=8, decay_every_epochs=1000,
                         augmix=None, seed=0)
        state, metrics = train(model, data, None, tc)
        assert state.step == 200
        assert metrics[-1].train_acc == 1.0

    def test_empty_dataset_rejected(self):
        cfg = micro_config()
        model = build_model(cfg, seed=0)
        empty = ArrayDataset(np.zeros((0, 3, 8, 8)), np.zeros(0, dtype=int))
        with pytest.raises(ConfigError, match="empty"):
            train(model, empty, None, TrainConfig())

    def test_invalid_train_config_rejected(self):
        with pytest.raises(ConfigError, match="decay_factor"):
            TrainConfig(decay_factor=1.5).validate()

    def test_worker_threads_do_not_change_results(self, monkeypatch):
        metrics_by_workers = []
        for workers in ("1", "3"):
            monkeypatch.setenv("NLVT_THREADS", workers)
            cfg = micro_config()
            model = build_model(cfg, seed=4)
            data = _tiny_dataset(24, 4, 8, seed=6)
            tc = TrainConfig(epochs=1, train_batch=8, seed=9)
            _, metrics = train(model, data, data, tc)
            metrics_by_workers.append(
                [(m.train_loss, m.train_acc, m.eval_acc) for m in metrics])
        assert metrics_by_workers[0] == metrics_by_workers[1]
