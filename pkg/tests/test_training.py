import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clustercaps import tensor as T
from clustercaps.checkpoint import (
    CheckpointError,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from clustercaps.data import Dataset
from clustercaps.models import VariantSpec, build_variant, get_variant, stack_layers
from clustercaps.tensor import Tensor, grad_check
from clustercaps.training import (
    METRICS_HEADER,
    TrainConfig,
    TrainingDiverged,
    cross_entropy,
    epoch_order,
    evaluate,
    lr_schedule,
    model_loss,
    mse,
    predict,
    read_metrics,
    sgd_step,
    train,
)


class TestCrossEntropy:
    def test_uniform(self):
        assert cross_entropy(Tensor(np.zeros((3, 10))), [0, 4, 9]).item() == pytest.approx(math.log(10))

    def test_hand_softmax(self):
        loss = cross_entropy(Tensor(np.array([[0.0, math.log(3)]])), [1]).item()
        assert loss == pytest.approx(-math.log(0.75), rel=1e-14)

    def test_confident_limit(self):
        logits = np.array([[0.0, 800.0]])
        loss = cross_entropy(Tensor(logits), [1]).item()
        assert 0 <= loss < 1e-300 or loss == 0.0

    def test_invalid_labels(self):
        with pytest.raises(ValueError):
            cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
        with pytest.raises(ValueError):
            cross_entropy(Tensor(np.zeros((2, 3))), [0])

    def test_gradient(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        assert grad_check(lambda t: cross_entropy(t, [0, 1, 4, 2]), x) < 1e-6

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.1, 30))
    def test_nonnegative(self, seed, scale):
        rng = np.random.default_rng(seed)
        logits = rng.normal(scale=scale, size=(5, 7))
        assert cross_entropy(Tensor(logits), rng.integers(0, 7, 5)).item() >= 0


class TestMse:
    def test_values(self):
        assert mse(Tensor(np.zeros((2, 2))), np.zeros((2, 2))).item() == 0
        assert mse(Tensor(np.zeros((2, 2))), np.ones((2, 2))).item() == 1
        assert mse(Tensor(np.array([0.0, 1.0])), np.array([1.0, 1.0])).item() == 0.5

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mse(Tensor(np.zeros(3)), np.zeros(4))


def _param(value, grad):
    p = Tensor(np.array([value]), requires_grad=True)
    p.grad = np.array([grad])
    return p


class TestSgd:
    def test_plain_step(self):
        params = {"p": _param(1.0, 2.0)}
        sgd_step(params, 0.1, 0.0, {})
        assert params["p"].data[0] == pytest.approx(0.8)

    def test_zero_grad(self):
        params = {"p": _param(1.5, 0.0)}
        sgd_step(params, 0.1, 0.9, {})
        assert params["p"].data[0] == 1.5

    def test_momentum_recursion(self):
        params, vel = {"p": _param(0.0, 1.0)}, {}
        sgd_step(params, 0.1, 0.9, vel)
        assert params["p"].data[0] == pytest.approx(-0.1)
        params["p"].grad = np.array([1.0])
        sgd_step(params, 0.1, 0.9, vel)
        assert params["p"].data[0] == pytest.approx(-0.29)

    def test_tiny_lr(self):
        params = {"p": _param(0.3, 5.0)}
        sgd_step(params, 1e-300, 0.9, {})
        assert abs(params["p"].data[0] - 0.3) < 1e-15

    def test_missing_grad(self):
        with pytest.raises(ValueError):
            sgd_step({"p": Tensor(np.zeros(1))}, 0.1, 0.9, {})


class TestSchedule:
    def test_default_schedule(self):
        cfg = TrainConfig(lr0=0.1, decay_every=100, decay_rate=0.1)
        assert lr_schedule(0, cfg) == 0.1
        assert lr_schedule(100, cfg) == pytest.approx(0.01)
        assert lr_schedule(299, cfg) == pytest.approx(0.001)

    @pytest.mark.parametrize("kw", [dict(lr0=0), dict(decay_rate=0), dict(decay_rate=1.5),
                                    dict(batch_size=0), dict(momentum=-0.1), dict(momentum=1.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_epoch_order(self):
        a = epoch_order(20, 1, 0)
        assert sorted(a) == list(range(20))
        np.testing.assert_array_equal(a, epoch_order(20, 1, 0))
        assert not np.array_equal(a, epoch_order(20, 1, 1))


def small_spec():
    return VariantSpec("small", stack_layers(2, 2, 4, (2, 2)), 3, (8, 8, 1))


def small_data(n=48, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 3
    images = rng.uniform(0, 0.2, size=(n, 1, 8, 8))
    for i, y in enumerate(labels):
        images[i, 0, :, 2 * y:2 * y + 3] += 0.8
    return Dataset(np.clip(images, 0, 1), labels, 3, name="synthetic")


class TestTrain:
    def test_zero_epochs_returns_initial_model(self, tmp_path):
        model = build_variant(small_spec(), 0)
        before = {k: v.data.copy() for k, v in model.params.items()}
        res = train(model, small_data(), None, TrainConfig(epochs=0), tmp_path)
        for k, v in model.params.items():
            np.testing.assert_array_equal(v.data, before[k])
        loaded, _, _ = load_checkpoint(res.last_path)
        for k, v in loaded.params.items():
            np.testing.assert_array_equal(v.data, before[k])

    def test_learns_and_writes_outputs(self, tmp_path):
        model = build_variant(small_spec(), 0)
        data = small_data()
        cfg = TrainConfig(epochs=4, batch_size=8, lr0=0.05, decay_every=3)
        res = train(model, data, data, cfg, tmp_path)
        assert res.metrics[-1].train_loss < res.metrics[0].train_loss
        rows = read_metrics(tmp_path / "metrics.csv")
        assert len(rows) == 4 and tuple(rows[0]) == METRICS_HEADER
        assert [int(r["epoch"]) for r in rows] == [1, 2, 3, 4]
        assert float(rows[3]["lr"]) == pytest.approx(0.005)
        assert (tmp_path / "best.ccap").exists() and (tmp_path / "last.ccap").exists()

    def test_deterministic(self, tmp_path):
        cfg = TrainConfig(epochs=2, batch_size=8, lr0=0.05)
        rows = []
        for run in ("a", "b"):
            train(build_variant(small_spec(), 1), small_data(), small_data(), cfg, tmp_path / run)
            rows.append([{k: v for k, v in r.items() if k != "seconds"}
                         for r in read_metrics(tmp_path / run / "metrics.csv")])
        assert rows[0] == rows[1]

    def test_resume_matches_uninterrupted(self, tmp_path):
        data = small_data()
        full = TrainConfig(epochs=3, batch_size=8, lr0=0.05)
        ref = train(build_variant(small_spec(), 2), data, data, full, tmp_path / "ref")
        part = TrainConfig(epochs=2, batch_size=8, lr0=0.05)
        train(build_variant(small_spec(), 2), data, data, part, tmp_path / "res")
        fresh = build_variant(small_spec(), 99)
        res = train(fresh, data, data, full, tmp_path / "res", resume=tmp_path / "res" / "last.ccap")
        for k in ref.model.params:
            np.testing.assert_array_equal(res.model.params[k].data, ref.model.params[k].data)
        strip = lambda rows: [{k: v for k, v in r.items() if k != "seconds"} for r in rows]
        assert strip(read_metrics(tmp_path / "res" / "metrics.csv")) == \
            strip(read_metrics(tmp_path / "ref" / "metrics.csv"))

    def test_divergence_aborts(self, tmp_path):
        model = build_variant(small_spec(), 0)
        model.params["head.bias"].data[:] = np.nan
        with pytest.raises(TrainingDiverged, match="batch 0"):
            train(model, small_data(), None, TrainConfig(epochs=1, batch_size=8), tmp_path)

    def test_evaluate_and_predict(self):
        model = build_variant(small_spec(), 0)
        data = small_data(30)
        logits = predict(model, data, batch_size=7)
        err = evaluate(model, data, batch_size=7)
        assert logits.shape == (30, 3)
        assert err == pytest.approx(np.mean(logits.argmax(1) != data.labels))
        perm = np.random.default_rng(0).permutation(30)
        assert evaluate(model, data.subset(perm)) == pytest.approx(err)

    def test_recon_loss_terms(self):
        spec = get_variant("recon-tiny")
        model = build_variant(spec, 0)
        x = np.random.default_rng(0).uniform(size=(2, 1, 28, 28))
        with T.no_grad():
            ce_only, _ = model_loss(model, x, np.array([1, 2]), TrainConfig(recon_lambda=0.0))
            both, _ = model_loss(model, x, np.array([1, 2]), TrainConfig(recon_lambda=1.0))
            rec = model.decode_conv(model.capsules(x))
        assert both.item() == pytest.approx(ce_only.item() + np.mean((rec.data - x[:, 0]) ** 2))

    def test_first_steps_finite_tiny(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(size=(8, 1, 28, 28))
        y = np.arange(8) % 10
        for seed in range(2):
            model = build_variant(get_variant("tiny"), seed)
            vel = {}
            for _ in range(5):
                for p in model.params.values():
                    p.grad = None
                loss, _ = model_loss(model, x, y, TrainConfig())
                assert math.isfinite(loss.item())
                loss.backward()
                sgd_step(model.params, 0.01, 0.9, vel)


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        model = build_variant(get_variant("recon-tiny"), 3)
        vel = {"layer0.weights": np.random.default_rng(0).normal(size=model.params["layer0.weights"].shape)}
        save_checkpoint(tmp_path / "m.ccap", model, vel, {"epoch": 4})
        loaded, v2, meta = load_checkpoint(tmp_path / "m.ccap")
        assert loaded.spec == model.spec and meta == {"epoch": 4}
        for k, p in model.params.items():
            assert loaded.params[k].data.tobytes() == p.data.tobytes()
        np.testing.assert_array_equal(v2["layer0.weights"], vel["layer0.weights"])
        assert encode_checkpoint(loaded, v2, meta) == (tmp_path / "m.ccap").read_bytes()

    def test_header(self):
        buf = encode_checkpoint(build_variant(small_spec(), 0))
        assert buf[:4] == b"CCAP"
        assert int.from_bytes(buf[4:8], "little") == 1

    def test_bad_magic(self):
        with pytest.raises(CheckpointError):
            decode_checkpoint(b"XXXX" + bytes(20))

    def test_truncated(self):
        buf = encode_checkpoint(build_variant(small_spec(), 0))
        with pytest.raises(CheckpointError):
            decode_checkpoint(buf[:-3])

    def test_missing_parameter(self):
        buf = encode_checkpoint(build_variant(small_spec(), 0))
        # head.bias (3 values) is the final blob
        short = buf[:-(4 + len("head.bias") + 8 + 8 * 3)]
        with pytest.raises(CheckpointError, match="head.bias"):
            decode_checkpoint(short)
