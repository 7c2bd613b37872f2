import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clustercaps import experiments as ex
from clustercaps import plotting
from clustercaps import tensor as T
from clustercaps.models import build_variant, get_variant, mask_capsules
from clustercaps.outputs import pgm_bytes, read_pgm, write_csv, write_pgm
from clustercaps.routing import RoutingMode
from clustercaps.tensor import Tensor


class TestOutputs:
    def test_pgm_round_trip(self, tmp_path):
        img = np.linspace(0, 1, 12).reshape(3, 4)
        write_pgm(tmp_path / "a.pgm", img)
        back = read_pgm(tmp_path / "a.pgm")
        assert back.shape == (3, 4)
        np.testing.assert_array_equal(back, np.rint(img * 255).astype(np.uint8))

    def test_pgm_whitespace_pixels(self, tmp_path):
        # pixel bytes equal to ASCII whitespace must survive the header parse
        img = np.array([[9, 10, 13, 32]]) / 255.0
        write_pgm(tmp_path / "w.pgm", img)
        np.testing.assert_array_equal(read_pgm(tmp_path / "w.pgm"), [[9, 10, 13, 32]])

    def test_pgm_clips(self):
        buf = pgm_bytes(np.array([[-1.0, 2.0, np.nan]]))
        assert buf.endswith(bytes([0, 255, 0]))

    def test_pgm_rejects_3d(self):
        with pytest.raises(ValueError):
            pgm_bytes(np.zeros((2, 2, 2)))

    def test_read_pgm_errors(self, tmp_path):
        (tmp_path / "x.pgm").write_bytes(b"P2\n1 1\n255\n0")
        with pytest.raises(ValueError):
            read_pgm(tmp_path / "x.pgm")
        (tmp_path / "y.pgm").write_bytes(b"P5\n2 2\n255\n\0")
        with pytest.raises(ValueError):
            read_pgm(tmp_path / "y.pgm")

    def test_csv(self, tmp_path):
        write_csv(tmp_path / "m.csv", ["a", "b"], [[1, 0.1], {"a": 2, "b": 1 / 3}])
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines == ["a,b", "1,0.1", f"2,{1 / 3!r}"]
        assert not list(tmp_path.glob("*.tmp*"))

    def test_csv_width(self, tmp_path):
        with pytest.raises(ValueError):
            write_csv(tmp_path / "m.csv", ["a", "b"], [[1]])


def brute_l1(weights, labels):
    x = weights.reshape(len(weights), -1)
    within, between = [], []
    for i, j in itertools.combinations(range(len(x)), 2):
        d = np.abs(x[i] - x[j]).sum()
        (within if labels[i] == labels[j] else between).append(d)
    return np.mean(within), np.mean(between)


class TestPairwiseL1:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(3, 15))
    def test_matches_loop(self, seed, n):
        rng = np.random.default_rng(seed)
        w = rng.random((n, 2, 3, 2))
        labels = np.r_[0, 0, 1, rng.integers(0, 3, n - 3)]
        got = ex.pairwise_l1_stats(w, labels)
        np.testing.assert_allclose(got, brute_l1(w, labels), rtol=1e-12)

    def test_separated_classes(self):
        w = np.array([[0.0], [0.1], [5.0], [5.1]])
        within, between = ex.pairwise_l1_stats(w, [0, 0, 1, 1])
        assert within == pytest.approx(0.1) and between > within

    def test_single_class(self):
        within, between = ex.pairwise_l1_stats(np.zeros((3, 1)), [2, 2, 2])
        assert within == 0 and np.isnan(between)


class TestSelectEpoch:
    hist = [{"epoch": 1, "familiar_acc": 0.8}, {"epoch": 2, "familiar_acc": 0.9},
            {"epoch": 3, "familiar_acc": 0.9}, {"epoch": 4, "familiar_acc": 0.85}]

    def test_best_prefers_earliest(self):
        assert ex.select_epoch(self.hist)["epoch"] == 2

    def test_target(self):
        assert ex.select_epoch(self.hist, 0.86)["epoch"] == 4
        assert ex.select_epoch(self.hist, 0.5)["epoch"] == 1

    def test_empty(self):
        with pytest.raises(ValueError):
            ex.select_epoch([])


class TestModelHelpers:
    def test_constant_check(self):
        spec = get_variant("tiny", (28, 28, 1))
        x = np.random.default_rng(0).random((2, 1, 28, 28))
        assert ex.constant_routing_check(build_variant(spec.with_routing(RoutingMode.CONSTANT), 0), x)
        assert not ex.constant_routing_check(build_variant(spec, 0), x)

    def test_last_layer_routing(self):
        model = build_variant(get_variant("tiny-global", (28, 28, 1)), 0)
        x = np.random.default_rng(1).random((5, 1, 28, 28))
        w = ex.last_layer_routing(model, x, batch_size=2)
        cfg = model.spec.layers[-1]
        assert w.shape == (5, cfg.channels_out, cfg.groups, cfg.dims_out)
        np.testing.assert_allclose(w.sum(axis=2), 1.0, atol=1e-12)
        # batching does not change the result
        np.testing.assert_allclose(w, ex.last_layer_routing(model, x), atol=1e-12)

    def test_last_layer_routing_needs_global(self):
        model = build_variant(get_variant("tiny", (28, 28, 1)), 0)
        with pytest.raises(ValueError):
            ex.last_layer_routing(model, np.zeros((1, 1, 28, 28)))

    def test_transform_mse_identity_row(self):
        model = build_variant(get_variant("recon-tiny", (28, 28, 1)), 0)
        x = np.random.default_rng(2).random((3, 1, 28, 28))
        mse = dict(ex.transform_recon_mse(model, x, batch_size=2))
        rec = ex.reconstruct(model, x)
        assert mse["R-0"] == pytest.approx(((rec - x[:, 0]) ** 2).mean(), rel=1e-12)
        assert len(mse) == 18
        assert ex.transform_grid(model, x[0]).shape == (28, 28 * 19)


    def test_perturbation_zero_delta_is_plain_reconstruction(self):
        model = build_variant(get_variant("disentangle-tiny", (28, 28, 1)), 0)
        img = np.random.default_rng(3).random((1, 28, 28))
        rows = ex.perturbation_rows(model, img, label=4)
        assert len(rows) == 8 and rows[0].shape == (28, 28 * 11)
        with T.no_grad():
            caps = model.capsules(img[None]).data[0, 0, 0]
            plain = model.decode_fc(Tensor(mask_capsules(caps, 4)[None])).data[0]
        for row in rows:
            np.testing.assert_array_equal(row[:, 5 * 28:6 * 28], plain)


class TestPlotting:
    def test_figures(self, tmp_path):
        rows = [{"epoch": 1, "train_loss": 1.0, "eval_err": 0.5}, {"epoch": 2, "train_loss": 0.5, "eval_err": 0.2}]
        plotting.training_curves(rows, tmp_path / "c.png")
        plotting.ablation_bars([{"seed": 0, "data_dependent_acc": 0.9, "constant_acc": 0.8}], tmp_path / "a.png")
        plotting.transform_mse_bars([("R-0", 0.01), ("S-1.5", 0.05)], tmp_path / "t.png")
        plotting.routing_scatter(np.random.default_rng(0).random((10, 4)), np.arange(10) % 3, tmp_path / "r.png")
        plotting.image_grid(np.zeros((28, 56)), tmp_path / "g.png", "title")
        plotting.viewpoint_curves([{"epoch": 1, "familiar_acc": 0.8, "novel_acc": 0.6}], tmp_path / "v.png")
        for name in "catrgv":
            assert (tmp_path / f"{name}.png").read_bytes()[:4] == b"\x89PNG"
