import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clustercaps.routing import (
    LayerConfig,
    RoutingMode,
    cluster_stats,
    compute_votes,
    fuse,
    init_params,
    layer_forward,
    layer_forward_oracle,
    routing_weights,
    slice_mask,
)
from clustercaps.tensor import Tensor, grad_check


def random_instance(seed, h=None, w=None, single=False, **over):
    rng = np.random.default_rng(seed)
    g = over.pop("groups", int(rng.integers(1, 5)))
    cfg = LayerConfig(
        groups=g,
        channels_out=over.pop("channels_out", int(rng.integers(1, 5))),
        votes=over.pop("votes", int(rng.integers(1, 5))),
        dims_in=over.pop("dims_in", int(rng.integers(1, 5))),
        dims_out=over.pop("dims_out", int(rng.integers(1, 5))),
        stride=over.pop("stride", int(rng.integers(1, 3))),
        pad=over.pop("pad", int(rng.integers(0, 2))),
        channels_in=1 if single else g,
        **over,
    )
    lo = 3 - 2 * cfg.pad
    h = h or int(rng.integers(max(lo, 1), 7))
    w = w or int(rng.integers(max(lo, 1), 7))
    params = init_params(cfg, rng)
    params["biases"] = Tensor(rng.normal(size=params["biases"].shape), requires_grad=True)
    if cfg.layer_norm:
        params["ln_gain"] = Tensor(rng.uniform(0.5, 1.5, params["ln_gain"].shape), requires_grad=True)
        params["ln_bias"] = Tensor(rng.normal(size=params["ln_bias"].shape), requires_grad=True)
    caps = Tensor(rng.normal(size=(2, h, w, cfg.channels_in, cfg.dims_in)))
    return cfg, params, caps


class TestLayerConfig:
    def test_channels_in_defaults_to_groups(self):
        assert LayerConfig(3, 2, 2, 4, 4).channels_in == 3

    @pytest.mark.parametrize("kw", [
        dict(stride=3), dict(pad=2), dict(channels_in=2), dict(votes=0), dict(dims_out=0),
    ])
    def test_rejects_bad_fields(self, kw):
        args = dict(groups=3, channels_out=2, votes=2, dims_in=4, dims_out=4)
        args.update(kw)
        with pytest.raises(ValueError):
            LayerConfig(**args)

    def test_first_layer_count(self):
        # C4K4D32 on a grayscale image: 4*1*4*32*(9+1) weights and biases
        cfg = LayerConfig(1, 4, 4, 1, 32, channels_in=1, layer_norm=False)
        assert cfg.count_params() == 5120

    def test_count_matches_shapes(self):
        cfg = LayerConfig(2, 3, 4, 5, 6)
        shapes = cfg.param_shapes()
        assert cfg.count_params() == sum(int(np.prod(s)) for s in shapes.values())

    def test_init_ranges(self):
        cfg = LayerConfig(2, 2, 3, 4, 5)
        p = init_params(cfg, np.random.default_rng(0))
        bound = 1 / math.sqrt(36)
        assert np.abs(p["weights"].data).max() <= bound
        assert np.abs(p["biases"].data).max() <= bound
        np.testing.assert_array_equal(p["ln_gain"].data, 1.0)
        np.testing.assert_array_equal(p["ln_bias"].data, 0.0)


class TestComputeVotes:
    def test_single_cell_sees_only_centre(self):
        cfg = LayerConfig(1, 1, 1, 2, 2, channels_in=1)
        rng = np.random.default_rng(1)
        p = init_params(cfg, rng)
        u = np.array([0.3, -0.7])
        votes = compute_votes(Tensor(u.reshape(1, 1, 1, 1, 2)), p, cfg).data
        w = p["weights"].data[0, 0, 0]
        np.testing.assert_allclose(votes.reshape(-1), w[:, 8:10] @ u + p["biases"].data[0, 0, 0])

    def test_identity_selecting_weights(self):
        cfg = LayerConfig(1, 1, 1, 3, 3, channels_in=1)
        w = np.zeros((1, 1, 1, 3, 27))
        w[0, 0, 0, :, 12:15] = np.eye(3)
        p = {"weights": Tensor(w), "biases": Tensor(np.zeros((1, 1, 1, 3))),
             "ln_gain": Tensor(np.ones((1, 3))), "ln_bias": Tensor(np.zeros((1, 3)))}
        x = np.random.default_rng(2).normal(size=(1, 4, 4, 1, 3))
        votes = compute_votes(Tensor(x), p, cfg).data
        np.testing.assert_array_equal(votes[:, :, :, 0, 0, 0], x[:, :, :, 0])

    def test_shape_mismatch(self):
        cfg = LayerConfig(2, 2, 2, 3, 3)
        p = init_params(cfg, np.random.default_rng(0))
        with pytest.raises(ValueError):
            compute_votes(Tensor(np.zeros((1, 4, 4, 2, 4))), p, cfg)
        p["weights"] = Tensor(np.zeros((2, 2, 2, 3, 26)))
        with pytest.raises(ValueError):
            compute_votes(Tensor(np.zeros((1, 4, 4, 2, 3))), p, cfg)


class TestClusterStats:
    def test_two_votes(self):
        m, a = cluster_stats(Tensor(np.array([[1.0], [3.0]])))
        np.testing.assert_allclose(m.data, [2.0])
        np.testing.assert_allclose(a.data, [-math.log(1 + 1e-8)])

    def test_identical_votes(self):
        v = np.tile([0.5, -2.0], (4, 1))
        m, a = cluster_stats(Tensor(v))
        np.testing.assert_allclose(m.data, v[0])
        np.testing.assert_allclose(a.data, -math.log(1e-8))
        assert a.data[0] == pytest.approx(18.42, abs=0.01)

    def test_singleton(self):
        m, a = cluster_stats(Tensor(np.array([[4.0, 5.0]])))
        np.testing.assert_array_equal(m.data, [4.0, 5.0])
        np.testing.assert_allclose(a.data, -math.log(1e-8))

    def test_rejects_bad_eps(self):
        with pytest.raises(ValueError):
            cluster_stats(Tensor(np.zeros((2, 2))), eps=0.0)


class TestRoutingWeights:
    def test_single_group(self):
        c = routing_weights(Tensor(np.array([[3.0, -1.0]])))
        np.testing.assert_array_equal(c.data, 1.0)

    def test_hand_softmax(self):
        c = routing_weights(Tensor(np.array([[0.0], [math.log(3)]])))
        np.testing.assert_allclose(c.data.ravel(), [0.25, 0.75], rtol=1e-14)

    def test_equal_agreements(self):
        c = routing_weights(Tensor(np.full((4, 3), 7.0)))
        np.testing.assert_allclose(c.data, 0.25)

    def test_constant_mode_is_exact(self):
        c = routing_weights(Tensor(np.random.default_rng(0).normal(size=(3, 5))), "constant")
        assert np.all(c.data == 1.0 / 3)

    def test_no_overflow_at_guard(self):
        a = Tensor(np.array([[-math.log(1e-8)] * 2, [-700.0, 700.0]]))
        c = routing_weights(a)
        assert np.all(np.isfinite(c.data))
        np.testing.assert_allclose(c.data.sum(axis=0), 1.0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1),
           st.floats(-50, 50))
    def test_shift_invariance(self, g, d, seed, shift):
        a = np.random.default_rng(seed).normal(scale=5, size=(g, d))
        c0 = routing_weights(Tensor(a)).data
        c1 = routing_weights(Tensor(a + shift)).data
        np.testing.assert_allclose(c1, c0, atol=1e-12, rtol=0)
        np.testing.assert_allclose(c0.sum(axis=0), 1.0, atol=1e-6)


class TestFuse:
    def test_hand_values(self):
        m = Tensor(np.array([[1.0, 0.0], [3.0, 2.0]]))
        c = Tensor(np.array([[0.25, 0.5], [0.75, 0.5]]))
        np.testing.assert_allclose(fuse(m, c).data, [2.5, 1.0])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            fuse(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


class TestLayerForward:
    def test_identity_composition(self):
        cfg = LayerConfig(1, 1, 1, 3, 3, channels_in=1, layer_norm=False)
        w = np.zeros((1, 1, 1, 3, 27))
        w[0, 0, 0, :, 12:15] = np.eye(3)
        p = {"weights": Tensor(w), "biases": Tensor(np.zeros((1, 1, 1, 3)))}
        x = np.random.default_rng(3).normal(size=(2, 5, 5, 1, 3))
        np.testing.assert_array_equal(layer_forward(Tensor(x), p, cfg).data, x)

    def test_zero_weights_give_bias_centroids(self):
        cfg = LayerConfig(2, 1, 3, 2, 2, layer_norm=False)
        b = np.random.default_rng(4).normal(size=(1, 2, 1, 2))
        p = {"weights": Tensor(np.zeros((1, 2, 3, 2, 18))), "biases": Tensor(np.repeat(b, 3, axis=2))}
        out = layer_forward(Tensor(np.ones((1, 3, 3, 2, 2))), p, cfg).data
        # equal agreements -> uniform routing -> mean of the two bias vectors
        np.testing.assert_allclose(out, np.broadcast_to(b[0, :, 0].mean(axis=0), out.shape))

    def test_example_instance_against_oracle(self):
        cfg, p, caps = random_instance(0, h=4, w=4, groups=2, channels_out=2, votes=3,
                                       dims_in=2, dims_out=3, stride=1, pad=1)
        np.testing.assert_allclose(layer_forward(caps, p, cfg).data,
                                   layer_forward_oracle(caps, p, cfg), atol=1e-9, rtol=0)

    @pytest.mark.parametrize("seed", range(60))
    def test_oracle_equivalence(self, seed):
        cfg, p, caps = random_instance(seed, single=seed % 3 == 0,
                                       routing=RoutingMode.CONSTANT if seed % 5 == 0 else RoutingMode.DATA_DEPENDENT,
                                       layer_norm=seed % 4 != 0)
        np.testing.assert_allclose(layer_forward(caps, p, cfg).data,
                                   layer_forward_oracle(caps, p, cfg), atol=1e-9, rtol=0)

    def test_oracle_unbatched(self):
        cfg, p, caps = random_instance(7)
        np.testing.assert_allclose(layer_forward_oracle(caps.data[0], p, cfg),
                                   layer_forward_oracle(caps, p, cfg)[0])

    def test_sliced_mode_against_oracle(self):
        cfg, p, caps = random_instance(8, votes=2, dims_in=4, sliced=True)
        np.testing.assert_allclose(layer_forward(caps, p, cfg).data,
                                   layer_forward_oracle(caps, p, cfg), atol=1e-9, rtol=0)

    def test_slice_mask_layout(self):
        cfg = LayerConfig(1, 1, 2, 4, 1, channels_in=1, sliced=True)
        mask = slice_mask(cfg)[0, 0, :, 0].reshape(2, 9, 4)
        np.testing.assert_array_equal(mask[0], np.tile([1, 1, 0, 0], (9, 1)))
        np.testing.assert_array_equal(mask[1], np.tile([0, 0, 1, 1], (9, 1)))

    def test_return_routing_normalised(self):
        cfg, p, caps = random_instance(9, groups=3, channels_out=2, dims_out=4)
        out, c = layer_forward(caps, p, cfg, return_routing=True)
        b, ho, wo = out.shape[:3]
        assert c.shape == (b, ho, wo, 2, 3, 4)
        assert np.all((c > 0) & (c < 1))
        np.testing.assert_allclose(c.sum(axis=4), 1.0, atol=1e-6)

    def test_constant_equals_data_dependent_for_equal_agreements(self):
        cfg, p, caps = random_instance(10, single=True, groups=3)
        # identical clusters give identical agreements across g
        for name in ("weights", "biases"):
            d = p[name].data.copy()
            d[:, 1:] = d[:, :1]
            p[name] = Tensor(d)
        cons = LayerConfig(**{**cfg.to_dict(), "routing": "constant"})
        np.testing.assert_allclose(layer_forward(caps, p, cfg).data,
                                   layer_forward(caps, p, cons).data, atol=1e-12)


class TestInvariants:
    @pytest.mark.parametrize("seed", range(20))
    def test_vote_permutation(self, seed):
        cfg, p, caps = random_instance(seed, votes=3)
        base = layer_forward(caps, p, cfg).data
        perm = np.random.default_rng(seed).permutation(3)
        q = dict(p)
        g = int(np.random.default_rng(seed + 1).integers(cfg.groups))
        for name in ("weights", "biases"):
            d = p[name].data.copy()
            d[:, g] = d[:, g][:, perm]
            q[name] = Tensor(d)
        np.testing.assert_array_equal(layer_forward(caps, q, cfg).data, base)

    @pytest.mark.parametrize("seed", range(10))
    def test_cluster_permutation_single_channel(self, seed):
        cfg, p, caps = random_instance(seed, single=True, groups=3)
        perm = np.random.default_rng(seed).permutation(3)
        q = dict(p)
        for name in ("weights", "biases"):
            q[name] = Tensor(p[name].data[:, perm])
        np.testing.assert_allclose(layer_forward(caps, q, cfg).data,
                                   layer_forward(caps, p, cfg).data, atol=1e-12, rtol=0)

    @pytest.mark.parametrize("seed", range(10))
    def test_variance_monotonicity(self, seed):
        rng = np.random.default_rng(seed)
        g, k, d = 3, 4, 5
        votes = rng.normal(size=(g, k, d))
        m0, a0 = cluster_stats(Tensor(votes))
        c0 = routing_weights(a0).data
        # shrink cluster 0 around its own centroid: same m, smaller std
        tighter = votes.copy()
        tighter[0] = m0.data[0] + 0.5 * (votes[0] - m0.data[0])
        m1, a1 = cluster_stats(Tensor(tighter))
        c1 = routing_weights(a1).data
        np.testing.assert_allclose(m1.data, m0.data, atol=1e-12)
        assert np.all(c1[0] > c0[0])
        assert np.all(c1[1:] < c0[1:])


class TestGradients:
    @pytest.mark.parametrize("seed", range(5))
    def test_grad_through_layer(self, seed):
        cfg, p, caps = random_instance(seed, h=3, w=3, groups=2, votes=3, dims_in=2, dims_out=3)
        rng = np.random.default_rng(seed)
        proj = rng.normal(size=layer_forward(caps, p, cfg).shape)
        for name in p:
            def f(x, name=name):
                q = dict(p)
                q[name] = x
                return (layer_forward(caps, q, cfg) * Tensor(proj)).sum()
            assert grad_check(f, Tensor(p[name].data.copy(), requires_grad=True)) < 1e-4, name

        def f_in(x):
            return (layer_forward(x, p, cfg) * Tensor(proj)).sum()
        assert grad_check(f_in, Tensor(caps.data.copy(), requires_grad=True)) < 1e-4

    def test_constant_mode_has_no_agreement_gradient(self):
        cfg, p, caps = random_instance(3, routing="constant", layer_norm=False)
        for v in p.values():
            v.requires_grad = True
        layer_forward(caps, p, cfg).sum().backward()
        # with uniform c the output is linear in the weights
        g = p["weights"].grad.copy()
        p2 = {k: Tensor(v.data * 3.0, requires_grad=True) for k, v in p.items()}
        layer_forward(caps, p2, cfg).sum().backward()
        np.testing.assert_allclose(p2["weights"].grad, g, atol=1e-12)
