"""Networks with manual gradients, encoders, EMA, optimizers."""

import numpy as np
import pytest

from lieops.errors import StaleCacheError
from lieops.inference import sample_laplacian
from lieops.networks import (
    AdamWState,
    EmaState,
    MlpNet,
    WarmupSchedule,
    adamw_update,
    cross_entropy,
    ema_update,
    encode_posterior,
    encode_prior,
    load_mlp,
    posterior_backward,
    prior_backward,
    save_mlp,
)


def finite_diff(f, x, h=1e-5):
    g = np.zeros_like(x)
    fx, fg = x.reshape(-1), g.reshape(-1)
    for i in range(fx.size):
        orig = fx[i]
        fx[i] = orig + h
        up = f()
        fx[i] = orig - h
        down = f()
        fx[i] = orig
        fg[i] = (up - down) / (2 * h)
    return g


class TestForward:
    def test_zero_weights_returns_bias(self):
        net = MlpNet([3, 4], 2, "plain", rng=np.random.default_rng(0))
        for w in net.trunk_w + net.head_w:
            w[...] = 0.0
        net.head_b[0][:] = np.array([1.5, -0.5])
        out, _ = net.forward(np.random.default_rng(1).normal(size=3))
        np.testing.assert_array_equal(out, np.array([1.5, -0.5]))

    def test_zero_slope_rectifier_zeroes_negatives(self):
        net = MlpNet([2, 2], 2, "plain", negative_slope=0.0, rng=np.random.default_rng(2))
        net.trunk_w[0][...] = -np.eye(2)
        net.trunk_b[0][:] = 0.0
        net.head_w[0][...] = np.eye(2)
        net.head_b[0][:] = 0.0
        out, _ = net.forward(np.array([1.0, 2.0]))
        np.testing.assert_array_equal(out, np.zeros(2))

    def test_forward_equals_bruteforce_reimplementation(self):
        rng = np.random.default_rng(3)
        net = MlpNet([4, 6, 5], 3, "plain", rng=rng)
        x = rng.normal(size=(7, 4))
        out, _ = net.forward(x)
        h = x
        for w, b in zip(net.trunk_w, net.trunk_b):
            pre = h @ w + b
            h = np.where(pre > 0, pre, 0.01 * pre)
        expected = h @ net.head_w[0] + net.head_b[0]
        np.testing.assert_array_equal(out, expected)

    def test_laplacian_head_clamps_log_scale(self):
        rng = np.random.default_rng(4)
        net = MlpNet([3, 4], 2, "laplacian", log_scale_clamp=(-1.0, 1.0),
                     head_weight_scale=50.0, rng=rng)
        params, _ = net.forward(rng.normal(size=(10, 3)))
        assert np.all(params.log_scale >= -1.0) and np.all(params.log_scale <= 1.0)

    def test_projection_normalizes_rows(self):
        rng = np.random.default_rng(5)
        net = MlpNet([4, 5], 3, "projection", normalize=True, rng=rng)
        out, _ = net.forward(rng.normal(size=(6, 4)))
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, rtol=1e-12)

    def test_input_dim_mismatch(self):
        net = MlpNet([3], 2, rng=np.random.default_rng(6))
        with pytest.raises(ValueError):
            net.forward(np.zeros(4))


class TestBackward:
    def test_zero_upstream_zero_grads(self):
        rng = np.random.default_rng(7)
        net = MlpNet([3, 4], 2, "plain", rng=rng)
        out, cache = net.forward(rng.normal(size=(5, 3)))
        grads, d_in = net.backward(cache, np.zeros_like(out))
        assert all(np.allclose(g, 0) for g in grads)
        assert np.allclose(d_in, 0)

    def test_linear_net_input_gradient(self):
        rng = np.random.default_rng(8)
        net = MlpNet([4], 3, "plain", rng=rng)  # single affine, no hidden
        x = rng.normal(size=(2, 4))
        out, cache = net.forward(x)
        upstream = rng.normal(size=out.shape)
        _, d_in = net.backward(cache, upstream)
        np.testing.assert_allclose(d_in, upstream @ net.head_w[0].T, rtol=1e-14)

    def test_gradients_match_finite_differences_all_heads(self):
        rng = np.random.default_rng(9)
        nets = [
            MlpNet([5, 8, 6], 4, "plain", rng=rng),
            MlpNet([6, 8], 3, "laplacian", rng=rng),
            MlpNet([5, 7], 4, "projection", normalize=True, rng=rng),
        ]
        for net in nets:
            x = rng.normal(size=(3, net.layer_dims[0]))
            if net.head == "laplacian":
                w = (rng.normal(size=(3, 3)), rng.normal(size=(3, 3)))

                def value():
                    p, _ = net.forward(x)
                    return float(np.sum(w[0] * p.shift) + np.sum(w[1] * p.log_scale))

                upstream = w
            else:
                w = rng.normal(size=(3, net.out_dim))

                def value():
                    o, _ = net.forward(x)
                    return float(np.sum(w * o))

                upstream = w
            _, cache = net.forward(x)
            grads, d_in = net.backward(cache, upstream)
            for g, p in zip(grads, net.parameters()):
                fd = finite_diff(value, p)
                assert np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12) < 1e-4
            fd_in = finite_diff(value, x)
            assert np.linalg.norm(d_in - fd_in) / np.linalg.norm(fd_in) < 1e-4

    def test_stale_cache_rejected(self):
        rng = np.random.default_rng(10)
        net = MlpNet([3, 4], 2, "plain", rng=rng)
        out, cache = net.forward(rng.normal(size=(2, 3)))
        adamw_update(net, net.zero_grads(), AdamWState.for_net(net), lr=1e-3)
        with pytest.raises(StaleCacheError):
            net.backward(cache, np.zeros_like(out))


class TestEncoders:
    def test_posterior_output_dim(self):
        rng = np.random.default_rng(11)
        for m in (2, 5, 9):
            q = MlpNet([8, 6], m, "laplacian", rng=rng)
            z, zp = rng.normal(size=4), rng.normal(size=4)
            params, _ = encode_posterior(q, z, zp)
            assert params.shift.shape == (m,)

    def test_posterior_deterministic(self):
        rng = np.random.default_rng(12)
        q = MlpNet([8, 6], 3, "laplacian", rng=rng)
        z, zp = rng.normal(size=4), rng.normal(size=4)
        a, _ = encode_posterior(q, z, zp)
        b, _ = encode_posterior(q, z, zp)
        assert np.array_equal(a.shift, b.shift)
        assert np.array_equal(a.log_scale, b.log_scale)

    def test_posterior_detach_contract(self):
        # posterior_backward returns parameter grads only; nothing reaches z.
        rng = np.random.default_rng(13)
        q = MlpNet([8, 6], 3, "laplacian", rng=rng, head_weight_scale=1.0)
        z, zp = rng.normal(size=4), rng.normal(size=4)
        params, cache = encode_posterior(q, z, zp)
        grads = posterior_backward(q, cache, np.ones(3), np.ones(3))
        assert len(grads) == len(q.parameters())

    def test_posterior_scale_gradient_chain(self):
        # d_scale is converted through scale = exp(log_scale).
        rng = np.random.default_rng(14)
        q = MlpNet([6, 5], 2, "laplacian", rng=rng, head_weight_scale=1.0)
        z, zp = rng.normal(size=3), rng.normal(size=3)

        def value():
            p, _ = encode_posterior(q, z, zp)
            return float(np.sum(p.scale))

        _, cache = encode_posterior(q, z, zp)
        grads = posterior_backward(q, cache, np.zeros(2), np.ones(2))
        for g, p in zip(grads, q.parameters()):
            fd = finite_diff(value, p)
            assert np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-10) < 1e-4

    def test_prior_warmup_endpoints(self):
        rng = np.random.default_rng(15)
        p_net = MlpNet([4, 5], 3, "laplacian", rng=rng, head_weight_scale=1.0)
        sched = WarmupSchedule(total_iters=5000)
        assert sched.total_iters == 5000 and sched.mu0 == 0.05 and sched.b0 == 0.01
        z = rng.normal(size=(2, 4))
        at0, _ = encode_prior(p_net, z, sched, 0)
        np.testing.assert_allclose(at0.shift, 0.05)
        np.testing.assert_allclose(at0.scale, 0.01, rtol=1e-12)
        after, _ = encode_prior(p_net, z, sched, 5000)
        raw, _ = p_net.forward(z)
        np.testing.assert_allclose(after.shift, raw.shift, rtol=1e-12)
        np.testing.assert_allclose(after.scale, raw.scale, rtol=1e-12)

    def test_prior_midpoint_blend(self):
        rng = np.random.default_rng(16)
        p_net = MlpNet([4, 5], 3, "laplacian", rng=rng, head_weight_scale=1.0)
        sched = WarmupSchedule(total_iters=100, mu0=0.05, b0=0.01)
        z = rng.normal(size=4)
        mid, _ = encode_prior(p_net, z, sched, 50)
        raw, _ = p_net.forward(z)
        np.testing.assert_allclose(mid.shift, 0.5 * raw.shift + 0.5 * 0.05, rtol=1e-12)
        np.testing.assert_allclose(mid.scale, 0.5 * raw.scale + 0.5 * 0.01, rtol=1e-12)

    def test_prior_backward_matches_finite_differences(self):
        rng = np.random.default_rng(17)
        p_net = MlpNet([4, 5], 2, "laplacian", rng=rng, head_weight_scale=1.0)
        sched = WarmupSchedule(total_iters=100, mu0=0.05, b0=0.01)
        z = rng.normal(size=(3, 4))
        w_shift = rng.normal(size=(3, 2))
        w_scale = rng.normal(size=(3, 2))

        def value():
            p, _ = encode_prior(p_net, z, sched, 30)
            return float(np.sum(w_shift * p.shift) + np.sum(w_scale * p.scale))

        _, cache = encode_prior(p_net, z, sched, 30)
        grads = prior_backward(p_net, cache, w_shift, w_scale)
        for g, p in zip(grads, p_net.parameters()):
            fd = finite_diff(value, p)
            assert np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-10) < 1e-4


class TestEma:
    def test_zero_decay_tracks_current(self):
        rng = np.random.default_rng(18)
        net = MlpNet([3, 4], 2, rng=rng)
        ema = EmaState(net, decay=0.0)
        for p in net.parameters():
            p += 1.0
        net.mark_updated()
        ema_update(ema, net)
        for s, p in zip(ema.shadow, net.parameters()):
            np.testing.assert_array_equal(s, p)

    def test_geometric_convergence(self):
        rng = np.random.default_rng(19)
        net = MlpNet([2, 3], 2, rng=rng)
        ema = EmaState(net, decay=0.9)
        for s in ema.shadow:
            s[...] = 0.0
        for _ in range(200):
            ema_update(ema, net)
        for s, p in zip(ema.shadow, net.parameters()):
            np.testing.assert_allclose(s, p, atol=1e-8)

    def test_default_paper_decay(self):
        net = MlpNet([2], 2, rng=np.random.default_rng(20))
        assert EmaState(net).decay == 0.999

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(21)
        a = MlpNet([3, 4], 2, rng=rng)
        b = MlpNet([3, 5], 2, rng=rng)
        ema = EmaState(a)
        with pytest.raises(ValueError):
            ema_update(ema, b)

    def test_network_carries_shadow(self):
        rng = np.random.default_rng(22)
        net = MlpNet([3, 4], 2, rng=rng)
        ema = EmaState(net, decay=0.5)
        for p in net.parameters():
            p += 2.0
        net.mark_updated()
        frozen = ema.network(net)
        for s, p in zip(ema.shadow, frozen.parameters()):
            np.testing.assert_array_equal(s, p)


class TestMisc:
    def test_clamped_scale_stays_in_interval_after_updates(self):
        rng = np.random.default_rng(23)
        net = MlpNet([3, 8], 2, "laplacian", log_scale_clamp=(-2.0, 0.5),
                     head_weight_scale=1.0, rng=rng)
        opt = AdamWState.for_net(net)
        x = rng.normal(size=(16, 3))
        for _ in range(50):
            params, cache = net.forward(x)
            upstream = (rng.normal(size=params.shift.shape),
                        rng.normal(size=params.shift.shape))
            grads, _ = net.backward(cache, upstream)
            adamw_update(net, grads, opt, lr=0.05)
            params, _ = net.forward(x)
            assert np.all(params.log_scale >= -2.0) and np.all(params.log_scale <= 0.5)

    def test_cross_entropy_gradient(self):
        rng = np.random.default_rng(24)
        logits = rng.normal(size=(6, 4))
        labels = rng.integers(0, 4, size=6)

        def value():
            return cross_entropy(logits, labels)[0]

        _, d = cross_entropy(logits, labels)
        fd = finite_diff(value, logits, h=1e-6)
        np.testing.assert_allclose(d, fd, rtol=1e-5, atol=1e-9)

    def test_checkpoint_roundtrip_exact(self, tmp_path):
        rng = np.random.default_rng(25)
        net = MlpNet([4, 6], 3, "laplacian", log_scale_clamp=(-3, 1),
                     head_weight_scale=0.5, log_scale_bias=-1.0, rng=rng)
        save_mlp(net, tmp_path / "net.json")
        back = load_mlp(tmp_path / "net.json")
        assert back.layer_dims == net.layer_dims and back.head == net.head
        for a, b in zip(back.parameters(), net.parameters()):
            assert np.array_equal(a, b)
        x = rng.normal(size=(2, 4))
        pa, _ = net.forward(x)
        pb, _ = back.forward(x)
        assert np.array_equal(pa.shift, pb.shift)

    def test_sampling_through_encoder_params(self):
        # encoder -> params -> reparameterized sample stays finite and uses
        # the clamped scale
        rng = np.random.default_rng(26)
        q = MlpNet([6, 5], 3, "laplacian", head_weight_scale=1.0, rng=rng)
        params, _ = encode_posterior(q, rng.normal(size=3), rng.normal(size=3))
        s, noise = sample_laplacian(params, rng)
        assert np.all(np.isfinite(s)) and s.shape == (3,)
