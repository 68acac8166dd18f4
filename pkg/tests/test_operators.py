"""Operator dictionaries: transport, manifold loss, init, updates."""

import numpy as np
import pytest
import scipy.linalg

from lieops.operators import (
    InitConfig,
    OperatorDictionary,
    distance_improvement,
    frobenius_penalty,
    grad_clip_and_step,
    init_dictionary,
    load_dictionary,
    manifold_loss,
    manifold_loss_values,
    operator_frobenius_norms,
    save_dictionary,
    transport,
)


def random_dict(rng, m=3, dim=6, b=2, scale=0.5):
    ops = rng.normal(size=(m, dim // b, b, b)) * scale
    return OperatorDictionary(ops, dim)


def finite_diff(f, x, h=1e-5):
    g = np.zeros_like(x)
    flat_x, flat_g = x.reshape(-1), g.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        up = f()
        flat_x[i] = orig - h
        down = f()
        flat_x[i] = orig
        flat_g[i] = (up - down) / (2 * h)
    return g


class TestTransport:
    def test_zero_coefficients_identity(self):
        rng = np.random.default_rng(0)
        d = random_dict(rng)
        z = rng.normal(size=6)
        np.testing.assert_allclose(transport(d, np.zeros(3), z), z, rtol=1e-14)

    def test_rotation_by_pi(self):
        ops = np.array([[[[0.0, -1.0], [1.0, 0.0]]]])
        d = OperatorDictionary(ops, 2)
        out = transport(d, np.array([np.pi]), np.array([1.0, 0.0]))
        assert np.max(np.abs(out - np.array([-1.0, 0.0]))) < 1e-10

    def test_equal_blocks_keep_symmetry(self):
        rng = np.random.default_rng(1)
        block = rng.normal(size=(1, 1, 2, 2))
        ops = np.concatenate([block, block], axis=1)  # two identical blocks
        d = OperatorDictionary(ops, 4)
        z_half = rng.normal(size=2)
        z = np.concatenate([z_half, z_half])
        out = transport(d, np.array([0.7]), z)
        np.testing.assert_allclose(out[:2], out[2:], rtol=1e-14)

    def test_group_inverse_roundtrip(self):
        rng = np.random.default_rng(2)
        d = random_dict(rng, m=4, dim=8, b=4)
        for _ in range(10):
            z = rng.normal(size=8)
            c = rng.normal(size=4)
            back = transport(d, -c, transport(d, c, z))
            assert np.max(np.abs(back - z)) < 1e-8

    def test_dimension_mismatch(self):
        d = random_dict(np.random.default_rng(3))
        with pytest.raises(ValueError):
            transport(d, np.zeros(3), np.zeros(5))
        with pytest.raises(ValueError):
            transport(d, np.zeros(2), np.zeros(6))


class TestManifoldLoss:
    def test_exact_transport_zero_loss(self):
        rng = np.random.default_rng(4)
        d = random_dict(rng)
        z = rng.normal(size=6)
        c = rng.normal(size=3) * 0.3
        zp = transport(d, c, z)
        loss, grads = manifold_loss(d, z, zp, c, stop_grad_target=True)
        assert loss < 1e-20
        assert np.allclose(grads.d_zp, 0.0)

    def test_zero_coefficients_gives_pair_distance(self):
        rng = np.random.default_rng(5)
        d = random_dict(rng)
        z, zp = rng.normal(size=6), rng.normal(size=6)
        loss, _ = manifold_loss(d, z, zp, np.zeros(3))
        np.testing.assert_allclose(loss, np.sum((zp - z) ** 2), rtol=1e-12)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(6)
        for trial in range(3):
            d = random_dict(rng, m=4, dim=8, b=4, scale=0.4)
            z, zp = rng.normal(size=8), rng.normal(size=8)
            c = rng.normal(size=4) * 0.5
            _, grads = manifold_loss(d, z, zp, c, stop_grad_target=False)

            def value():
                return manifold_loss(d, z, zp, c)[0]

            for analytic, arr in [
                (grads.d_ops, d.ops), (grads.d_c, c), (grads.d_z, z), (grads.d_zp, zp),
            ]:
                fd = finite_diff(value, arr)
                assert np.linalg.norm(analytic - fd) / np.linalg.norm(fd) < 1e-5

    def test_block_equivalence_with_dense_reference(self):
        # b = d must reproduce the plain dense-exponential objective.
        rng = np.random.default_rng(7)
        m, dim = 3, 5
        ops = rng.normal(size=(m, 1, dim, dim)) * 0.4
        d = OperatorDictionary(ops, dim)
        z, zp = rng.normal(size=dim), rng.normal(size=dim)
        c = rng.normal(size=m) * 0.5
        mine = float(manifold_loss_values(d, z, zp, c))
        dense = scipy.linalg.expm(np.einsum("m,mab->ab", c, ops[:, 0]))
        ref = float(np.sum((zp - dense @ z) ** 2))
        assert abs(mine - ref) / ref < 1e-12

    def test_stop_grad_zeroes_target_gradient(self):
        rng = np.random.default_rng(8)
        d = random_dict(rng)
        z, zp = rng.normal(size=6), rng.normal(size=6)
        c = rng.normal(size=3) * 0.2
        _, on = manifold_loss(d, z, zp, c, stop_grad_target=True)
        _, off = manifold_loss(d, z, zp, c, stop_grad_target=False)
        assert np.allclose(on.d_zp, 0.0)
        assert not np.allclose(off.d_zp, 0.0)
        np.testing.assert_array_equal(on.d_z, off.d_z)


class TestInit:
    def test_default_eigenstructure(self):
        cfg = InitConfig()
        assert cfg.alpha == 1.0e-4 and cfg.beta_eig == 6.0
        d = init_dictionary(2, 4, 4, cfg, np.random.default_rng(0))
        for op in d.ops:
            eig = np.sort_complex(np.linalg.eigvals(op[0]))
            expected = np.sort_complex(
                np.array([cfg.alpha + 6.0j, cfg.alpha - 6.0j] * 2)
            )
            np.testing.assert_allclose(eig, expected, atol=1e-12)

    def test_odd_block_rejected_without_policy(self):
        with pytest.raises(ValueError):
            init_dictionary(6, 3, 3, InitConfig(), np.random.default_rng(0))

    def test_odd_block_with_trailing_cell(self):
        d = init_dictionary(6, 3, 3, InitConfig(), np.random.default_rng(0), allow_odd=True)
        block = d.ops[0, 0]
        assert block[2, 2] == InitConfig().alpha
        eig = np.linalg.eigvals(block)
        assert np.isclose(sorted(np.abs(eig.imag))[-1], 6.0)

    def test_jitter_breaks_symmetry_deterministically(self):
        a = init_dictionary(3, 4, 2, InitConfig(), np.random.default_rng(1), jitter=0.01)
        b = init_dictionary(3, 4, 2, InitConfig(), np.random.default_rng(1), jitter=0.01)
        assert np.array_equal(a.ops, b.ops)
        assert not np.array_equal(a.ops[0], a.ops[1])

    def test_without_jitter_operators_identical(self):
        d = init_dictionary(3, 4, 2, InitConfig(), np.random.default_rng(1))
        assert np.array_equal(d.ops[0], d.ops[1])


class TestDiagnostics:
    def test_distance_improvement_zero_coefficients(self):
        rng = np.random.default_rng(9)
        d = random_dict(rng)
        z, zp = rng.normal(size=6), rng.normal(size=6)
        assert distance_improvement(d, z, zp, np.zeros(3)) == pytest.approx(1.0)

    def test_distance_improvement_exact_transport(self):
        rng = np.random.default_rng(10)
        d = random_dict(rng)
        z = rng.normal(size=6)
        c = rng.normal(size=3) * 0.3
        zp = transport(d, c, z)
        assert distance_improvement(d, z, zp, c) < 1e-18

    def test_distance_improvement_identical_points(self):
        rng = np.random.default_rng(11)
        d = random_dict(rng)
        z = rng.normal(size=6)
        with pytest.raises(ValueError):
            distance_improvement(d, z, z.copy(), np.zeros(3))

    def test_frobenius_penalty(self):
        assert frobenius_penalty(OperatorDictionary(np.zeros((2, 1, 3, 3)), 3)) == 0.0
        eye = np.eye(4)[None, None]
        assert frobenius_penalty(OperatorDictionary(eye, 4)) == pytest.approx(4.0)

    def test_operator_norms_shape(self):
        d = random_dict(np.random.default_rng(12), m=5)
        assert operator_frobenius_norms(d).shape == (5,)


class TestStep:
    def test_zero_gradient_pure_decay(self):
        rng = np.random.default_rng(13)
        d = random_dict(rng)
        new = grad_clip_and_step(d, np.zeros_like(d.ops), lr=0.1, clip_norm=1.0, weight_decay=0.5)
        np.testing.assert_allclose(new.ops, d.ops * (1 - 0.1 * 0.5), rtol=1e-15)

    def test_small_gradient_unclipped(self):
        rng = np.random.default_rng(14)
        d = random_dict(rng)
        g = rng.normal(size=d.ops.shape)
        g *= 0.5 / np.sqrt(np.sum(g**2))
        new = grad_clip_and_step(d, g, lr=0.1, clip_norm=1.0, weight_decay=0.0)
        np.testing.assert_allclose(new.ops, d.ops - 0.1 * g, rtol=1e-14)

    def test_large_gradient_clipped_to_norm(self):
        rng = np.random.default_rng(15)
        d = random_dict(rng)
        g = rng.normal(size=d.ops.shape)
        g *= 10.0 / np.sqrt(np.sum(g**2))
        new = grad_clip_and_step(d, g, lr=1.0, clip_norm=1.0, weight_decay=0.0)
        applied = d.ops - new.ops
        assert np.sqrt(np.sum(applied**2)) == pytest.approx(1.0, rel=1e-12)

    def test_rejects_nonpositive_lr(self):
        d = random_dict(np.random.default_rng(16))
        with pytest.raises(ValueError):
            grad_clip_and_step(d, np.zeros_like(d.ops), lr=0.0, clip_norm=1.0, weight_decay=0.0)


class TestSerialization:
    def test_roundtrip_exact(self, tmp_path):
        d = random_dict(np.random.default_rng(17), m=4, dim=6, b=3)
        path = tmp_path / "dict.json"
        save_dictionary(d, path)
        back = load_dictionary(path)
        assert np.array_equal(back.ops, d.ops)
        assert back.dim == d.dim and back.block_size == d.block_size
