"""Layer forward/backward tests: finite differences and algebraic checks."""

import numpy as np
import pytest

from carnet import layers, sparse
from oracles import fd_grad, max_rel_err, random_geometry


def make_tensor(rng, n=15, c=4, box=4):
    coords = random_geometry(rng, n, box=box)
    return sparse.SparseTensor.from_points(coords, rng.normal(size=(n, c)))


class TestElementwiseOps:
    def test_relu_forward(self):
        rng = np.random.default_rng(20)
        t = make_tensor(rng)
        out = layers.relu(None, t)
        np.testing.assert_array_equal(out.feats, np.maximum(t.feats, 0))

    def test_relu_backward_matches_fd(self):
        rng = np.random.default_rng(21)
        t = make_tensor(rng)
        proj = rng.normal(size=t.feats.shape)

        def loss():
            return float(np.sum(layers.relu(None, t).feats * proj))

        tape = layers.Tape()
        out = layers.relu(tape, t)
        tape.backward(out.feats, proj)
        assert max_rel_err(tape.grad(t.feats), fd_grad(loss, t.feats)) <= 1e-6

    def test_concat_and_add_backward(self):
        rng = np.random.default_rng(22)
        t = make_tensor(rng, c=2)
        u = t.with_feats(rng.normal(size=(t.num_voxels, 3)))
        proj = rng.normal(size=(t.num_voxels, 5))

        def loss():
            return float(np.sum(layers.concat(None, [t, u]).feats * proj))

        tape = layers.Tape()
        out = layers.concat(tape, [t, u])
        tape.backward(out.feats, proj)
        assert max_rel_err(tape.grad(t.feats), fd_grad(loss, t.feats)) <= 1e-6
        assert max_rel_err(tape.grad(u.feats), fd_grad(loss, u.feats)) <= 1e-6

        v = t.with_feats(rng.normal(size=t.feats.shape))
        proj2 = rng.normal(size=t.feats.shape)
        tape = layers.Tape()
        out = layers.add(tape, t, v)
        tape.backward(out.feats, proj2)
        np.testing.assert_allclose(tape.grad(t.feats), proj2)
        np.testing.assert_allclose(tape.grad(v.feats), proj2)

    def test_concat_rejects_mismatched_geometry(self):
        rng = np.random.default_rng(23)
        a = make_tensor(rng, n=10)
        b = make_tensor(rng, n=12)
        with pytest.raises(ValueError):
            layers.concat(None, [a, b])

    def test_fanout_accumulates(self):
        # x feeds both sides of an add; gradient must double
        rng = np.random.default_rng(24)
        t = make_tensor(rng)
        proj = rng.normal(size=t.feats.shape)

        def loss():
            doubled = layers.add(None, t, t)
            return float(np.sum(doubled.feats * proj))

        tape = layers.Tape()
        out = layers.add(tape, t, t)
        tape.backward(out.feats, proj)
        assert max_rel_err(tape.grad(t.feats), fd_grad(loss, t.feats)) <= 1e-6


class TestConvLayer:
    def test_pointwise_equals_kernel_map_path(self):
        rng = np.random.default_rng(25)
        t = make_tensor(rng, c=3)
        conv = layers.Conv("c", 3, 4, kernel_size=1)
        params = {}
        conv.init(rng, params)
        params["c.bias"] = rng.normal(size=4)
        out_fast = conv.apply(params, None, t)
        kmap = sparse.build_kernel_map(t, 1, 1)
        out_ref = sparse.sparse_conv(t, params["c.weight"], params["c.bias"], kmap)
        np.testing.assert_allclose(out_fast.feats, out_ref.feats, rtol=1e-14)

    def test_conv_backward_matches_fd(self):
        rng = np.random.default_rng(26)
        t = make_tensor(rng, c=2)
        conv = layers.Conv("c", 2, 3)
        params = {}
        conv.init(rng, params)
        kmap = sparse.build_kernel_map(t, 3, 1)
        proj = rng.normal(size=(t.num_voxels, 3))

        def loss():
            return float(np.sum(conv.apply(params, None, t, kmap).feats * proj))

        tape = layers.Tape()
        out = conv.apply(params, tape, t, kmap)
        tape.backward(out.feats, proj)
        assert max_rel_err(tape.grad(t.feats), fd_grad(loss, t.feats)) <= 1e-6
        for name in ("c.weight", "c.bias"):
            assert max_rel_err(tape.param_grads[name], fd_grad(loss, params[name])) <= 1e-6

    def test_transposed_conv_backward_matches_fd(self):
        rng = np.random.default_rng(27)
        fine = make_tensor(rng, c=2)
        kmap = sparse.build_kernel_map(fine, 3, 2)
        coarse = sparse.SparseTensor(
            kmap.out_coords, rng.normal(size=(kmap.n_out, 3)), kmap.out_stride
        )
        conv = layers.Conv("up", 3, 2, transposed=True)
        params = {}
        conv.init(rng, params)
        assert "up.bias" not in params
        proj = rng.normal(size=(kmap.n_in, 2))

        def loss():
            return float(np.sum(conv.apply(params, None, coarse, kmap).feats * proj))

        tape = layers.Tape()
        out = conv.apply(params, tape, coarse, kmap)
        assert out.num_voxels == fine.num_voxels
        tape.backward(out.feats, proj)
        assert max_rel_err(tape.grad(coarse.feats), fd_grad(loss, coarse.feats)) <= 1e-6
        assert (
            max_rel_err(tape.param_grads["up.weight"], fd_grad(loss, params["up.weight"]))
            <= 1e-6
        )

    def test_he_init_scale(self):
        rng = np.random.default_rng(28)
        conv = layers.Conv("c", 32, 64)
        params = {}
        conv.init(rng, params)
        std = params["c.weight"].std()
        want = np.sqrt(2.0 / (32 * 27))
        assert abs(std - want) / want < 0.05
        np.testing.assert_array_equal(params["c.bias"], 0.0)


class TestInceptionResidualBlock:
    def test_channel_split_shapes(self):
        block = layers.InceptionResidualBlock("irb", 16)
        shapes = block.param_shapes()
        assert shapes["irb.b1.weight"] == (27, 16, 8)
        assert shapes["irb.b2a.weight"] == (27, 16, 4)
        assert shapes["irb.b2b.weight"] == (27, 4, 4)
        assert shapes["irb.b3a.weight"] == (1, 16, 4)
        assert shapes["irb.b3b.weight"] == (27, 4, 4)
        assert shapes["irb.b3c.weight"] == (1, 4, 4)

    def test_rejects_indivisible_channels(self):
        with pytest.raises(ValueError):
            layers.InceptionResidualBlock("irb", 6)

    def test_zero_weights_give_identity(self):
        rng = np.random.default_rng(29)
        t = make_tensor(rng, c=8)
        block = layers.InceptionResidualBlock("irb", 8)
        params = {k: np.zeros(v) for k, v in block.param_shapes().items()}
        kmap = sparse.build_kernel_map(t, 3, 1)
        out = block.apply(params, None, t, kmap)
        np.testing.assert_array_equal(out.feats, t.feats)

    def test_backward_matches_fd(self):
        rng = np.random.default_rng(30)
        t = make_tensor(rng, n=10, c=4, box=3)
        block = layers.InceptionResidualBlock("irb", 4)
        params = {}
        block.init(rng, params)
        # zero biases park pre-activations exactly on the ReLU kink, where
        # central differences straddle the corner; shift everything off it
        for k in params:
            params[k] = params[k] + 0.1 * rng.normal(size=params[k].shape)
        kmap = sparse.build_kernel_map(t, 3, 1)
        proj = rng.normal(size=t.feats.shape)

        def loss():
            return float(np.sum(block.apply(params, None, t, kmap).feats * proj))

        tape = layers.Tape()
        out = block.apply(params, tape, t, kmap)
        tape.backward(out.feats, proj)
        assert max_rel_err(tape.grad(t.feats), fd_grad(loss, t.feats)) <= 1e-6
        for name, value in params.items():
            assert max_rel_err(tape.param_grads[name], fd_grad(loss, value)) <= 1e-6


class TestAdam:
    def test_matches_reference_recurrence(self):
        rng = np.random.default_rng(31)
        p0 = rng.normal(size=5)
        params = {"p": p0.copy()}
        opt = layers.Adam(params, lr=0.01)
        grads = [rng.normal(size=5) for _ in range(10)]

        m = np.zeros(5)
        v = np.zeros(5)
        ref = p0.copy()
        for t, g in enumerate(grads, start=1):
            assert opt.step({"p": g})
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mh = m / (1 - 0.9**t)
            vh = v / (1 - 0.999**t)
            ref -= 0.01 * mh / (np.sqrt(vh) + 1e-8)
            np.testing.assert_allclose(params["p"], ref, rtol=1e-12)

    def test_nonfinite_step_skipped(self):
        params = {"p": np.ones(3)}
        opt = layers.Adam(params, lr=0.1)
        bad = np.array([1.0, np.nan, 0.0])
        assert not opt.step({"p": bad})
        np.testing.assert_array_equal(params["p"], 1.0)
        assert opt.skipped == 1
        assert opt.t == 0
        assert opt.step({"p": np.ones(3)})
        assert opt.t == 1

    def test_quadratic_descent(self):
        params = {"p": np.array([5.0, -3.0])}
        opt = layers.Adam(params, lr=0.05)
        for _ in range(500):
            opt.step({"p": 2 * params["p"]})
        assert np.all(np.abs(params["p"]) < 0.05)
