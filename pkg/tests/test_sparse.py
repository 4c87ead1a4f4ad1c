"""Sparse tensor and convolution engine tests against brute-force oracles."""

import numpy as np
import pytest

from carnet import sparse
from oracles import dense_conv_oracle, fd_grad, max_rel_err, random_geometry


class TestPackedKeys:
    def test_roundtrip(self):
        rng = np.random.default_rng(0)
        coords = rng.integers(-5000, 5000, size=(500, 3))
        keys = sparse.pack_coords(coords)
        np.testing.assert_array_equal(sparse.unpack_keys(keys), coords)

    def test_key_order_is_lexicographic(self):
        rng = np.random.default_rng(1)
        coords = rng.integers(-40, 40, size=(300, 3))
        by_key = np.argsort(sparse.pack_coords(coords), kind="stable")
        by_lex = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))
        np.testing.assert_array_equal(by_key, by_lex)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            sparse.pack_coords(np.array([[1 << 20, 0, 0]]))


class TestSparseTensor:
    def test_from_points_sorts(self):
        coords = np.array([[2, 0, 0], [0, 0, 0], [1, 1, 1]])
        feats = np.array([[2.0], [0.0], [1.0]])
        t = sparse.SparseTensor.from_points(coords, feats)
        np.testing.assert_array_equal(t.coords[:, 0], [0, 1, 2])
        np.testing.assert_array_equal(t.feats[:, 0], [0.0, 1.0, 2.0])

    def test_duplicates_rejected(self):
        coords = np.array([[0, 0, 0], [0, 0, 0]])
        with pytest.raises(ValueError):
            sparse.SparseTensor.from_points(coords, np.zeros((2, 1)))

    def test_unsorted_rejected(self):
        coords = np.array([[1, 0, 0], [0, 0, 0]])
        with pytest.raises(ValueError):
            sparse.SparseTensor(coords, np.zeros((2, 1)))

    def test_stride_divisibility_enforced(self):
        with pytest.raises(ValueError):
            sparse.SparseTensor(np.array([[1, 0, 0]]), np.zeros((1, 1)), stride=2)

    def test_rows_of(self):
        coords = np.array([[0, 0, 0], [0, 0, 2], [4, 0, 0]])
        t = sparse.SparseTensor(coords, np.zeros((3, 1)))
        queries = np.array([[4, 0, 0], [1, 1, 1], [0, 0, 2], [-3, 0, 0]])
        np.testing.assert_array_equal(t.rows_of(queries), [2, -1, 1, -1])

    def test_build_index_bijection(self):
        rng = np.random.default_rng(2)
        coords = random_geometry(rng, 50)
        t = sparse.SparseTensor.from_points(coords, np.zeros((50, 1)))
        index = sparse.build_index(t.coords)
        assert len(index) == 50
        for i, row in enumerate(t.coords):
            assert index[tuple(row)] == i


class TestKernelOffsets:
    def test_k1(self):
        np.testing.assert_array_equal(sparse.kernel_offsets(1), [[0, 0, 0]])

    def test_k3_order(self):
        offs = sparse.kernel_offsets(3)
        assert offs.shape == (27, 3)
        np.testing.assert_array_equal(offs[0], [-1, -1, -1])
        np.testing.assert_array_equal(offs[13], [0, 0, 0])
        np.testing.assert_array_equal(offs[26], [1, 1, 1])
        # lexicographic: keys strictly increasing
        keys = sparse.pack_coords(offs)
        assert np.all(np.diff(keys) > 0)

    def test_even_k_rejected(self):
        with pytest.raises(ValueError):
            sparse.kernel_offsets(2)


class TestDownsample:
    def test_floor_rule(self):
        coords = np.array([[0, 0, 0], [1, 0, 0], [3, 5, 7], [2, 4, 6]])
        got = sparse.downsample_coords(coords, stride=1)
        want = np.array([[0, 0, 0], [2, 4, 6]])
        np.testing.assert_array_equal(got, want)

    def test_respects_stride_units(self):
        coords = np.array([[0, 0, 0], [2, 0, 0], [4, 0, 0], [6, 0, 0]])
        got = sparse.downsample_coords(coords, stride=2)
        np.testing.assert_array_equal(got, [[0, 0, 0], [4, 0, 0]])


class TestConvolution:
    def _check_against_oracle(self, rng, n, k, stride, c_in, c_out, in_stride=1):
        coords = random_geometry(rng, n, stride=in_stride)
        feats = rng.normal(size=(len(coords), c_in))
        t = sparse.SparseTensor.from_points(coords, feats, stride=in_stride)
        weights = rng.normal(size=(k**3, c_in, c_out))
        bias = rng.normal(size=c_out)
        kmap = sparse.build_kernel_map(t, k, stride)
        out = sparse.sparse_conv(t, weights, bias, kmap)
        want = dense_conv_oracle(t.coords, t.feats, weights, bias, k, stride, in_stride)
        assert out.num_voxels == len(want)
        for j, q in enumerate(out.coords):
            err = max_rel_err(out.feats[j], want[tuple(q)])
            assert err <= 1e-12

    def test_matches_dense_embedding(self):
        rng = np.random.default_rng(3)
        for trial in range(25):
            k = rng.choice([1, 3])
            stride = rng.choice([1, 2])
            n = int(rng.integers(1, 60))
            c_in = int(rng.integers(1, 5))
            c_out = int(rng.integers(1, 5))
            self._check_against_oracle(rng, n, int(k), int(stride), c_in, c_out)

    def test_matches_dense_embedding_at_coarse_level(self):
        rng = np.random.default_rng(4)
        for trial in range(5):
            self._check_against_oracle(rng, 40, 3, 2, 2, 3, in_stride=2)

    def test_stride1_preserves_coords(self):
        rng = np.random.default_rng(5)
        coords = random_geometry(rng, 30)
        t = sparse.SparseTensor.from_points(coords, rng.normal(size=(30, 2)))
        kmap = sparse.build_kernel_map(t, 3, 1)
        out = sparse.sparse_conv(t, rng.normal(size=(27, 2, 2)), None, kmap)
        np.testing.assert_array_equal(out.coords, t.coords)
        assert out.stride == t.stride

    def test_stride2_output_is_downsampled_set(self):
        rng = np.random.default_rng(6)
        coords = random_geometry(rng, 50)
        t = sparse.SparseTensor.from_points(coords, rng.normal(size=(50, 2)))
        kmap = sparse.build_kernel_map(t, 3, 2)
        out = sparse.sparse_conv(t, rng.normal(size=(27, 2, 2)), None, kmap)
        np.testing.assert_array_equal(out.coords, sparse.downsample_coords(coords, 1))
        assert out.stride == 2

    def test_k1_stride1_is_pointwise(self):
        rng = np.random.default_rng(7)
        coords = random_geometry(rng, 20)
        feats = rng.normal(size=(20, 3))
        t = sparse.SparseTensor.from_points(coords, feats)
        w = rng.normal(size=(1, 3, 4))
        b = rng.normal(size=4)
        kmap = sparse.build_kernel_map(t, 1, 1)
        out = sparse.sparse_conv(t, w, b, kmap)
        np.testing.assert_allclose(out.feats, t.feats @ w[0] + b, rtol=1e-14)


class TestTransposedConvolution:
    def test_adjoint_identity(self):
        rng = np.random.default_rng(8)
        for trial in range(10):
            coords = random_geometry(rng, int(rng.integers(5, 60)))
            c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            x = sparse.SparseTensor.from_points(
                coords, rng.normal(size=(len(coords), c_in))
            )
            kmap = sparse.build_kernel_map(x, 3, 2)
            w = rng.normal(size=(27, c_in, c_out))
            y_feats = rng.normal(size=(kmap.n_out, c_out))
            y = sparse.SparseTensor(kmap.out_coords, y_feats, kmap.out_stride)
            fwd = sparse.sparse_conv(x, w, None, kmap)
            back = sparse.sparse_conv_transpose(y, w, kmap)
            lhs = float(np.sum(fwd.feats * y.feats))
            rhs = float(np.sum(x.feats * back.feats))
            assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))

    def test_output_lands_on_fine_coords(self):
        rng = np.random.default_rng(9)
        coords = random_geometry(rng, 30)
        x = sparse.SparseTensor.from_points(coords, rng.normal(size=(30, 2)))
        kmap = sparse.build_kernel_map(x, 3, 2)
        y = sparse.SparseTensor(
            kmap.out_coords, rng.normal(size=(kmap.n_out, 3)), kmap.out_stride
        )
        out = sparse.sparse_conv_transpose(y, rng.normal(size=(27, 2, 3)), kmap)
        np.testing.assert_array_equal(out.coords, x.coords)
        assert out.stride == 1


class TestConvGradients:
    def test_conv_backward_matches_fd(self):
        rng = np.random.default_rng(10)
        for stride in (1, 2):
            coords = random_geometry(rng, 15, box=4)
            feats = rng.normal(size=(15, 2))
            t = sparse.SparseTensor.from_points(coords, feats)
            w = rng.normal(size=(27, 2, 3))
            b = rng.normal(size=3)
            kmap = sparse.build_kernel_map(t, 3, stride)
            proj = rng.normal(size=(kmap.n_out, 3))

            def loss():
                out = sparse.sparse_conv(t, w, b, kmap)
                return float(np.sum(out.feats * proj))

            g_in, g_w, g_b = sparse.sparse_conv_backward(t, w, kmap, proj)
            assert max_rel_err(g_in, fd_grad(loss, t.feats)) <= 1e-6
            assert max_rel_err(g_w, fd_grad(loss, w)) <= 1e-6
            assert max_rel_err(g_b, fd_grad(loss, b)) <= 1e-6

    def test_transpose_backward_matches_fd(self):
        rng = np.random.default_rng(11)
        coords = random_geometry(rng, 15, box=4)
        x = sparse.SparseTensor.from_points(coords, rng.normal(size=(15, 2)))
        kmap = sparse.build_kernel_map(x, 3, 2)
        w = rng.normal(size=(27, 2, 3))
        y_feats = rng.normal(size=(kmap.n_out, 3))
        y = sparse.SparseTensor(kmap.out_coords, y_feats, kmap.out_stride)
        proj = rng.normal(size=(kmap.n_in, 2))

        def loss():
            out = sparse.sparse_conv_transpose(y, w, kmap)
            return float(np.sum(out.feats * proj))

        g_in, g_w = sparse.sparse_conv_transpose_backward(y, w, kmap, proj)
        assert max_rel_err(g_in, fd_grad(loss, y.feats)) <= 1e-6
        assert max_rel_err(g_w, fd_grad(loss, w)) <= 1e-6


class TestPoolingAndUpsampling:
    def test_pool_counts_and_means(self):
        coords = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]])
        feats = np.array([[1.0], [3.0], [10.0]])
        t = sparse.SparseTensor(coords, feats)
        coarse, inverse, counts = sparse.sparse_avg_pool(t)
        np.testing.assert_array_equal(coarse.coords, [[0, 0, 0], [2, 0, 0]])
        np.testing.assert_allclose(coarse.feats[:, 0], [2.0, 10.0])
        np.testing.assert_array_equal(counts, [2, 1])
        np.testing.assert_array_equal(inverse, [0, 0, 1])
        assert coarse.stride == 2

    def test_upsample_copies_owner_value(self):
        coords = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]])
        t = sparse.SparseTensor(coords, np.array([[1.0], [3.0], [10.0]]))
        coarse, _, _ = sparse.sparse_avg_pool(t)
        fine, inverse = sparse.sparse_upsample(coarse, coords)
        np.testing.assert_allclose(fine.feats[:, 0], [2.0, 2.0, 10.0])
        np.testing.assert_array_equal(inverse, [0, 0, 1])
        assert fine.stride == 1

    def test_pool_upsample_idempotent(self):
        rng = np.random.default_rng(12)
        for trial in range(20):
            coords = random_geometry(rng, int(rng.integers(4, 80)))
            t = sparse.SparseTensor.from_points(
                coords, rng.normal(size=(len(coords), 3))
            )

            def smooth(x):
                coarse, _, _ = sparse.sparse_avg_pool(x)
                fine, _ = sparse.sparse_upsample(coarse, x.coords)
                return fine

            once = smooth(t)
            twice = smooth(once)
            np.testing.assert_array_equal(once.feats, twice.feats)

    def test_constant_field_survives_roundtrip(self):
        rng = np.random.default_rng(13)
        coords = random_geometry(rng, 40)
        t = sparse.SparseTensor.from_points(coords, np.full((40, 2), 0.73))
        coarse, _, _ = sparse.sparse_avg_pool(t)
        fine, _ = sparse.sparse_upsample(coarse, t.coords)
        np.testing.assert_array_equal(fine.feats, t.feats)

    def test_upsample_missing_cell_raises(self):
        t = sparse.SparseTensor(np.array([[0, 0, 0]]), np.ones((1, 1)), stride=2)
        with pytest.raises(ValueError):
            sparse.sparse_upsample(t, np.array([[5, 5, 5]]))

    def test_pool_backward_matches_fd(self):
        rng = np.random.default_rng(14)
        coords = random_geometry(rng, 20, box=4)
        feats = rng.normal(size=(20, 2))
        t = sparse.SparseTensor.from_points(coords, feats)
        _, inverse, counts = sparse.sparse_avg_pool(t)
        n_coarse = len(counts)
        proj = rng.normal(size=(n_coarse, 2))

        def loss():
            coarse, _, _ = sparse.sparse_avg_pool(t)
            return float(np.sum(coarse.feats * proj))

        got = sparse.sparse_avg_pool_backward(proj, inverse, counts)
        assert max_rel_err(got, fd_grad(loss, t.feats)) <= 1e-6

    def test_upsample_backward_matches_fd(self):
        rng = np.random.default_rng(15)
        coords = random_geometry(rng, 20, box=4)
        t = sparse.SparseTensor.from_points(coords, rng.normal(size=(20, 2)))
        coarse, _, _ = sparse.sparse_avg_pool(t)
        _, inverse = sparse.sparse_upsample(coarse, t.coords)
        proj = rng.normal(size=(t.num_voxels, 2))

        def loss():
            fine, _ = sparse.sparse_upsample(coarse, t.coords)
            return float(np.sum(fine.feats * proj))

        got = sparse.sparse_upsample_backward(proj, inverse, coarse.num_voxels)
        assert max_rel_err(got, fd_grad(loss, coarse.feats)) <= 1e-6
