"""Autodiff core: forward oracles and finite-difference gradient checks."""

import numpy as np
import pytest

from geopool import autodiff as ad


def fd_grad(build, arrays, h=1e-5):
    """Central finite differences of a scalar graph w.r.t. each input array.

    ``build`` maps a list of float64 arrays to a scalar Value; the graph is
    rebuilt per perturbation so no state leaks between evaluations.
    """
    grads = []
    for i, base in enumerate(arrays):
        g = np.zeros_like(base)
        flat = g.reshape(-1)
        for j in range(base.size):
            bumped = [a.copy() for a in arrays]
            bumped[i].reshape(-1)[j] += h
            hi = float(build(bumped).data)
            bumped[i].reshape(-1)[j] -= 2 * h
            lo = float(build(bumped).data)
            flat[j] = (hi - lo) / (2 * h)
        grads.append(g)
    return grads


def check_grads(build, arrays, rtol=1e-4, atol=1e-6):
    vals = [ad.Value(a.copy()) for a in arrays]
    root = build(vals)
    ad.backward(root)
    want = fd_grad(lambda arrs: build([ad.Value(a) for a in arrs]), arrays)
    for v, w in zip(vals, want):
        np.testing.assert_allclose(v.grad, w, rtol=rtol, atol=atol)


class TestMatmul:
    def test_identity(self):
        a = np.arange(6, dtype=np.float64).reshape(2, 3)
        out = ad.matmul(ad.Value(np.eye(2)), ad.Value(a))
        np.testing.assert_array_equal(out.data, a)

    def test_annihilator(self):
        rng = np.random.default_rng(1)
        a = ad.Value(rng.standard_normal((3, 4)))
        out = ad.matmul(a, ad.Value(np.zeros((4, 2))))
        np.testing.assert_array_equal(out.data, np.zeros((3, 2)))

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        want = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    want[i, j] += a[i, k] * b[k, j]
        out = ad.matmul(ad.Value(a), ad.Value(b))
        np.testing.assert_allclose(out.data, want, rtol=0, atol=1e-12)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ad.DimensionError, match=r"\(3, 4\).*\(3, 2\)"):
            ad.matmul(ad.Value(np.zeros((3, 4))), ad.Value(np.zeros((3, 2))))

    def test_grad(self):
        rng = np.random.default_rng(3)
        arrays = [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))]
        check_grads(lambda v: ad.mean_all(ad.matmul(v[0], v[1])), arrays)


class TestSoftmaxRows:
    def test_symmetry(self):
        out = ad.softmax_rows(ad.Value(np.array([[0.0, 0.0]])), 1.0)
        np.testing.assert_allclose(out.data, [[0.5, 0.5]])

    def test_single_column(self):
        out = ad.softmax_rows(ad.Value(np.array([[3.0], [-1.0]])), 2.0)
        np.testing.assert_allclose(out.data, [[1.0], [1.0]])

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((5, 7))
        s = np.sqrt(7.0)
        out = ad.softmax_rows(ad.Value(x), s)
        e = np.exp(x / s)
        np.testing.assert_allclose(out.data, e / e.sum(1, keepdims=True), rtol=1e-12)
        np.testing.assert_allclose(out.data.sum(axis=1), np.ones(5), rtol=0, atol=1e-9)
        assert (out.data > 0).all()

    def test_nonfinite_rejected(self):
        with pytest.raises(ad.NumericError):
            ad.softmax_rows(ad.Value(np.array([[1.0, np.inf]])), 1.0)

    def test_bad_scale_rejected(self):
        with pytest.raises(ad.DimensionError):
            ad.softmax_rows(ad.Value(np.zeros((1, 2))), 0.0)

    def test_grad(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((4, 5))
        w = rng.standard_normal((4, 5))  # fixed mixing so the scalar sees all outputs

        def build(v):
            return ad.mean_all(ad.mul(ad.softmax_rows(v[0], np.sqrt(5.0)), ad.Value(w)))

        check_grads(build, [x])


class TestGroupMaxpool:
    def test_single_element_groups_identity(self):
        rng = np.random.default_rng(6)
        f = rng.standard_normal((4, 3))
        out = ad.group_maxpool(ad.Value(f), [[0], [1], [2], [3]])
        np.testing.assert_array_equal(out.data, f)

    def test_elementwise_max(self):
        f = np.array([[1.0, 5.0], [3.0, 2.0]])
        out = ad.group_maxpool(ad.Value(f), [[0, 1]])
        np.testing.assert_array_equal(out.data, [[3.0, 5.0]])

    def test_matches_scan_oracle(self):
        rng = np.random.default_rng(7)
        f = rng.standard_normal((20, 4))
        groups = [rng.choice(20, size=rng.integers(1, 9), replace=False)
                  for _ in range(5)]
        out = ad.group_maxpool(ad.Value(f), groups)
        for gi, grp in enumerate(groups):
            for c in range(4):
                best = f[grp[0], c]
                for r in grp[1:]:
                    if f[r, c] > best:
                        best = f[r, c]
                assert out.data[gi, c] == best

    def test_empty_group_rejected(self):
        with pytest.raises(ad.DimensionError):
            ad.group_maxpool(ad.Value(np.zeros((3, 2))), [[0], []])

    def test_tie_routes_to_lowest_index(self):
        # rows 1 and 3 are identical; group listed in descending order on purpose
        f = np.array([[0.0, 0.0], [2.0, 7.0], [1.0, 1.0], [2.0, 7.0]])
        v = ad.Value(f)
        out = ad.group_maxpool(v, [np.array([3, 2, 1])])
        ad.backward(ad.sum_all(out))
        want = np.zeros_like(f)
        want[1] = 1.0
        np.testing.assert_array_equal(v.grad, want)

    def test_grad(self):
        rng = np.random.default_rng(8)
        f = rng.standard_normal((12, 3))  # continuous draws: ties have measure zero
        groups = [np.array([0, 5, 7]), np.array([1, 2]), np.array([3, 8, 9, 11])]
        check_grads(lambda v: ad.mean_all(ad.group_maxpool(v[0], groups)), [f])


class TestBackward:
    def test_sum_gives_ones(self):
        a = ad.Value(np.arange(6, dtype=np.float64).reshape(2, 3))
        ad.backward(ad.sum_all(a))
        np.testing.assert_array_equal(a.grad, np.ones((2, 3)))

    def test_quadratic_gives_two_a(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((3, 4))
        a = ad.Value(x)
        ad.backward(ad.sum_all(ad.mul(a, a)))
        np.testing.assert_allclose(a.grad, 2 * x, rtol=1e-12)

    def test_root_grad_is_one(self):
        root = ad.sum_all(ad.Value(np.ones(3)))
        ad.backward(root)
        np.testing.assert_array_equal(root.grad, np.asarray(1.0))

    def test_nonscalar_root_rejected(self):
        with pytest.raises(ad.DimensionError):
            ad.backward(ad.Value(np.zeros((2, 2))))

    def test_dag_visits_each_node_once(self):
        # diamond: a feeds both branches, which meet at an add
        a = ad.Value(np.ones((2, 2)))
        left = ad.relu(a)
        right = ad.scale(a, 2.0)
        out = ad.sum_all(ad.add(left, right))
        assert ad.backward(out) == 5  # a, relu, scale, add, sum
        np.testing.assert_array_equal(a.grad, np.full((2, 2), 3.0))

    def test_repeat_backward_accumulates_leaf_grads(self):
        a = ad.Value(np.ones(4))
        root = ad.sum_all(ad.scale(a, 3.0))
        ad.backward(root)
        ad.backward(root)
        np.testing.assert_array_equal(a.grad, np.full(4, 6.0))
        a.zero_grad()
        ad.backward(root)
        np.testing.assert_array_equal(a.grad, np.full(4, 3.0))

    def test_composed_graph_finite_differences(self):
        rng = np.random.default_rng(10)
        arrays = [rng.standard_normal((5, 3)),
                  rng.standard_normal((3, 4)),
                  rng.standard_normal(4)]

        def build(v):
            h = ad.relu(ad.add(ad.matmul(v[0], v[1]), v[2]))
            s = ad.softmax_rows(h, 2.0)
            return ad.mean_all(ad.mul(s, h))

        check_grads(build, arrays)


class TestElementwiseOps:
    def test_add_shape_error(self):
        with pytest.raises(ad.DimensionError):
            ad.add(ad.Value(np.zeros((2, 3))), ad.Value(np.zeros((3, 2))))

    def test_bias_broadcast_grad(self):
        rng = np.random.default_rng(11)
        arrays = [rng.standard_normal((6, 3)), rng.standard_normal(3)]
        check_grads(lambda v: ad.mean_all(ad.add(v[0], v[1])), arrays)

    def test_mul_add_relu_grads(self):
        rng = np.random.default_rng(12)
        a = rng.standard_normal((4, 3)) + 0.3  # keep relu inputs off the kink
        b = rng.standard_normal((4, 3))

        def build(v):
            return ad.mean_all(ad.relu(ad.add(ad.mul(v[0], v[1]), v[0])))

        check_grads(build, [a, b])

    def test_scale_grad(self):
        rng = np.random.default_rng(13)
        check_grads(lambda v: ad.sum_all(ad.scale(v[0], -1.7)),
                    [rng.standard_normal((3, 2))])

    def test_dtype_mismatch_rejected(self):
        a = ad.Value(np.zeros((2, 2)), dtype=np.float32)
        b = ad.Value(np.zeros((2, 2)), dtype=np.float64)
        with pytest.raises(ad.DimensionError):
            ad.add(a, b)

    def test_float32_mode_preserved(self):
        a = ad.Value(np.ones((2, 3)), dtype=np.float32)
        w = ad.Value(np.ones((3, 2)), dtype=np.float32)
        out = ad.softmax_rows(ad.relu(ad.matmul(a, w)), 2.0)
        assert out.data.dtype == np.float32


class TestStructuralOps:
    def test_concat_cols_grad(self):
        rng = np.random.default_rng(14)
        arrays = [rng.standard_normal((4, 2)), rng.standard_normal((4, 3))]
        check_grads(lambda v: ad.mean_all(ad.concat_cols(v)), arrays)

    def test_concat_row_mismatch(self):
        with pytest.raises(ad.DimensionError):
            ad.concat_cols([ad.Value(np.zeros((2, 2))), ad.Value(np.zeros((3, 2)))])

    def test_gather_rows_forward(self):
        a = ad.Value(np.arange(8, dtype=np.float64).reshape(4, 2))
        out = ad.gather_rows(a, np.array([2, 0, 2]))
        np.testing.assert_array_equal(out.data, [[4, 5], [0, 1], [4, 5]])

    def test_gather_duplicate_index_accumulates(self):
        rng = np.random.default_rng(15)
        idx = np.array([0, 3, 3, 1])
        arrays = [rng.standard_normal((5, 2))]
        check_grads(lambda v: ad.mean_all(ad.gather_rows(v[0], idx)), arrays)

    def test_scatter_rows_roundtrip(self):
        rng = np.random.default_rng(16)
        idx = np.array([1, 4, 1, 0])
        src = rng.standard_normal((4, 3))
        out = ad.scatter_rows(ad.Value(src), idx, 5)
        want = np.zeros((5, 3))
        np.add.at(want, idx, src)
        np.testing.assert_allclose(out.data, want, rtol=1e-15)
        check_grads(lambda v: ad.mean_all(ad.scatter_rows(v[0], idx, 5)), [src])

    def test_gather_out_of_range(self):
        with pytest.raises(ad.DimensionError):
            ad.gather_rows(ad.Value(np.zeros((3, 2))), np.array([3]))

    def test_slice_first_grad(self):
        rng = np.random.default_rng(17)
        arrays = [rng.standard_normal((3, 4, 2))]
        check_grads(lambda v: ad.mean_all(ad.slice_first(v[0], 1)), arrays)

    def test_tile_rows_grad(self):
        rng = np.random.default_rng(18)
        arrays = [rng.standard_normal(5)]
        check_grads(lambda v: ad.mean_all(ad.tile_rows(v[0], 4)), arrays)
        out = ad.tile_rows(ad.Value(np.array([1.0, 2.0])), 3)
        assert out.data.shape == (3, 2)

    def test_transpose_forward_and_grad(self):
        rng = np.random.default_rng(19)
        a = rng.standard_normal((3, 5))
        out = ad.transpose(ad.Value(a))
        np.testing.assert_array_equal(out.data, a.T)
        check_grads(
            lambda v: ad.sum_all(ad.matmul(ad.transpose(v[0]), v[0])), [a])
        with pytest.raises(ad.DimensionError):
            ad.transpose(ad.Value(np.zeros(3)))

    def test_no_grad_detaches_but_keeps_forward(self):
        rng = np.random.default_rng(20)
        a, b = rng.standard_normal((2, 4, 4))
        full = ad.relu(ad.matmul(ad.Value(a), ad.Value(b)))
        with ad.no_grad():
            bare = ad.relu(ad.matmul(ad.Value(a), ad.Value(b)))
        np.testing.assert_array_equal(bare.data, full.data)
        assert bare.is_leaf and not full.is_leaf
        assert ad._GRAD_ENABLED  # restored on exit


class TestNormalizationAndLoss:
    def test_layer_norm_rows_standardized(self):
        rng = np.random.default_rng(19)
        x = rng.standard_normal((6, 8)) * 3 + 1
        out = ad.layer_norm(ad.Value(x), ad.Value(np.ones(8)), ad.Value(np.zeros(8)))
        np.testing.assert_allclose(out.data.mean(axis=1), np.zeros(6), atol=1e-12)
        np.testing.assert_allclose(out.data.std(axis=1), np.ones(6), rtol=1e-4)

    def test_layer_norm_grad(self):
        rng = np.random.default_rng(20)
        arrays = [rng.standard_normal((5, 6)),
                  rng.standard_normal(6),
                  rng.standard_normal(6)]
        check_grads(lambda v: ad.mean_all(ad.layer_norm(v[0], v[1], v[2])), arrays)

    def test_cross_entropy_matches_log_softmax_oracle(self):
        rng = np.random.default_rng(21)
        logits = rng.standard_normal((7, 4))
        labels = rng.integers(0, 4, size=7)
        out = ad.cross_entropy_rows(ad.Value(logits), labels)
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_p = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        want = -log_p[np.arange(7), labels].mean()
        np.testing.assert_allclose(float(out.data), want, rtol=1e-12)

    def test_cross_entropy_grad(self):
        rng = np.random.default_rng(22)
        labels = rng.integers(0, 3, size=5)
        arrays = [rng.standard_normal((5, 3))]
        check_grads(lambda v: ad.cross_entropy_rows(v[0], labels), arrays)

    def test_cross_entropy_label_out_of_range(self):
        with pytest.raises(ad.DimensionError):
            ad.cross_entropy_rows(ad.Value(np.zeros((2, 3))), np.array([0, 3]))

    def test_uniform_logits_give_log_c(self):
        out = ad.cross_entropy_rows(ad.Value(np.zeros((4, 5))), np.arange(4))
        np.testing.assert_allclose(float(out.data), np.log(5.0), rtol=1e-12)
