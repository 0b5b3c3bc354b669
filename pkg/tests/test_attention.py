"""Bidirectional attention and diagonal constraint tests."""

import numpy as np
import pytest

from neufa import attention as att
from neufa import tensor as T
from neufa.errors import ConfigurationError, DimensionError
from neufa.layers import Linear
from neufa.tensor import Tensor

RNG = np.random.default_rng


def identity_linear(d):
    lin = Linear("id", d, d, RNG(0))
    lin.w.data[:] = np.eye(d)
    lin.b.data[:] = 0.0
    return lin


def test_config_validation():
    att.BiAttentionConfig(d_a=4, form="multiplicative", d_k1=2, d_k2=2, d_v1=2, d_v2=2)
    with pytest.raises(ConfigurationError):
        att.BiAttentionConfig(d_a=0, form="multiplicative", d_k1=2, d_k2=2, d_v1=2, d_v2=2)
    with pytest.raises(ConfigurationError):
        att.BiAttentionConfig(d_a=4, form="dotty", d_k1=2, d_k2=2, d_v1=2, d_v2=2)


def test_multiplicative_identity_projections():
    # identity projections on identity keys: A = I I^T = I
    eye = np.eye(3)
    a = att.shared_matrix_multiplicative(Tensor(eye), Tensor(eye), identity_linear(3), identity_linear(3))
    np.testing.assert_allclose(a.data, eye, atol=1e-12)


def test_multiplicative_zero_keys():
    f = identity_linear(3)
    a = att.shared_matrix_multiplicative(Tensor(np.zeros((2, 3))), Tensor(RNG(1).normal(size=(4, 3))), f, f)
    np.testing.assert_allclose(a.data, 0.0)


def test_multiplicative_matches_per_entry_dots():
    rng = RNG(2)
    k1, k2 = rng.normal(size=(2, 3)), rng.normal(size=(3, 3))
    f1 = Linear("f1", 3, 4, rng)
    f2 = Linear("f2", 3, 4, rng)
    a = att.shared_matrix_multiplicative(Tensor(k1), Tensor(k2), f1, f2).data
    p1 = k1 @ f1.w.data + f1.b.data
    p2 = k2 @ f2.w.data + f2.b.data
    for i in range(2):
        for j in range(3):
            assert a[i, j] == pytest.approx(float(np.dot(p1[i], p2[j])), rel=1e-12)


def test_additive_zero_rows_give_constant_rows():
    rng = RNG(3)
    k2 = rng.normal(size=(3, 2))
    f = identity_linear(2)
    fa = Linear("fa", 2, 1, rng)
    fa.w.data[:] = 1.0  # fa = sum
    fa.b.data[:] = 0.0
    a = att.shared_matrix_additive(Tensor(np.zeros((2, 2))), Tensor(k2), f, f, fa).data
    np.testing.assert_allclose(a[0], k2.sum(axis=1), atol=1e-12)
    np.testing.assert_allclose(a[0], a[1], atol=1e-12)


def test_additive_row_permutation_equivariance():
    rng = RNG(4)
    k1, k2 = rng.normal(size=(3, 2)), rng.normal(size=(2, 2))
    f1, f2 = Linear("f1", 2, 3, rng), Linear("f2", 2, 3, rng)
    fa = Linear("fa", 3, 1, rng)
    a = att.shared_matrix_additive(Tensor(k1), Tensor(k2), f1, f2, fa).data
    perm = [2, 0, 1]
    a_p = att.shared_matrix_additive(Tensor(k1[perm]), Tensor(k2), f1, f2, fa).data
    np.testing.assert_allclose(a_p, a[perm], atol=1e-12)


def test_additive_matches_per_entry_oracle():
    rng = RNG(5)
    k1, k2 = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    f1, f2 = Linear("f1", 3, 4, rng), Linear("f2", 3, 4, rng)
    fa = Linear("fa", 4, 1, rng)
    a = att.shared_matrix_additive(Tensor(k1), Tensor(k2), f1, f2, fa).data
    p1 = k1 @ f1.w.data + f1.b.data
    p2 = k2 @ f2.w.data + f2.b.data
    for i in range(2):
        for j in range(2):
            expect = float(((p1[i] + p2[j]) @ fa.w.data + fa.b.data)[0])
            assert a[i, j] == pytest.approx(expect, rel=1e-12)


def test_attend_uniform_case():
    # A = 0: every W12 column uniform, O1 rows are the mean of V1 rows
    v1 = RNG(6).normal(size=(2, 3))
    v2 = RNG(7).normal(size=(4, 5))
    out = att.bidirectional_attend(Tensor(np.zeros((2, 4))), Tensor(v1), Tensor(v2))
    np.testing.assert_allclose(out.W12.data, 0.5, atol=1e-12)
    np.testing.assert_allclose(out.O1.data, np.tile(v1.mean(axis=0), (4, 1)), atol=1e-12)
    np.testing.assert_allclose(out.W21.data, 0.25, atol=1e-12)


def test_attend_saturated_column_picks_row():
    v1 = RNG(8).normal(size=(3, 4))
    a = np.zeros((3, 2))
    a[:, 0] = [1000.0, -1000.0, -1000.0]
    out = att.bidirectional_attend(Tensor(a), Tensor(v1), Tensor(np.zeros((2, 1))))
    np.testing.assert_allclose(out.O1.data[0], v1[0], atol=1e-9)


def test_attend_swap_symmetry_exact():
    """Attending with everything transposed swaps the two directions bitwise."""
    rng = RNG(9)
    for _ in range(20):
        n1, n2 = rng.integers(1, 9, size=2)
        a = rng.normal(size=(n1, n2))
        v1 = rng.normal(size=(n1, 3))
        v2 = rng.normal(size=(n2, 4))
        fwd = att.bidirectional_attend(Tensor(a), Tensor(v1), Tensor(v2))
        swp = att.bidirectional_attend(Tensor(np.ascontiguousarray(a.T)), Tensor(v2), Tensor(v1))
        np.testing.assert_array_equal(swp.W12.data, fwd.W21.data)
        np.testing.assert_array_equal(swp.W21.data, fwd.W12.data)
        np.testing.assert_array_equal(swp.O1.data, fwd.O2.data)
        np.testing.assert_array_equal(swp.O2.data, fwd.O1.data)


def test_attend_shape_guards():
    with pytest.raises(DimensionError):
        att.bidirectional_attend(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 1))), Tensor(np.zeros((3, 1))))
    with pytest.raises(DimensionError):
        att.bidirectional_attend(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 1))), Tensor(np.zeros((2, 1))))


@pytest.mark.parametrize("seed", range(30))
def test_column_normalization_and_convexity(seed):
    rng = RNG(100 + seed)
    n1, n2 = rng.integers(1, 17, size=2)
    a = rng.normal(scale=2.0, size=(n1, n2))
    v1 = rng.normal(size=(n1, 3))
    v2 = rng.normal(size=(n2, 2))
    out = att.bidirectional_attend(Tensor(a), Tensor(v1), Tensor(v2))
    np.testing.assert_allclose(out.W12.data.sum(axis=0), 1.0, atol=1e-6)
    np.testing.assert_allclose(out.W21.data.sum(axis=0), 1.0, atol=1e-6)
    eps = 1e-12
    assert np.all(out.O1.data <= v1.max(axis=0) + eps)
    assert np.all(out.O1.data >= v1.min(axis=0) - eps)
    assert np.all(out.O2.data <= v2.max(axis=0) + eps)
    assert np.all(out.O2.data >= v2.min(axis=0) - eps)


# -- diagonal constraint --------------------------------------------------------


def test_constraint_value_on_diagonal():
    # p == q makes all four ratios 1, so the entry is tanh(0.5)
    d = att.diagonal_constraint_matrix(4, 4).D
    np.testing.assert_allclose(np.diag(d), np.tanh(0.5), atol=1e-12)
    assert np.tanh(0.5) == pytest.approx(0.46212, abs=5e-6)


def test_constraint_2x2_off_diagonal():
    # p=0.25, q=0.75: ratio max is 3, entry tanh(1.5)
    d = att.diagonal_constraint_matrix(2, 2).D
    assert d[0, 1] == pytest.approx(np.tanh(1.5), abs=1e-12)
    assert np.tanh(1.5) == pytest.approx(0.90515, abs=5e-6)
    np.testing.assert_allclose(d, d.T, atol=1e-12)


def test_constraint_range_and_row_minima():
    for n1, n2 in [(1, 1), (3, 7), (10, 10), (16, 5)]:
        d = att.diagonal_constraint_matrix(n1, n2).D
        assert np.all(d >= np.tanh(0.5) - 1e-12)
        assert np.all(d < 1.0)
    square = att.diagonal_constraint_matrix(8, 8).D
    np.testing.assert_array_equal(np.argmin(square, axis=1), np.arange(8))


def test_constraint_rejects_bad_extents():
    with pytest.raises(ConfigurationError):
        att.diagonal_constraint_matrix(0, 3)


def test_dal_uniform_closed_form():
    n1, n2 = 3, 5
    c = att.diagonal_constraint_matrix(n1, n2)
    w_tts = Tensor(np.full((n1, n2), 1.0 / n1))
    w_asr = Tensor(np.full((n2, n1), 1.0 / n2))
    got = att.diagonal_attention_loss(w_tts, w_asr, c)
    expect = np.mean((1.0 / n1 + 1.0 / n2) * c.D)
    assert got.data == pytest.approx(float(expect), rel=1e-12)


def test_dal_mass_on_diagonal():
    # all mass on p == q cells of a square map: loss = 2 tanh(0.5) / n
    n = 6
    c = att.diagonal_constraint_matrix(n, n)
    eye = np.eye(n)
    got = att.diagonal_attention_loss(Tensor(eye), Tensor(eye), c)
    assert got.data == pytest.approx(2.0 * np.tanh(0.5) / n, rel=1e-12)


@pytest.mark.parametrize("seed", range(25))
def test_dal_lower_bound(seed):
    rng = RNG(200 + seed)
    n1, n2 = rng.integers(1, 17, size=2)
    c = att.diagonal_constraint_matrix(n1, n2)
    w_tts = T.softmax(Tensor(rng.normal(size=(n1, n2))), axis=0)
    w_asr = T.softmax(Tensor(rng.normal(size=(n2, n1))), axis=0)
    got = float(att.diagonal_attention_loss(w_tts, w_asr, c).data)
    bound = np.tanh(0.5) * (n1 + n2) / (n1 * n2)
    assert got >= bound - 1e-12


def test_dal_shape_guards():
    c = att.diagonal_constraint_matrix(2, 3)
    with pytest.raises(DimensionError):
        att.diagonal_attention_loss(Tensor(np.zeros((3, 2))), Tensor(np.zeros((3, 2))), c)
    with pytest.raises(DimensionError):
        att.diagonal_attention_loss(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))), c)


def test_dal_gradient_matches_finite_differences():
    rng = RNG(300)
    n1, n2 = 3, 4
    c = att.diagonal_constraint_matrix(n1, n2)
    a0 = rng.normal(size=(n1, n2))

    def f(a):
        w_tts = T.softmax(a, axis=0)
        w_asr = T.softmax(T.transpose(a), axis=0)
        return att.diagonal_attention_loss(w_tts, w_asr, c)

    assert T.grad_check(f, T.tensor(a0)) < 1e-4


def test_full_attention_gradients_both_forms():
    rng = RNG(301)
    k1, k2 = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
    v1, v2 = rng.normal(size=(3, 2)), rng.normal(size=(5, 2))
    f1, f2 = Linear("f1", 4, 3, rng), Linear("f2", 4, 3, rng)
    fa = Linear("fa", 3, 1, rng)
    c = att.diagonal_constraint_matrix(3, 5)

    def run(k1_t, form):
        if form == "multiplicative":
            a = att.shared_matrix_multiplicative(k1_t, Tensor(k2), f1, f2)
        else:
            a = att.shared_matrix_additive(k1_t, Tensor(k2), f1, f2, fa)
        out = att.bidirectional_attend(a, Tensor(v1), Tensor(v2))
        return (
            T.mean_value(out.O1)
            + T.mean_value(out.O2)
            + att.diagonal_attention_loss(out.W12, out.W21, c)
        )

    assert T.grad_check(lambda t: run(t, "multiplicative"), T.tensor(k1)) < 1e-4
    assert T.grad_check(lambda t: run(t, "additive"), T.tensor(k1)) < 1e-4
