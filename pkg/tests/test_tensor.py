import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from attrnet import tensor as T
from attrnet.errors import ConfigError, DimensionError


def test_precision_context_restores():
    assert T.get_dtype() is np.float32
    with T.precision("float64"):
        assert T.get_dtype() is np.float64
        assert T.as_tensor([1, 2]).dtype == np.float64
    assert T.get_precision() == "float32"


def test_unknown_precision():
    with pytest.raises(ConfigError):
        T.set_precision("float16")


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(np.zeros((2, 3)), np.zeros((4, 5)))


def test_matmul_matches_numpy(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    np.testing.assert_array_equal(T.matmul(a, b), a @ b)


@pytest.mark.parametrize("size,k,s,p,expected", [(227, 7, 4, 0, 56), (56, 3, 2, 0, 27), (27, 5, 1, 2, 27), (16, 2, 2, 0, 8)])
def test_conv_output_size(size, k, s, p, expected):
    assert T.conv_output_size(size, k, s, p) == expected


def test_conv_output_size_rejects_empty():
    with pytest.raises(DimensionError):
        T.conv_output_size(2, 5, 1, 0)


def test_im2col_single_matches_manual_patch(rng):
    x = rng.standard_normal((2, 4, 5))
    cols = T.im2col(x, 3, stride=1, pad=0)
    assert cols.shape == (2 * 9, 2 * 3)
    # column for output position (1, 2) is the flattened patch at rows 1..3, cols 2..4
    np.testing.assert_array_equal(cols[:, 1 * 3 + 2], x[:, 1:4, 2:5].reshape(-1))


conv_cases = st.tuples(
    st.integers(1, 2), st.integers(1, 3), st.integers(1, 3),  # n, c, f
    st.integers(3, 7), st.integers(3, 7),  # h, w
    st.integers(1, 3), st.integers(1, 2), st.integers(0, 1),  # k, stride, pad
    st.integers(0, 10_000),
)


@settings(max_examples=40, deadline=None)
@given(conv_cases)
def test_im2col_conv_matches_naive_loops(case):
    n, c, f, h, w, k, s, p, seed = case
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, c, h, w))
    wt = r.standard_normal((f, c, k, k))
    b = r.standard_normal(f)
    cols = T.im2col_batch(x, k, s, p)
    ho, wo = T.conv_output_size(h, k, s, p), T.conv_output_size(w, k, s, p)
    fast = (wt.reshape(f, -1) @ cols + b[:, None]).reshape(n, f, ho, wo)
    np.testing.assert_allclose(fast, T.conv2d_naive(x, wt, b, s, p), rtol=1e-12, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(conv_cases)
def test_col2im_is_adjoint_of_im2col(case):
    # <im2col(x), y> == <x, col2im(y)> for every x, y
    n, c, _, h, w, k, s, p, seed = case
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, c, h, w))
    cols = T.im2col_batch(x, k, s, p)
    y = r.standard_normal(cols.shape)
    lhs = np.sum(cols * y)
    rhs = np.sum(x * T.col2im_batch(y, x.shape, k, s, p))
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


def test_conv_matches_torch(rng):
    torch = pytest.importorskip("torch")
    x = rng.standard_normal((2, 3, 11, 9))
    wt = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    cols = T.im2col_batch(x, 3, 2, 1)
    ours = (wt.reshape(4, -1) @ cols + b[:, None]).reshape(2, 4, 6, 5)
    ref = torch.nn.functional.conv2d(torch.from_numpy(x), torch.from_numpy(wt), torch.from_numpy(b), stride=2, padding=1)
    np.testing.assert_allclose(ours, ref.numpy(), rtol=1e-10, atol=1e-10)


def test_fans():
    assert T.fans((10, 3)) == (10, 3)
    assert T.fans((8, 3, 5, 5)) == (75, 200)


def test_rand_init_schemes():
    with T.precision("float64"):
        z = T.rand_init((3, 4), "zeros")
        assert z.dtype == np.float64 and not z.any()
        x = T.rand_init((200, 300), "xavier_uniform", 0)
        assert np.abs(x).max() <= np.sqrt(6 / 500)
        g = T.rand_init((400, 400), "gaussian(0.01)", 0)
        assert g.std() == pytest.approx(0.01, rel=0.02)
        g2 = T.rand_init((400, 400), ("gaussian", 0.01), 0)
        np.testing.assert_array_equal(g, g2)
    assert T.rand_init((2, 2), "xavier_uniform").dtype == np.float32


@pytest.mark.parametrize("bad", ["he_normal", "gaussian()", ("uniform", 1.0)])
def test_rand_init_unknown_scheme(bad):
    with pytest.raises(ConfigError):
        T.rand_init((2, 2), bad)


def test_rand_init_deterministic():
    np.testing.assert_array_equal(T.rand_init((5, 5), "xavier_uniform", 7), T.rand_init((5, 5), "xavier_uniform", 7))
