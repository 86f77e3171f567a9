import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medusa import kernels

compiled = pytest.importorskip("medusa._kernels", reason="compiled kernels not built")


@settings(max_examples=60, deadline=None)
@given(
    n=st.integers(1, 3),
    c=st.integers(1, 4),
    h=st.integers(1, 9),
    w=st.integers(1, 9),
    k=st.sampled_from([1, 3, 5]),
    stride=st.integers(1, 3),
    seed=st.integers(0, 2**31),
)
def test_backends_bit_identical(n, c, h, w, k, stride, seed):
    pad = (k - 1) // 2
    if kernels.out_size(h, k, stride, pad) < 1 or kernels.out_size(w, k, stride, pad) < 1:
        return
    x = np.random.default_rng(seed).standard_normal((n, c, h, w))
    cols_np = kernels.im2col_numpy(x, k, stride, pad)
    cols_cy = compiled.im2col(x, k, stride, pad)
    np.testing.assert_array_equal(cols_np, cols_cy)
    back_np = kernels.col2im_numpy(cols_np, c, h, w, k, stride, pad)
    back_cy = compiled.col2im(cols_np, c, h, w, k, stride, pad)
    np.testing.assert_array_equal(back_np, back_cy)


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 6, 7))
    cols = kernels.im2col(x, 3, 2, 1)
    y = rng.standard_normal(cols.shape)
    lhs = np.vdot(cols, y)
    rhs = np.vdot(x, kernels.col2im(y, 3, 6, 7, 3, 2, 1))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_backend_selected():
    assert kernels.BACKEND in ("cython", "numpy")
