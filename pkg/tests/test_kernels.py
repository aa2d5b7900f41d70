"""Backend parity and shift semantics.

The compiled extension and the numpy fallback must agree bit-for-bit on
every kernel, for both float32 and float64.
"""

import numpy as np
import pytest

from layerscene._kernels import _core, _ops, BACKEND

HAS_EXT = BACKEND == "compiled"

pytestmark = pytest.mark.skipif(
    not HAS_EXT, reason="compiled extension unavailable; parity not checkable"
)


def _rand(shape, dtype, seed=0):
    return np.random.default_rng(seed).standard_normal(shape).astype(dtype)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("offset", [(0, 0), (3, -2), (-7, 7), (8, 0), (0, -8), (20, 20)])
def test_shift_parity(dtype, offset):
    g = _rand((3, 8, 8), dtype)
    assert np.array_equal(_core.shift2d(g, *offset), _ops.shift2d(g, *offset))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_shift_known_values(dtype):
    g = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=dtype)
    for impl in (_core, _ops):
        assert impl.shift2d(g, 1, 0).tolist() == [[0.0, 1.0], [0.0, 3.0]]
        assert impl.shift2d(g, 0, 1).tolist() == [[0.0, 0.0], [1.0, 2.0]]
        assert impl.shift2d(g, -1, 0).tolist() == [[2.0, 0.0], [4.0, 0.0]]
        assert np.array_equal(impl.shift2d(g, 0, 0), g)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("K", [1, 2, 5])
def test_alpha_parity(dtype, K):
    rng = np.random.default_rng(K)
    binary = (rng.random((K, 9, 7)) > 0.4).astype(dtype)
    soft = rng.random((K, 9, 7)).astype(dtype)
    assert np.array_equal(
        _core.alpha_chain_binary(binary), _ops.alpha_chain_binary(binary)
    )
    assert np.array_equal(_core.alpha_chain_soft(soft), _ops.alpha_chain_soft(soft))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_composite_parity(dtype):
    rng = np.random.default_rng(3)
    alphas = rng.random((4, 6, 5)).astype(dtype)
    feats = rng.standard_normal((4, 3, 6, 5)).astype(dtype)
    assert np.array_equal(_core.composite(alphas, feats), _ops.composite(alphas, feats))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("offset", [(0, 0), (2, -1), (-5, 5), (6, 6)])
def test_scatter_parity(dtype, offset):
    rng = np.random.default_rng(11)
    alpha = (rng.random((6, 6)) > 0.5).astype(dtype)
    view = rng.standard_normal((2, 6, 6)).astype(dtype)
    acc = []
    for impl in (_core, _ops):
        num = np.zeros((2, 6, 6), dtype)
        den = np.zeros((6, 6), dtype)
        impl.scatter_accumulate(num, den, alpha, view, 3.5, *offset)
        impl.scatter_accumulate(num, den, alpha, view, 0.25, 1, 1)
        acc.append((num, den))
    assert np.array_equal(acc[0][0], acc[1][0])
    assert np.array_equal(acc[0][1], acc[1][1])


def test_scatter_is_shift_adjoint():
    # scatter with weight 1 equals shifting alpha*view by the negated offset
    rng = np.random.default_rng(5)
    alpha = (rng.random((8, 8)) > 0.5).astype(np.float64)
    view = rng.standard_normal((1, 8, 8))
    num = np.zeros((1, 8, 8))
    den = np.zeros((8, 8))
    _ops.scatter_accumulate(num, den, alpha, view, 1.0, 2, -3)
    assert np.allclose(num, _ops.shift2d(alpha * view, -2, 3))
    assert np.allclose(den, _ops.shift2d(alpha, -2, 3))


def test_kernel_dtype_rejected():
    bad = np.ones((2, 4, 4), dtype=np.int32)
    with pytest.raises(TypeError):
        _core.shift2d(bad, 1, 0)
