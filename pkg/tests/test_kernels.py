"""Both kernel backends must agree: the compiled extension against the
NumPy reference, on every shape/dtype family the ops allow."""

import numpy as np
import pytest

from bridgediff import kernels
from bridgediff.kernels import reference

native = pytest.importorskip("bridgediff.kernels._native",
                             reason="compiled extension not built")

CONV_CASES = [
    (2, 5, 9, 7, 4, 3, 1),
    (1, 3, 6, 6, 2, 1, 0),
    (2, 4, 8, 8, 3, 3, 0),
    (1, 8, 5, 5, 8, 3, 2),   # pad 2 appears inside input-gradient computation
    (3, 1, 4, 4, 1, 3, 1),
]


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("case", CONV_CASES)
def test_conv_backends_agree(case, dtype):
    n, i, h, w, o, k, pad = case
    rng = np.random.default_rng(42)
    x = rng.standard_normal((n, i, h, w)).astype(dtype)
    wt = rng.standard_normal((o, i, k, k)).astype(dtype)
    b = rng.standard_normal(o).astype(dtype)
    atol = 1e-4 if dtype == np.float32 else 1e-12
    fwd_n = native.conv2d_forward(x, wt, b, pad)
    fwd_r = reference.conv2d_forward(x, wt, b, pad)
    assert fwd_n.dtype == dtype and fwd_r.dtype == dtype
    assert np.allclose(fwd_n, fwd_r, atol=atol)
    g = rng.standard_normal(fwd_n.shape).astype(dtype)
    assert np.allclose(native.conv2d_grad_weight(x, g, pad, k, k),
                       reference.conv2d_grad_weight(x, g, pad, k, k), atol=atol)
    assert np.allclose(native.conv2d_grad_input(g, wt, pad),
                       reference.conv2d_grad_input(g, wt, pad), atol=atol)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("shape,target", [
    ((2, 3, 7, 9), (13, 4)),
    ((1, 1, 1, 5), (4, 10)),   # single-pixel axis replication
    ((1, 2, 8, 8), (8, 8)),    # same-size pass-through
])
def test_bilinear_backends_agree(shape, target, dtype):
    rng = np.random.default_rng(7)
    x = rng.standard_normal(shape).astype(dtype)
    oh, ow = target
    atol = 1e-5 if dtype == np.float32 else 1e-12
    assert np.allclose(native.bilinear_forward(x, oh, ow),
                       reference.bilinear_forward(x, oh, ow), atol=atol)
    g = rng.standard_normal((shape[0], shape[1], oh, ow)).astype(dtype)
    assert np.allclose(native.bilinear_grad_input(g, shape[2], shape[3]),
                       reference.bilinear_grad_input(g, shape[2], shape[3]), atol=atol)


def test_backend_switching():
    orig = kernels.backend_name()
    kernels.set_backend("reference")
    assert kernels.backend_name() == "reference"
    kernels.set_backend("native")
    assert kernels.backend_name() == "native"
    kernels.set_backend(orig)
    with pytest.raises(ValueError):
        kernels.set_backend("gpu")
