"""Parity between the compiled kernel extension and the numpy fallback."""

import numpy as np
import pytest

from trivit.numerics import kernels
from trivit.numerics.kernels import pykernels

compiled = pytest.importorskip(
    "trivit.numerics.kernels._ckernels",
    reason="compiled kernel extension not built",
)

RNG = np.random.default_rng(2718)


def pair_cases(dtype):
    rows, cols = 17, 64
    x = RNG.normal(scale=3.0, size=(rows, cols)).astype(dtype)
    gy = RNG.normal(size=(rows, cols)).astype(dtype)
    gain = RNG.normal(scale=0.5, size=cols).astype(dtype) + 1.0
    return x, gy, gain


@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-5), (np.float64, 1e-12)])
class TestElementwiseParity:
    def test_softmax(self, dtype, tol):
        x, gy, _ = pair_cases(dtype)
        y_c = compiled.softmax_forward(x)
        y_p = pykernels.softmax_forward(x)
        np.testing.assert_allclose(y_c, y_p, atol=tol)
        np.testing.assert_allclose(
            compiled.softmax_backward(y_c, gy), pykernels.softmax_backward(y_p, gy), atol=tol
        )

    def test_layer_norm(self, dtype, tol):
        x, gy, gain = pair_cases(dtype)
        xh_c, rs_c = compiled.layer_norm_forward(x, 1e-5)
        xh_p, rs_p = pykernels.layer_norm_forward(x, 1e-5)
        np.testing.assert_allclose(xh_c, xh_p, atol=10 * tol)
        np.testing.assert_allclose(rs_c, rs_p, rtol=10 * tol)
        gx_c, gg_c, gb_c = compiled.layer_norm_backward(xh_c, rs_c, gain, gy)
        gx_p, gg_p, gb_p = pykernels.layer_norm_backward(xh_p, rs_p, gain, gy)
        np.testing.assert_allclose(gx_c, gx_p, atol=100 * tol)
        np.testing.assert_allclose(gg_c, gg_p, atol=100 * tol)
        np.testing.assert_allclose(gb_c, gb_p, atol=100 * tol)

    def test_gelu(self, dtype, tol):
        x, gy, _ = pair_cases(dtype)
        np.testing.assert_allclose(compiled.gelu_forward(x), pykernels.gelu_forward(x), atol=tol)
        np.testing.assert_allclose(
            compiled.gelu_backward(x, gy), pykernels.gelu_backward(x, gy), atol=tol
        )

    def test_rotate_plane(self, dtype, tol):
        vol = RNG.normal(size=(9, 11, 7)).astype(dtype)
        for axis in range(3):
            angle = float(RNG.uniform(-0.4, 0.4))
            out_c = compiled.rotate_plane(np.ascontiguousarray(vol), axis, angle)
            out_p = pykernels.rotate_plane(vol, axis, angle)
            np.testing.assert_allclose(out_c, out_p, atol=100 * tol)


class TestSelection:
    def test_active_backend_reported(self):
        assert kernels.backend_name() in ("python", "compiled")
        assert "python" in kernels.available_backends()

    def test_compiled_is_default_when_built(self):
        assert kernels.backend_name() == "compiled"
