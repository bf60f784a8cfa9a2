"""The numba and numpy kernel paths must agree; each must be deterministic."""
import os
import subprocess
import sys

import numpy as np
import pytest

from ammobilenet import _kernels as K

pytestmark = pytest.mark.skipif(K.dw_forward_numba is None, reason="numba not installed")


@pytest.fixture
def arrays(rng):
    xpad = rng.standard_normal((3, 5, 19))
    w = rng.standard_normal((5, 3))
    return xpad, w


@pytest.mark.parametrize("stride", [1, 2])
def test_depthwise_paths_agree(arrays, stride, rng):
    xpad, w = arrays
    lout = (19 - 3) // stride + 1
    np.testing.assert_allclose(K.dw_forward_numba(xpad, w, stride, lout),
                               K.dw_forward_numpy(xpad, w, stride, lout), atol=1e-12)
    g = rng.standard_normal((3, 5, lout))
    np.testing.assert_allclose(K.dw_backward_input_numba(g, w, stride, 19),
                               K.dw_backward_input_numpy(g, w, stride, 19), atol=1e-12)
    np.testing.assert_allclose(K.dw_backward_weight_numba(g, xpad, stride, 3),
                               K.dw_backward_weight_numpy(g, xpad, stride, 3), atol=1e-12)


def test_batchnorm_paths_agree(rng):
    x = rng.standard_normal((4, 6, 9)) * 2 + 1
    gamma, beta = rng.standard_normal(6), rng.standard_normal(6)
    a = K.bn_train_forward_numba(x, gamma, beta, 1e-5)
    b = K.bn_train_forward_numpy(x, gamma, beta, 1e-5)
    for u, v in zip(a, b):
        np.testing.assert_allclose(u, v, atol=1e-12)
    g = rng.standard_normal(x.shape)
    for u, v in zip(K.bn_backward_numba(g, a[1], gamma, a[4]), K.bn_backward_numpy(g, b[1], gamma, b[4])):
        np.testing.assert_allclose(u, v, atol=1e-11)


def test_relu6_paths_agree(rng):
    x = rng.uniform(-3, 9, size=(2, 3, 50))
    g = rng.standard_normal(x.shape)
    np.testing.assert_array_equal(K.relu6_forward_numba(x), K.relu6_forward_numpy(x))
    np.testing.assert_array_equal(K.relu6_backward_numba(g, x), K.relu6_backward_numpy(g, x))


def test_repeat_calls_bit_identical(arrays):
    xpad, w = arrays
    first = K.dw_forward(xpad, w, 2, 9)
    for _ in range(3):
        np.testing.assert_array_equal(K.dw_forward(xpad, w, 2, 9), first)


def test_env_flag_selects_numpy_backend():
    env = dict(os.environ, AMMOBILENET_NO_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", "import ammobilenet; print(ammobilenet.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
