import importlib.util
import math
import os
import subprocess
import sys

import numpy as np
import pytest

from icdt import kernels as K

needs_numba = pytest.mark.skipif(not K.HAS_NUMBA, reason="numba path disabled or unavailable")


@pytest.fixture(params=[np.float32, np.float64])
def dtype(request):
    return request.param


def test_layernorm_definition(rng, dtype):
    x = rng.standard_normal((5, 17)).astype(dtype) * 3 + 1
    y, rstd = K.np_layernorm_fwd(x, 1e-6)
    np.testing.assert_allclose(y.mean(1), 0, atol=1e-5)
    np.testing.assert_allclose(y.std(1), 1, rtol=1e-4)
    assert y.dtype == dtype and rstd.shape == (5,)


def test_softmax_definition(rng, dtype):
    x = (rng.standard_normal((4, 9)) * 20).astype(dtype)
    p = K.np_softmax_fwd(x)
    ref = np.exp(x - x.max(1, keepdims=True))
    np.testing.assert_allclose(p, ref / ref.sum(1, keepdims=True), rtol=1e-5)


def test_gelu_tanh_form():
    x = np.linspace(-6, 6, 101)
    ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(K.gelu_fwd(x), ref, rtol=1e-12, atol=1e-15)
    assert np.all(np.isfinite(K.gelu_fwd(np.array([-1e4, 1e4]))))


def test_block_eme_definition():
    img = np.arange(1.0, 257.0).reshape(16, 16)
    expect = 0.0
    for by in range(2):
        for bx in range(2):
            blk = img[8 * by:8 * by + 8, 8 * bx:8 * bx + 8]
            expect += math.log(blk.max() / blk.min())
    assert K.np_block_eme(img, 8) == pytest.approx(expect, rel=1e-14)


@needs_numba
@pytest.mark.parametrize("name", ["layernorm_fwd", "softmax_fwd"])
def test_numba_matches_numpy_forward(rng, dtype, name):
    x = rng.standard_normal((33, 48)).astype(dtype)
    args = (x, 1e-6) if name == "layernorm_fwd" else (x,)
    a = getattr(K, "np_" + name)(*args)
    b = getattr(K, "nb_" + name)(*args)
    for u, v in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
        np.testing.assert_allclose(u, v, rtol=1e-5, atol=1e-6)


@needs_numba
def test_numba_matches_numpy_backward(rng, dtype):
    x = rng.standard_normal((7, 20)).astype(dtype)
    g = rng.standard_normal((7, 20)).astype(dtype)
    xhat, rstd = K.np_layernorm_fwd(x, 1e-6)
    np.testing.assert_allclose(K.nb_layernorm_bwd(g, xhat, rstd), K.np_layernorm_bwd(g, xhat, rstd), rtol=1e-5, atol=1e-6)
    p = K.np_softmax_fwd(x)
    np.testing.assert_allclose(K.nb_softmax_bwd(g, p), K.np_softmax_bwd(g, p), rtol=1e-5, atol=1e-6)


@needs_numba
def test_numba_matches_numpy_blocks(rng):
    ch = rng.uniform(0, 255, (40, 37))
    ch[:8, :8] = 0
    img = rng.uniform(0, 255, (40, 37, 3))
    img[8:16, 8:16] = 7
    assert K.nb_block_eme(ch, 8) == pytest.approx(K.np_block_eme(ch, 8), rel=1e-12)
    assert K.nb_block_amee(img, 8) == pytest.approx(K.np_block_amee(img, 8), rel=1e-12)


NUMBA_INSTALLED = importlib.util.find_spec("numba") is not None


@pytest.mark.parametrize("flag,expect", [("1", "numpy"), ("0", "numba" if NUMBA_INSTALLED else "numpy")])
def test_env_flag_selects_backend(flag, expect):
    env = dict(os.environ, ICDT_DISABLE_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", "from icdt import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True).stdout.strip()
    assert out == expect


def test_numpy_backend_end_to_end():
    code = (
        "import numpy as np\n"
        "from icdt import kernels\n"
        "from icdt.model import IcdtModel, preset\n"
        "assert kernels.BACKEND == 'numpy'\n"
        "m = IcdtModel(preset('tiny', patch=2, latent_side=8, latent_channels=3), seed=0)\n"
        "x = np.random.default_rng(0).standard_normal((1, 8, 8, 3)).astype(np.float32)\n"
        "e, v = m(x, x, 5)\n"
        "print(float(np.abs(e.data).sum()))\n"
    )
    env = dict(os.environ, ICDT_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "0.0"
