"""The compiled kernels and the numpy fallback must agree to rounding."""

import os
import subprocess
import sys

import numpy as np
import pytest

from freegrad import kernels
from freegrad.kalman import make_kinematic_scenario, optimal_rate, projected_precisions

IMPLS = [kernels.fallback] + ([kernels.compiled] if kernels.compiled is not None else [])


def naive_conv(x, w):
    n, cin, H, W = x.shape
    cout, _, kh, kw = w.shape
    out = np.zeros((n, cout, H - kh + 1, W - kw + 1))
    for b in range(n):
        for o in range(cout):
            for i in range(H - kh + 1):
                for j in range(W - kw + 1):
                    out[b, o, i, j] = np.sum(w[o] * x[b, :, i:i + kh, j:j + kw])
    return out


@pytest.mark.parametrize("impl", IMPLS, ids=lambda m: m.__name__.rsplit(".", 1)[-1])
class TestEachImplementation:
    def test_conv_forward(self, impl, rng):
        x, w = rng.standard_normal((2, 3, 7, 6)), rng.standard_normal((4, 3, 3, 2))
        np.testing.assert_allclose(impl.conv2d_forward(x, w), naive_conv(x, w), rtol=1e-12, atol=1e-12)

    def test_conv_adjoints_are_transposes(self, impl, rng):
        # <conv(x, w), g> must equal <x, back_input(g, w)> and <w, back_weight(x, g)>.
        x, w = rng.standard_normal((2, 3, 7, 6)), rng.standard_normal((4, 3, 3, 2))
        g = rng.standard_normal((2, 4, 5, 5))
        lhs = float(np.sum(impl.conv2d_forward(x, w) * g))
        assert lhs == pytest.approx(float(np.sum(x * impl.conv2d_backward_input(g, w, 7, 6))), rel=1e-12)
        assert lhs == pytest.approx(float(np.sum(w * impl.conv2d_backward_weight(x, g, 3, 2))), rel=1e-12)

    def test_maxpool_round_trip(self, impl, rng):
        x = rng.standard_normal((2, 3, 6, 6))
        out, arg = impl.maxpool2d_forward(x, 2)
        ref = x.reshape(2, 3, 3, 2, 3, 2).max(axis=(3, 5))
        np.testing.assert_array_equal(out, ref)
        back = impl.maxpool2d_backward(np.ones_like(out), np.asarray(arg, dtype=np.int64), 6, 6)
        assert back.sum() == out.size
        np.testing.assert_array_equal(x * back, np.where(back == 1, x, 0.0))


@pytest.mark.skipif(kernels.compiled is None, reason="compiled extension not built")
def test_compiled_matches_fallback_on_filter():
    model, sc = make_kinematic_scenario(horizon=200, seed=3)
    precs = projected_precisions(model, sc)
    prec_z = np.linalg.inv(model.R)
    rates = np.array([optimal_rate(P, model, prec_z) for P in precs])
    args = (model.A, model.B, model.C, precs, prec_z, sc.observations, sc.controls, sc.x0, 5, rates)
    c = np.ascontiguousarray
    out = [impl.grad_filter_run(*[c(a, dtype=np.float64) if isinstance(a, np.ndarray) else a for a in args])
           for impl in (kernels.compiled, kernels.fallback)]
    assert np.all(np.isfinite(out[0]))
    np.testing.assert_allclose(out[0], out[1], rtol=1e-10, atol=1e-10)


def test_environment_switch_selects_fallback():
    env = dict(os.environ, FREEGRAD_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import freegrad.kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
