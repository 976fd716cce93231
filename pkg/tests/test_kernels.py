import os
import subprocess
import sys

import numpy as np
import pytest

from simcse_lab import kernels
from simcse_lab.kernels import _numba as nb
from simcse_lab.kernels import _numpy as ref

rs = np.random.default_rng(0)
X = rs.normal(size=(37, 13)) * 5
G = rs.normal(size=(37, 13))


def _close(a, b, tol=1e-12):
    for u, v in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
        np.testing.assert_allclose(u, v, rtol=tol, atol=tol)


@pytest.mark.parametrize(
    "name,args",
    [
        ("softmax_rows", (X,)),
        ("log_softmax_rows", (X,)),
        ("softmax_rows_backward", (ref.softmax_rows(X), G)),
        ("log_softmax_rows_backward", (ref.log_softmax_rows(X), G)),
        ("layer_norm_forward", (X, rs.normal(size=13), rs.normal(size=13), 1e-12)),
        ("gelu", (rs.normal(size=(3, 5, 7)) * 4,)),
        ("gelu_backward", (X, G)),
        ("embedding_backward", (rs.integers(0, 9, size=24), rs.normal(size=(24, 5)), 9)),
        ("average_ranks", (rs.integers(0, 5, size=40).astype(float),)),
    ],
)
def test_backends_agree(name, args):
    _close(getattr(nb, name)(*args), getattr(ref, name)(*args))


def test_layer_norm_backward_agrees():
    y, xhat, rstd = ref.layer_norm_forward(X, np.ones(13), np.zeros(13), 1e-12)
    gain = rs.normal(size=13)
    _close(nb.layer_norm_backward(G, xhat, rstd, gain), ref.layer_norm_backward(G, xhat, rstd, gain))


def test_gelu_saturates_without_overflow():
    x = np.array([-1e4, -50.0, 0.0, 50.0, 1e4])
    np.testing.assert_array_equal(nb.gelu(x), ref.gelu(x))


def test_backend_selected_by_environment():
    code = "from simcse_lab import kernels; print(kernels.BACKEND)"
    for name in ("numpy", "numba"):
        env = {**os.environ, "SIMCSE_LAB_BACKEND": name}
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        assert out.stdout.strip() == name
    env = {**os.environ, "SIMCSE_LAB_BACKEND": "fortran"}
    assert subprocess.run([sys.executable, "-c", code], env=env, capture_output=True).returncode != 0
    assert kernels.BACKEND in ("numba", "numpy")
