import os
import subprocess
import sys

import numpy as np
import pytest

from ensemble_sampling import kernels
from ensemble_sampling.neural import duplicate_context, init_network

needs_cython = pytest.mark.skipif("cython" not in kernels.available_backends(),
                                  reason="compiled kernels not built")


def glm_problem(g, m=4, K=12, d=5):
    X = g.standard_normal((K, d))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    counts = g.integers(0, 6, K).astype(float)
    counts[:3] = 0
    sums = g.standard_normal((m, K)) * counts
    sums[:, 0] = 0.0
    sums[1, 1] = 0.4  # perturbation-only arm for one member
    return g.standard_normal((m, d)) * 0.1, X, counts, sums


def neural_problem(g, m=3, K=9, d=4, width=6, depth=3):
    X = duplicate_context(g.standard_normal((K, d)) / np.sqrt(d))
    p0 = np.stack([init_network(2 * d, width, depth, g).flat for _ in range(m)])
    counts = g.integers(0, 4, K).astype(float)
    counts[0] = 0
    ys = g.standard_normal((m, K))
    return p0, X, counts, ys * counts, (ys ** 2 + 0.1) * counts


@needs_cython
@pytest.mark.parametrize("logistic", [True, False])
def test_glm_backends_agree(logistic, rng):
    theta, X, counts, sums = glm_problem(rng)
    out = {}
    for name in ("cython", "python"):
        th = theta.copy()
        losses = np.empty((th.shape[0], 31))
        kernels.get_backend(name).glm_gd(th, X, counts, sums, 0.8, logistic, 30, 0.02, losses)
        out[name] = th, losses
    assert np.allclose(out["cython"][0], out["python"][0], rtol=1e-10, atol=1e-12)
    assert np.allclose(out["cython"][1], out["python"][1], rtol=1e-10, atol=1e-12)


@needs_cython
def test_neural_backends_agree(rng):
    p0, X, counts, sums, sumsq = neural_problem(rng)
    start = p0 + 0.05 * rng.standard_normal(p0.shape)
    out = {}
    for name in ("cython", "python"):
        k = kernels.get_backend(name)
        params = start.copy()
        losses = np.empty((params.shape[0], 21))
        k.neural_gd(params, p0, X, counts, sums, sumsq, 6, 3, 1.0, 20, 0.01, losses)
        out[name] = params, losses, k.neural_forward(params, X, 6, 3)
    for a, b in zip(out["cython"], out["python"]):
        assert np.allclose(a, b, rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("depth", [2, 4])
def test_neural_depths_agree_across_backends(depth, rng):
    p0, X, counts, sums, sumsq = neural_problem(rng, depth=depth)
    results = []
    for name in kernels.available_backends():
        params = p0 + 0.05
        kernels.get_backend(name).neural_gd(params, p0, X, counts, sums, sumsq, 6, depth, 0.5, 5, 0.01)
        results.append(params)
    for r in results[1:]:
        assert np.allclose(r, results[0], rtol=1e-9, atol=1e-12)


@needs_cython
@pytest.mark.parametrize("which", ["glm", "neural"])
def test_thread_count_does_not_change_results(which, rng):
    ck = kernels.get_backend("cython")
    outs = []
    if which == "glm":
        theta, X, counts, sums = glm_problem(rng, m=6)
        for n in (1, 2):
            th = theta.copy()
            ck.glm_gd(th, X, counts, sums, 1.0, True, 25, 0.05, n_threads=n)
            outs.append(th)
    else:
        p0, X, counts, sums, sumsq = neural_problem(rng, m=5)
        for n in (1, 2):
            params = p0.copy()
            ck.neural_gd(params, p0, X, counts, sums, sumsq, 6, 3, 1.0, 10, 0.01, n_threads=n)
            outs.append(params)
    assert outs[0].tobytes() == outs[1].tobytes()


def test_zero_iterations_leaves_parameters(backend, rng):
    theta, X, counts, sums = glm_problem(rng)
    th = theta.copy()
    losses = np.empty((th.shape[0], 1))
    backend.glm_gd(th, X, counts, sums, 1.0, True, 0, 0.1, losses)
    assert np.array_equal(th, theta)
    assert np.all(np.isfinite(losses))


def test_no_data_decays_towards_zero(backend, rng):
    theta = rng.standard_normal((2, 3))
    th = theta.copy()
    backend.glm_gd(th, np.eye(3), np.zeros(3), np.zeros((2, 3)), 1.0, False, 3, 0.5)
    assert np.allclose(th, theta * 0.5 ** 3)


def test_layer_offsets():
    assert kernels.layer_offsets(4, 3, 3).tolist() == [0, 12, 21, 24]


def test_pure_python_switch():
    env = dict(os.environ, ENSEMBLE_SAMPLING_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from ensemble_sampling import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")
