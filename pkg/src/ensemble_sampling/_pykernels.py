"""Pure NumPy implementations of the gradient-descent kernels.

Reference twin of ``_ckernels.pyx``; both expose the same signatures and are
checked against each other in the test suite. All ensemble members are
processed together with batched matmuls.

Data is passed in per-arm aggregated form: for row ``k`` of ``X``,
``counts[k]`` samples were observed and ``sums[j, k]`` / ``sumsq[j, k]`` hold
the sum and sum of squares of member ``j``'s (perturbed) targets there.
"""
import numpy as np
from scipy.special import expit


def _softplus(u):
    return np.maximum(u, 0.0) + np.log1p(np.exp(-np.abs(u)))


def glm_gd(theta, X, counts, sums, lam, logistic, iters, step, losses=None, n_threads=1):
    """Full-batch gradient descent on the regularised GLM negative log-likelihood.

    ``theta`` (m, d) is updated in place. When ``losses`` (m, iters + 1) is
    given it receives the objective at every iterate, the last column being
    the returned parameters.
    """
    active = (counts != 0) | np.any(sums != 0, axis=0)
    Xa = X[active]
    ca = counts[active]
    Sa = sums[:, active]
    for it in range(iters + 1):
        U = theta @ Xa.T
        if losses is not None:
            b = _softplus(U) if logistic else 0.5 * U * U
            losses[:, it] = 0.5 * lam * np.einsum("ij,ij->i", theta, theta) - np.sum(Sa * U - ca * b, axis=1)
        if it == iters:
            break
        mu = expit(U) if logistic else U
        grad = (ca * mu - Sa) @ Xa + lam * theta
        theta -= step * grad


def layer_offsets(din, width, depth):
    """Start offsets of each weight block in the flat parameter vector, plus the total size."""
    sizes = [width * din] + [width * width] * (depth - 2) + [width]
    offs = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    return offs


def _views(params, din, width, depth):
    m = params.shape[0]
    offs = layer_offsets(din, width, depth)
    mats = [params[:, offs[0]:offs[1]].reshape(m, width, din)]
    for l in range(1, depth - 1):
        mats.append(params[:, offs[l]:offs[l + 1]].reshape(m, width, width))
    mats.append(params[:, offs[depth - 1]:offs[depth]])
    return mats


def neural_forward(params, X, width, depth):
    """Network outputs for every member and row of ``X``: shape (m, K)."""
    mats = _views(params, X.shape[1], width, depth)
    h = np.maximum(np.matmul(X[None, :, :], mats[0].transpose(0, 2, 1)), 0.0)
    for W in mats[1:-1]:
        h = np.maximum(np.matmul(h, W.transpose(0, 2, 1)), 0.0)
    return np.sqrt(width) * np.einsum("mkr,mr->mk", h, mats[-1])


def neural_gd(params, params0, X, counts, sums, sumsq, width, depth, lam, iters, step,
              losses=None, n_threads=1):
    """Full-batch gradient descent on ``1/2 sum (f - y)^2 + 1/2 lam N ||theta - theta0||^2``.

    ``params`` (m, P) is updated in place; ``losses`` as in :func:`glm_gd`.
    """
    active = (counts != 0) | np.any(sums != 0, axis=0)
    Xa = X[active]
    ca = counts[active]
    Sa = sums[:, active]
    Qa = sumsq[:, active]
    din = X.shape[1]
    sq = np.sqrt(width)
    reg = lam * width
    mats = _views(params, din, width, depth)
    grad = np.empty_like(params)
    gmats = _views(grad, din, width, depth)
    for it in range(iters + 1):
        acts = [np.maximum(np.matmul(Xa[None, :, :], mats[0].transpose(0, 2, 1)), 0.0)]
        for W in mats[1:-1]:
            acts.append(np.maximum(np.matmul(acts[-1], W.transpose(0, 2, 1)), 0.0))
        f = sq * np.einsum("mkr,mr->mk", acts[-1], mats[-1])
        diff = params - params0
        if losses is not None:
            losses[:, it] = (0.5 * np.sum(ca * f * f - 2.0 * f * Sa + Qa, axis=1)
                             + 0.5 * reg * np.einsum("ij,ij->i", diff, diff))
        if it == iters:
            break
        c = ca * f - Sa
        gmats[-1][...] = sq * np.einsum("mk,mkr->mr", c, acts[-1])
        delta = (c * sq)[:, :, None] * mats[-1][:, None, :] * (acts[-1] > 0)
        for l in range(depth - 2, 0, -1):
            prev = acts[l - 1]
            gmats[l][...] = np.matmul(delta.transpose(0, 2, 1), prev)
            delta = np.matmul(delta, mats[l]) * (prev > 0)
        gmats[0][...] = np.matmul(delta.transpose(0, 2, 1), Xa[None, :, :])
        grad += reg * diff
        params -= step * grad
