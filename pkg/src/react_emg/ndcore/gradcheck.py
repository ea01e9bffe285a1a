"""Central finite-difference oracle for analytic gradients."""

import numpy as np

from .tensor import Tensor


def finite_diff_check(f, point, eps=1e-5):
    """Max relative error between backprop and central differences.

    ``f`` maps a Tensor to a scalar Tensor and must be deterministic.  The
    error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    f(x).backward()
    analytic = np.zeros_like(x0) if x.grad is None else x.grad
    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(Tensor(x0)).item()
        flat[i] = orig - eps
        fm = f(Tensor(x0)).item()
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


EPS_LADDER = (1e-3, 1e-4, 1e-5, 1e-6, 1e-7)


def _central(f, flat, i, eps):
    orig = flat[i]
    flat[i] = orig + eps
    fp = f()
    flat[i] = orig - eps
    fm = f()
    flat[i] = orig
    return (fp - fm) / (2.0 * eps)


def _ladder_estimate(f, flat, i, ladder):
    """Central difference with a step chosen from ``ladder``.

    Starts from the two middle steps and falls back to the full ladder when
    they disagree, which happens near a kink of the loss or when the
    derivative is so small that roundoff dominates.  The estimate comes from
    the adjacent pair of steps that agree best; the analytic gradient plays
    no part in the choice.
    """
    def gap(a, b):
        return abs(a - b) / max(abs(a), abs(b), 1e-300)

    mid = len(ladder) // 2
    est = {ladder[mid]: _central(f, flat, i, ladder[mid]),
           ladder[mid + 1]: _central(f, flat, i, ladder[mid + 1])}
    if gap(est[ladder[mid]], est[ladder[mid + 1]]) < 1e-7:
        return est[ladder[mid]]
    for eps in ladder:
        if eps not in est:
            est[eps] = _central(f, flat, i, eps)
    pairs = [(gap(est[a], est[b]), a) for a, b in zip(ladder, ladder[1:])]
    return est[min(pairs)[1]]


def finite_diff_check_params(loss_fn, params, eps=1e-5, max_coords=None, rng=None):
    """Like :func:`finite_diff_check` but over several leaf tensors at once.

    ``loss_fn()`` closes over ``params``; ``max_coords`` samples that many
    coordinates per tensor to keep large models affordable.  ``eps`` may be
    a decreasing sequence of steps, in which case each coordinate uses the
    step picked by :func:`_ladder_estimate`.
    """
    def f():
        return loss_fn().item()

    for p in params:
        p.grad = None
        p.requires_grad = True
    loss_fn().backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng or np.random.default_rng(0)
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        for i in idx:
            if np.ndim(eps):
                num = _ladder_estimate(f, flat, i, tuple(eps))
            else:
                num = _central(f, flat, i, eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
