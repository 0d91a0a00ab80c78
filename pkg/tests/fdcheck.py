"""Central finite-difference oracle shared by the gradient tests."""
import contextlib

import numpy as np

from densegrade import functional
from densegrade.tensor import backward

H = 1e-5


def numeric_grad(f, arr, h=H, index=None):
    """d f() / d arr by central differences; ``arr`` is perturbed in place.

    ``index`` restricts the check to a list of flat positions.
    """
    flat = arr.reshape(-1)
    positions = range(flat.size) if index is None else index
    out = np.zeros(len(positions))
    for k, p in enumerate(positions):
        old = flat[p]
        flat[p] = old + h
        fp = f()
        flat[p] = old - h
        fm = f()
        flat[p] = old
        out[k] = (fp - fm) / (2 * h)
    return out


def rel_error(a, b):
    """Norm-wise relative error: max |a - b| over the larger max magnitude."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def check_gradients(build_loss, tensors, h=H, max_points=None, rng=None):
    """Compare analytic and numeric gradients of ``build_loss()`` w.r.t. ``tensors``.

    Returns the largest relative error over all tensors.
    """
    for t in tensors:
        t.grad = None
    loss = build_loss()
    backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = t.grad.reshape(-1)
        idx = None
        if max_points is not None and t.size > max_points:
            rng = rng or np.random.default_rng(0)
            idx = sorted(rng.choice(t.size, size=max_points, replace=False).tolist())
            analytic = analytic[idx]
        numeric = numeric_grad(lambda: float(build_loss().data), t.data, h=h, index=idx)
        worst = max(worst, rel_error(analytic, numeric))
    return worst


@contextlib.contextmanager
def relu_inputs():
    """Record min |x| of every ReLU input; central differences break near the kink."""
    seen = []
    original = functional.relu

    def spy(x):
        seen.append(float(np.abs(x.data).min()) if x.size else np.inf)
        return original(x)
    functional.relu = spy
    try:
        yield seen
    finally:
        functional.relu = original


def kink_free(build, margin=1e-3):
    with relu_inputs() as seen:
        build()
    return min(seen, default=np.inf) > margin
