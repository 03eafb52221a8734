"""Shared test helpers: finite-difference gradient checking, silhouette
scoring, and small corpus fixtures."""

import numpy as np
import pytest

import spacepointfm.tensor as T
from spacepointfm.eventgen import DetectorConfig, GenParams, generate_event


def numeric_gradient(build, tensor, index, step=1e-5):
    """Central finite difference of build()'s scalar loss w.r.t. one entry."""
    flat = tensor.data.reshape(-1)
    old = flat[index]
    flat[index] = old + step
    up = build().item()
    flat[index] = old - step
    down = build().item()
    flat[index] = old
    return (up - down) / (2.0 * step)


def gradcheck(build, tensors, tol, step=1e-5, floor=1e-6, max_entries=None,
              rng=None):
    """Compare reverse-mode gradients of build() against central differences.

    build() must construct the loss under a fresh tape and return the loss
    Tensor; gradients are taken for each tensor in `tensors`. Checks every
    entry unless max_entries limits the per-tensor sample. Error metric:
    |a - n| / max(|a|, |n|, floor) <= tol elementwise.
    """
    for t in tensors:
        t.grad = None
    with T.Tape() as tape:
        loss = build()
    tape.backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in tensors]
    # finite differences only need forward values; no tape, nothing recorded
    rebuild = build
    worst = 0.0
    for tensor, ana in zip(tensors, analytic):
        size = tensor.data.size
        if max_entries is not None and size > max_entries:
            assert rng is not None
            indices = rng.choice(size, size=max_entries, replace=False)
        else:
            indices = range(size)
        for ix in indices:
            num = numeric_gradient(rebuild, tensor, ix, step=step)
            a = ana.reshape(-1)[ix]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
            assert err <= tol, (
                f"gradient mismatch for {tensor.name or 'tensor'}[{ix}]: "
                f"analytic {a!r} vs numeric {num!r} (rel {err:.3e})")
    return worst


def silhouette(points, labels) -> float:
    """Mean silhouette coefficient over points with at least 2 clusters."""
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if len(uniq) < 2:
        return 0.0
    d = np.sqrt(((points[:, None, :] - points[None, :, :]) ** 2).sum(-1))
    scores = []
    for i in range(len(points)):
        same = labels == labels[i]
        n_same = same.sum()
        if n_same < 2:
            continue
        a = d[i][same].sum() / (n_same - 1)
        b = min(d[i][labels == other].mean() for other in uniq
                if other != labels[i])
        scores.append((b - a) / max(a, b) if max(a, b) > 0 else 0.0)
    return float(np.mean(scores)) if scores else 0.0


@pytest.fixture(autouse=True)
def _float64_strict():
    """Tests run in 64-bit strict mode unless they opt out locally."""
    with T.using(dtype=np.float64, mode="strict"):
        yield


@pytest.fixture(scope="session")
def detector():
    return DetectorConfig()


@pytest.fixture(scope="session")
def small_events(detector):
    """60 default events, enough points to fit a partition grid."""
    params = GenParams(seed=404)
    return [generate_event(i, detector, params) for i in range(60)]


@pytest.fixture(scope="session")
def grid(small_events):
    from spacepointfm.serializer import fit_partition

    return fit_partition(small_events)
