import numpy as np
import pytest

from fdvm.tensor import Graph, Tensor, backward


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


def fd_gradcheck(forward, leaves, rng, n_samples=3, h=1e-4, rtol=1e-4, atol=1e-7):
    """Compare tape gradients with central finite differences.

    `forward` rebuilds the scalar loss from scratch on every call; `leaves`
    is a list of (name, Tensor) whose .data may be perturbed in place.
    Returns the worst (relative_error, label) encountered.
    """
    for _, t in leaves:
        t.zero_grad()
    with Graph() as g:
        loss = forward()
    backward(loss, g)

    worst = (0.0, "")
    for name, t in leaves:
        flat = t.data.reshape(-1)
        gflat = t.grad.reshape(-1)
        idxs = rng.choice(flat.size, size=min(n_samples, flat.size), replace=False)
        for idx in idxs:
            orig = flat[idx]
            flat[idx] = orig + h
            fp = forward().item()
            flat[idx] = orig - h
            fm = forward().item()
            flat[idx] = orig
            fd = (fp - fm) / (2 * h)
            ana = gflat[idx]
            err = abs(fd - ana)
            rel = err / max(abs(fd), abs(ana), atol / rtol)
            if rel > worst[0]:
                worst = (rel, f"{name}[{idx}]: fd={fd:.8g} analytic={ana:.8g}")
            assert rel <= rtol, (
                f"{name}[{idx}]: finite diff {fd:.8g} vs analytic {ana:.8g} "
                f"(rel {rel:.3e})")
    return worst


def rand_tensor(rng, shape, lo=-2.0, hi=2.0, requires_grad=False):
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=requires_grad)
