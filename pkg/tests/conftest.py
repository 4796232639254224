import numpy as np
import pytest

from rgno import autodiff as ad
from rgno.geometry import Domain, PointCloud


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def unit_square():
    return Domain(np.zeros(2), np.ones(2), np.zeros(2, dtype=bool))


@pytest.fixture
def unit_torus():
    return Domain(np.zeros(2), np.ones(2), np.ones(2, dtype=bool))


@pytest.fixture
def random_cloud(rng, unit_square):
    return PointCloud(rng.random((64, 2)), unit_square)


def check_gradients(loss_builder, tensors, h=1e-5, tol=1e-4, floor=1e-10, max_entries=6,
                    rng=None):
    """Compare analytic adjoints of a deterministic scalar loss with central
    finite differences, entrywise, on a sample of positions per tensor."""
    rng = rng or np.random.default_rng(0)
    with ad.Tape() as tape:
        loss = loss_builder()
        grads = ad.grad(loss, tensors, tape)
    for t, g in zip(tensors, grads):
        flat = t.data.reshape(-1)
        gf = np.asarray(g).reshape(-1)
        n = flat.size
        positions = range(n) if n <= max_entries else rng.choice(n, max_entries, replace=False)
        for i in positions:
            orig = flat[i]
            flat[i] = orig + h
            lp = float(loss_builder().data)
            flat[i] = orig - h
            lm = float(loss_builder().data)
            flat[i] = orig
            fd = (lp - lm) / (2.0 * h)
            err = abs(gf[i] - fd)
            assert err <= tol * max(abs(gf[i]), abs(fd)) + floor, (
                f"gradient mismatch at entry {i}: analytic={gf[i]!r} fd={fd!r}"
            )
