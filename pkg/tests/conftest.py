import numpy as np
import pytest

from qtlab.tensor import Tape, Tensor


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar function ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        up = f(x)
        x[i] = orig - h
        down = f(x)
        x[i] = orig
        g[i] = (up - down) / (2 * h)
    return g


def analytic_grad(build, x: np.ndarray) -> np.ndarray:
    """Gradient of ``build(Tensor) -> scalar Tensor`` via the tape."""
    t = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        loss = build(t)
        tape.backward(loss)
    return t.grad


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def tie_free(rng, shape, gap: float = 1e-2) -> np.ndarray:
    """Random values whose absolute values are pairwise separated by at least ``gap``."""
    n = int(np.prod(shape))
    mags = np.cumsum(rng.uniform(gap, 10 * gap, size=n)) + gap
    rng.shuffle(mags)
    signs = rng.choice([-1.0, 1.0], size=n)
    return (mags * signs).reshape(shape)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
