"""Finite-difference oracle shared by the gradient tests."""
import numpy as np

STEP = 1e-5


def numerical_grad(f, x: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (mutated and restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return g


def assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-8):
    """Elementwise ``|a - n| <= rtol * max(|a|, |n|) + atol``."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    bound = rtol * np.maximum(np.abs(a), np.abs(n)) + atol
    bad = np.abs(a - n) > bound
    assert not bad.any(), (
        f"{bad.sum()} of {bad.size} entries differ; worst |a-n|={np.abs(a - n).max():.3e}, "
        f"a={a.reshape(-1)[bad.reshape(-1)][:3]}, n={n.reshape(-1)[bad.reshape(-1)][:3]}")


def away_from_zero(rng, shape, margin=1e-2):
    """Normal draws with no entry within ``margin`` of a ReLU kink."""
    x = rng.normal(size=shape)
    x[np.abs(x) < margin] += np.sign(x[np.abs(x) < margin] + 1e-300) * 2 * margin
    return x
