import numpy as np
from hypothesis import settings

settings.register_profile("suite", deadline=None, max_examples=40)
settings.load_profile("suite")


def rel_err(analytic: np.ndarray, reference: np.ndarray, floor: float = 1e-8) -> float:
    """Norm-based relative error, robust to near-zero gradients."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    b = np.asarray(reference, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def fd_grad(fn, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of a scalar function over every entry of x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def directional_check(loss_fn, arr: np.ndarray, grad: np.ndarray,
                      gen: np.random.Generator, h: float = 2e-5,
                      entries: int | None = None) -> float:
    """Directional finite-difference error for one float32 parameter tensor.

    Perturbs along a random sign direction (optionally restricted to
    `entries` sampled positions), measures the loss difference, and compares
    it against the analytic gradient projected onto the step the float32
    storage actually realized. Robust to activation kinks and to the
    float32 parameter grid. Returns the relative error of the two numbers.
    """
    direction = gen.choice([-1.0, 1.0], size=arr.shape)
    if entries is not None and entries < arr.size:
        mask = np.zeros(arr.size)
        mask[gen.choice(arr.size, size=entries, replace=False)] = 1.0
        direction = direction * mask.reshape(arr.shape)
    orig = arr.copy()
    plus = (orig.astype(np.float64) + h * direction).astype(np.float32)
    minus = (orig.astype(np.float64) - h * direction).astype(np.float32)
    arr[...] = plus
    fp = loss_fn()
    arr[...] = minus
    fm = loss_fn()
    arr[...] = orig
    step = plus.astype(np.float64) - minus.astype(np.float64)
    analytic = float(np.sum(np.asarray(grad, dtype=np.float64) * step))
    return rel_err(analytic, fp - fm, floor=1e-10)


def _conv_cache_margin(cache) -> float:
    pre = cache[1]  # (x, pre_activation[, cols]); pre is None for linear layers
    return np.inf if pre is None else float(np.min(np.abs(pre)))


def min_kink_margin(caches) -> float:
    """Distance of the nearest activation to a PReLU or clip kink.

    Finite differences of the network are only trustworthy when no
    pre-activation sits within the perturbation's reach of a kink; tests
    measure this margin and size the FD step well below it.
    """
    margin = np.inf
    for c in caches["pre"]:
        margin = min(margin, _conv_cache_margin(c))
    for unit_cache in caches["units"]:
        margin = min(margin, _conv_cache_margin(unit_cache[3]))
    margin = min(margin, _conv_cache_margin(caches["down"]))
    for c in caches["rec"]:
        margin = min(margin, _conv_cache_margin(c))
    pre_clip = caches["pre_clip"]
    margin = min(margin, float(np.min(np.abs(pre_clip))),
                 float(np.min(np.abs(pre_clip - 1.0))))
    return margin


def plus_kink_margin(caches) -> float:
    """Kink margin for the composite: heads, both clips, and the base."""
    margin = min_kink_margin(caches["base"])
    for c in caches["pre"] + caches["post"]:
        margin = min(margin, _conv_cache_margin(c))
    for raw in (caches["pre_ctx_raw"], caches["post_raw"]):
        margin = min(margin, float(np.min(np.abs(raw))),
                     float(np.min(np.abs(raw - 1.0))))
    return margin


def dyadic_residue(gen: np.random.Generator, shape, scale_bits: int = 12) -> np.ndarray:
    """Random residue whose entries are multiples of 2**-scale_bits in [-1, 1].

    Sums of such values are exact in float64 regardless of association, so
    two correct SATD implementations must agree bit for bit.
    """
    q = 1 << scale_bits
    return (gen.integers(-q, q + 1, size=shape) / q).astype(np.float64)
