"""Shared oracles: central finite differences and gradient comparison."""

import numpy as np
import pytest

from cmim.numcore import Tensor


def central_diff(fn, work: np.ndarray, coords, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn`` at the given flat coords.

    ``fn`` takes no arguments and must read ``work`` (mutated in place).
    """
    flat = work.reshape(-1)
    out = np.empty(len(coords))
    for j, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = fn()
        flat[i] = orig - h
        f_minus = fn()
        flat[i] = orig
        out[j] = (f_plus - f_minus) / (2.0 * h)
    return out


def grad_gap(analytic: np.ndarray, numeric: np.ndarray, rtol: float = 1e-4,
             atol: float = 1e-7) -> float:
    """Worst relative error, with an absolute floor for near-zero gradients."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    err = np.abs(analytic - numeric)
    ok = err <= atol + rtol * np.maximum(np.abs(analytic), np.abs(numeric))
    rel = err / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol / rtol)
    if not np.all(ok):
        worst = int(np.argmax(rel))
        raise AssertionError(
            f"gradient mismatch at coord {worst}: analytic {analytic[worst]:.8g} "
            f"vs numeric {numeric[worst]:.8g} (rel {rel[worst]:.3g})"
        )
    return float(rel.max()) if len(rel) else 0.0


def check_tensor_grads(build_loss, arrays, rtol=1e-4, atol=1e-7, max_coords=24,
                       seed=0, h=1e-5) -> float:
    """Compare autodiff and finite-difference gradients of ``build_loss``.

    ``build_loss`` maps one Tensor per input array to a scalar Tensor. Returns
    the worst relative error over the sampled coordinates of every input.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    build_loss(*tensors).backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k, work in enumerate(arrays):
        n = work.size
        if n <= max_coords:
            coords = list(range(n))
        else:
            coords = sorted(rng.choice(n, size=max_coords, replace=False).tolist())

        def evaluate():
            args = [Tensor(arrays[j]) for j in range(len(arrays))]
            return float(build_loss(*args).data)

        numeric = central_diff(evaluate, work, coords, h=h)
        grad = tensors[k].grad
        analytic = (np.zeros(n) if grad is None else np.asarray(grad, dtype=np.float64).reshape(-1))[coords]
        worst = max(worst, grad_gap(analytic, numeric, rtol=rtol, atol=atol))
    return worst


def check_parameter_grads(make_loss, params, rtol=1e-4, atol=1e-7, max_coords=12,
                          seed=0, h=1e-5) -> float:
    """Finite-difference check of ``make_loss()`` against ``.grad`` of params.

    ``make_loss`` must rebuild the forward pass from the current parameter
    values on every call (any sampling inside has to be seed-frozen).
    """
    for p in params:
        p.grad = None
    make_loss().backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        n = p.data.size
        if n <= max_coords:
            coords = list(range(n))
        else:
            coords = sorted(rng.choice(n, size=max_coords, replace=False).tolist())

        def evaluate():
            return float(make_loss().data)

        numeric = central_diff(evaluate, p.data, coords, h=h)
        analytic = (np.zeros(n) if p.grad is None
                    else np.asarray(p.grad, dtype=np.float64).reshape(-1))[coords]
        worst = max(worst, grad_gap(analytic, numeric, rtol=rtol, atol=atol))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(0)
