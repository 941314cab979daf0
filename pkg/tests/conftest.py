import numpy as np
import pytest

from protoeeg import diffcore as dc


def fd_gradient(loss_fn, param: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar-valued closure w.r.t. param.

    ``loss_fn`` must recompute the loss from current array contents; the
    array is perturbed in place one coordinate at a time.
    """
    grad = np.zeros_like(param)
    flat = param.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = loss_fn()
        flat[i] = orig - h
        fm = loss_fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def assert_grad_matches(analytic: np.ndarray, numeric: np.ndarray,
                        rel: float = 1e-4, abs_floor: float = 1e-7) -> None:
    """Relative error <= rel, falling back to absolute for tiny true values."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    assert analytic.shape == numeric.shape
    diff = np.abs(analytic - numeric)
    small = np.abs(numeric) < 1e-3
    bad_small = small & (diff > abs_floor)
    bad_large = ~small & (diff > rel * np.abs(numeric))
    bad = bad_small | bad_large
    if bad.any():
        idx = np.unravel_index(int(np.argmax(diff * bad)), diff.shape)
        raise AssertionError(
            f"gradient mismatch at {idx}: analytic={analytic[idx]!r} "
            f"numeric={numeric[idx]!r} (max diff {diff[bad].max():.3e})"
        )


def gradcheck(build_loss, params: list, h: float = 1e-5) -> None:
    """Compare backward() gradients against central differences.

    ``build_loss(params) -> Tensor`` must rebuild the graph from the
    Tensors' current data on every call.
    """
    for p in params:
        p.zero_grad()
    loss = build_loss(params)
    dc.backward(loss)
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = fd_gradient(lambda: float(build_loss(params).data), p.data, h=h)
        assert_grad_matches(analytic, numeric)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
