import numpy as np
import pytest

from spirit import tensor as T


def gradient_errors(build_loss, tensors, n_coords=10, h=1e-5, seed=0):
    """Relative errors between analytic and central-difference gradients.

    ``build_loss`` rebuilds the scalar loss from the tensors' current data;
    tensors must be float64 with requires_grad=True.  ``n_coords``
    coordinates per tensor are probed.
    """
    for t in tensors:
        assert t.data.dtype == np.float64, "gradient checks need float64 tensors"
        t.zero_grad()
    loss = build_loss()
    T.backward(loss)
    analytic = [t.grad.copy() for t in tensors]
    rng = np.random.default_rng(seed)
    errors = []
    for t, ana in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        coords = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            with T.no_grad():
                f_plus = build_loss().item()
            flat[c] = orig - h
            with T.no_grad():
                f_minus = build_loss().item()
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(ana_flat[c]), abs(numeric), 1e-4)
            errors.append(abs(ana_flat[c] - numeric) / denom)
    for t in tensors:
        t.zero_grad()
    return errors


def assert_gradients_match(build_loss, tensors, n_coords=10, rtol=1e-4, seed=0):
    errors = gradient_errors(build_loss, tensors, n_coords=n_coords, seed=seed)
    assert max(errors) < rtol, f"worst relative gradient error {max(errors):.3e}"


@pytest.fixture(autouse=True)
def clean_tape():
    yield
    T._tape.clear()


@pytest.fixture
def rng():
    return np.random.default_rng(7)
