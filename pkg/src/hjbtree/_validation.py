"""Small input-validation helpers used by the public API."""

import numpy as np


def check_tensor(Y, dims=None, name="tensor"):
    """Coerce to a float ndarray and optionally check its shape."""
    Y = np.asarray(Y, dtype=float)
    if dims is not None and Y.shape != tuple(dims):
        raise ValueError(f"{name} has shape {Y.shape}, expected {tuple(dims)}")
    return Y


def check_mode(mode, ndim):
    if not 0 <= mode < ndim:
        raise ValueError(f"mode {mode} out of range for an order-{ndim} tensor")
    return mode


def check_square(M, name="matrix"):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be square, got shape {M.shape}")
    return M


def check_fitted(obj, attribute):
    """Raise if an estimator has not been finalized yet."""
    if not getattr(obj, attribute, False):
        raise RuntimeError(
            f"{type(obj).__name__} is not finalized; call fit() or finalize() first"
        )
