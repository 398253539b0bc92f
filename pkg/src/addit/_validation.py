"""Input validation helpers shared by the estimators and functional APIs."""

from numbers import Integral, Real

import numpy as np

from .exceptions import ContractError


def check_latent(x, *, grid=None, name="latent"):
    """Return ``x`` as a finite float64 array of shape (height, width, channels)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 3:
        raise ContractError(f"{name} must be 3-D (height, width, channels), got shape {arr.shape}")
    if grid is not None and tuple(arr.shape[:2]) != tuple(grid):
        raise ContractError(f"{name} grid {arr.shape[:2]} does not match expected {tuple(grid)}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains non-finite values")
    return arr


def check_same_shape(a, b, names=("a", "b")):
    if np.shape(a) != np.shape(b):
        raise ContractError(f"shape mismatch: {names[0]}{np.shape(a)} vs {names[1]}{np.shape(b)}")


def check_finite(x, name="array"):
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains NaN or inf")
    return arr


def check_mask(mask, grid, name="mask"):
    """Boolean (height, width) grid matching ``grid``."""
    m = np.asarray(mask)
    if m.shape != tuple(grid):
        raise ContractError(f"{name} shape {m.shape} does not match grid {tuple(grid)}")
    if m.dtype != bool:
        if not np.all(np.isin(m, (0, 1))):
            raise ContractError(f"{name} must be boolean or 0/1 valued")
        m = m.astype(bool)
    return m


def check_positive(value, name):
    if not isinstance(value, Real) or not np.isfinite(value) or value <= 0:
        raise ContractError(f"{name} must be a positive finite number, got {value!r}")
    return float(value)


def check_seed(seed, name="seed"):
    if isinstance(seed, (bool, np.bool_)) or not isinstance(seed, Integral):
        raise ContractError(f"{name} must be an integer, got {seed!r}")
    if not 0 <= int(seed) < 2**64:
        raise ContractError(f"{name} must fit in 64 unsigned bits, got {seed}")
    return int(seed)
