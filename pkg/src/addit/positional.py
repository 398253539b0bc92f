"""Two-axis rotary positional encoding for text and image tokens.

Each head dimension is split into rotation pairs; the first half of the pairs
rotates with the row coordinate, the second half with the column coordinate.
Pair ``j`` of an axis turns at angular frequency ``base ** (-j / pairs_per_axis)``
with ``base = 100`` by default, so the fastest pair turns one radian per grid
cell.  Image token (r, c) sits at position (r + drow, c + dcol); text token i
sits at (i, i).  Constants are toy choices.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import ContractError

DEFAULT_ROPE_BASE = 100.0


def axis_frequencies(head_dim, base=DEFAULT_ROPE_BASE):
    if head_dim % 4:
        raise ContractError(f"head_dim must be divisible by 4, got {head_dim}")
    per_axis = head_dim // 4
    return base ** (-np.arange(per_axis, dtype=np.float64) / per_axis)


def image_positions(grid, offset=(0, 0)):
    """(height*width, 2) integer positions in row-major token order."""
    h, w = grid
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pos = np.stack([rows.ravel(), cols.ravel()], axis=1).astype(np.int64)
    return pos + np.asarray(offset, dtype=np.int64)


def text_positions(length):
    idx = np.arange(length, dtype=np.int64)
    return np.stack([idx, idx], axis=1)


def rotation_angles(positions, head_dim, base=DEFAULT_ROPE_BASE):
    """Per-token rotation phases, shape (n_tokens, head_dim // 2)."""
    freqs = axis_frequencies(head_dim, base)
    pos = np.asarray(positions, dtype=np.float64)
    return np.concatenate([np.outer(pos[:, 0], freqs), np.outer(pos[:, 1], freqs)], axis=1)


def apply_rotary(x, angles):
    """Rotate consecutive channel pairs of ``x`` (..., n_tokens, head_dim)."""
    cos, sin = np.cos(angles), np.sin(angles)
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos
    return out


@dataclass(frozen=True)
class PositionalEncoding:
    """Rotation phases for an image grid under an integer (drow, dcol) offset."""

    grid: tuple
    head_dim: int
    offset: tuple = (0, 0)
    base: float = DEFAULT_ROPE_BASE

    @property
    def positions(self):
        return image_positions(self.grid, self.offset)

    @property
    def angles(self):
        return rotation_angles(self.positions, self.head_dim, self.base)

    def shifted(self, drow, dcol):
        return PositionalEncoding(
            self.grid, self.head_dim, (self.offset[0] + drow, self.offset[1] + dcol), self.base
        )
