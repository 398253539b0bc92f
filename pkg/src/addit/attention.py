"""Joint text/image attention, its source-extended weighted form, and diagnostics.

All tensors are per-head arrays shaped (heads, tokens, head_dim).  Queries and
keys are expected after rotary encoding.  Key partitions are always ordered
[source, prompt, target]; with no source partition this is the plain joint
attention over [prompt, image].
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize
from sklearn.base import BaseEstimator

from ._validation import check_positive
from .exceptions import BracketingError, ContractError
from .positional import DEFAULT_ROPE_BASE, apply_rotary, image_positions, rotation_angles

DEFAULT_BRACKET = (0.5, 2.0)
DEFAULT_GAMMA = 1.05


@dataclass
class AttentionState:
    """Queries/keys/values of one attention call, split by token origin.

    ``attn`` (heads, n_queries, n_keys) and the outputs are filled in by
    :func:`baseline_attention` / :func:`extended_attention`.
    """

    q_p: np.ndarray
    q_img: np.ndarray
    k_p: np.ndarray
    k_img: np.ndarray
    v_p: np.ndarray
    v_img: np.ndarray
    k_src: np.ndarray | None = None
    v_src: np.ndarray | None = None
    attn: np.ndarray | None = field(default=None, repr=False)
    out_p: np.ndarray | None = field(default=None, repr=False)
    out_img: np.ndarray | None = field(default=None, repr=False)
    block: int | None = None
    step: int | None = None

    @property
    def extended(self):
        return self.k_src is not None

    @property
    def head_dim(self):
        return self.q_p.shape[-1]

    @property
    def n_prompt(self):
        return self.q_p.shape[1]

    @property
    def partition_sizes(self):
        """Key counts per partition, (source, prompt, target)."""
        n_src = 0 if self.k_src is None else self.k_src.shape[1]
        return n_src, self.k_p.shape[1], self.k_img.shape[1]

    def without_source(self):
        return replace(self, k_src=None, v_src=None, attn=None, out_p=None, out_img=None)


@dataclass(frozen=True)
class AttentionWeights:
    """Per-partition key scales.  ``mode='auto'`` means gamma is solved at run time."""

    gamma_source: float = 1.0
    gamma_prompt: float = 1.0
    gamma_target: float = 1.0
    mode: str = "fixed"

    def __post_init__(self):
        if self.mode not in ("fixed", "auto"):
            raise ContractError(f"mode must be 'fixed' or 'auto', got {self.mode!r}")
        for name in ("gamma_source", "gamma_prompt", "gamma_target"):
            check_positive(getattr(self, name), name)

    @classmethod
    def balanced(cls, gamma=DEFAULT_GAMMA, mode="fixed"):
        """gamma_prompt = gamma_target = gamma, gamma_source = 1."""
        return cls(1.0, gamma, gamma, mode)

    @property
    def scales(self):
        return self.gamma_source, self.gamma_prompt, self.gamma_target


def softmax_rows(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def _check_nan(*arrays):
    for a in arrays:
        if a is not None and not np.all(np.isfinite(a)):
            raise ContractError("attention inputs contain NaN or inf")


def _attend(state, key_parts, value_parts):
    q = np.concatenate([state.q_p, state.q_img], axis=1)
    k = np.concatenate(key_parts, axis=1)
    v = np.concatenate(value_parts, axis=1)
    logits = q @ np.swapaxes(k, -1, -2) / math.sqrt(state.head_dim)
    attn = softmax_rows(logits)
    out = attn @ v
    n_p = state.n_prompt
    state.attn, state.out_p, state.out_img = attn, out[:, :n_p], out[:, n_p:]
    return state.out_p, state.out_img


def baseline_attention(state):
    """softmax([Q_p, Q_img][K_p, K_img]^T / sqrt(d_k)) [V_p, V_img]."""
    if state.extended:
        raise ContractError("baseline attention takes no source partition")
    _check_nan(state.q_p, state.q_img, state.k_p, state.k_img, state.v_p, state.v_img)
    return _attend(state, [state.k_p, state.k_img], [state.v_p, state.v_img])


def extended_attention(state, weights=AttentionWeights()):
    """Prompt and target queries attend over [source, prompt, target] keys.

    Keys of each partition are multiplied by their scale before the softmax;
    values are never scaled.  Source tokens contribute keys and values only.
    """
    if not state.extended or state.v_src is None:
        raise ContractError("extended attention requires source keys and values")
    if state.k_src.shape[-1] != state.head_dim or state.k_src.shape[:2] != state.v_src.shape[:2]:
        raise ContractError("source keys/values are not shape-compatible with the target")
    _check_nan(state.q_p, state.q_img, state.k_p, state.k_img, state.v_p, state.v_img,
               state.k_src, state.v_src)
    g_s, g_p, g_t = weights.scales
    return _attend(
        state,
        [g_s * state.k_src, g_p * state.k_p, g_t * state.k_img],
        [state.v_src, state.v_p, state.v_img],
    )


def attend(state, weights=None):
    """Dispatch on whether the state carries a source partition."""
    if state.extended:
        return extended_attention(state, weights or AttentionWeights())
    return baseline_attention(state)


# -- diagnostics -------------------------------------------------------------


def partition_mass(state, weights=AttentionWeights()):
    """Per-head, per-prompt-row attention mass on (source, prompt, target) keys.

    Returns an array (heads, n_prompt, 3).  Recomputes the prompt rows only.
    """
    g_s, g_p, g_t = weights.scales
    parts = [g_p * state.k_p, g_t * state.k_img]
    if state.extended:
        parts.insert(0, g_s * state.k_src)
    k = np.concatenate(parts, axis=1)
    attn = softmax_rows(state.q_p @ np.swapaxes(k, -1, -2) / math.sqrt(state.head_dim))
    n_src, n_p, _ = state.partition_sizes
    edges = np.cumsum([0, n_src, n_p, attn.shape[-1] - n_src - n_p])
    return np.stack([attn[..., a:b].sum(axis=-1) for a, b in zip(edges[:-1], edges[1:])], axis=-1)


def attention_spread(state, weights=AttentionWeights()):
    """Mean prompt-query attention fraction on (source, prompt, target)."""
    mass = partition_mass(state, weights)
    return tuple(float(x) for x in mass.mean(axis=(0, 1)))


def balance_residual(state, gamma):
    """f(gamma): prompt attention on source minus on target, with gamma_p = gamma_t = gamma."""
    if not state.extended:
        raise ContractError("balance residual needs a source partition")
    mass = partition_mass(state, AttentionWeights.balanced(gamma))
    return float(mass[..., 0].mean() - mass[..., 2].mean())


def solve_gamma(probe_state, tolerance=1e-4, bracket=DEFAULT_BRACKET):
    """Root of the source/target balance residual inside ``bracket``.

    Uses Brent's bracketing solver (bisection safeguarded secant/inverse
    quadratic steps) driven to a tight x-tolerance, then checks
    |f(gamma)| <= tolerance.
    """
    check_positive(tolerance, "tolerance")
    lo, hi = (float(b) for b in bracket)
    if not 0 < lo < hi:
        raise ContractError(f"invalid bracket {bracket}")

    def f(g):
        return balance_residual(probe_state, g)

    f_lo, f_hi = f(lo), f(hi)
    if f_lo == 0:
        return lo
    if f_hi == 0:
        return hi
    if np.sign(f_lo) == np.sign(f_hi):
        raise BracketingError(lo, hi, f_lo, f_hi)
    gamma = optimize.brentq(f, lo, hi, xtol=1e-12, rtol=4 * np.finfo(float).eps, maxiter=200)
    residual = f(gamma)
    if abs(residual) > tolerance:
        raise ContractError(f"solver stopped at gamma={gamma} with |f|={abs(residual):.3g} > {tolerance}")
    return float(gamma)


class GammaSolver(BaseEstimator):
    """Fit the attention balance factor on a batch of probe states.

    ``gammas_`` holds the per-probe roots; ``gamma_`` is their mean, the value
    one would fix for later runs.

    Parameters
    ----------
    tolerance : float
        Residual tolerance on |f(gamma)|.
    bracket : tuple of float
        Search interval for the root.
    """

    def __init__(self, tolerance=1e-4, bracket=DEFAULT_BRACKET):
        self.tolerance = tolerance
        self.bracket = bracket

    def fit(self, X, y=None):
        states = [X] if isinstance(X, AttentionState) else list(X)
        if not states:
            raise ContractError("GammaSolver.fit needs at least one probe state")
        self.gammas_ = np.array([solve_gamma(s, self.tolerance, self.bracket) for s in states])
        self.gamma_ = float(self.gammas_.mean())
        return self

    def weights(self):
        if not hasattr(self, "gamma_"):
            from sklearn.exceptions import NotFittedError

            raise NotFittedError("GammaSolver is not fitted")
        return AttentionWeights.balanced(self.gamma_)


class SpreadRecorder:
    """Caller-owned accumulator of per-(step, block) attention spreads."""

    columns = ("step", "block", "source_frac", "prompt_frac", "target_frac")

    def __init__(self):
        self.rows = []

    def record(self, step, block, state, weights=AttentionWeights()):
        src, p, tgt = attention_spread(state, weights)
        self.rows.append((int(step), int(block), src, p, tgt))

    def to_csv(self, path_or_file):
        if hasattr(path_or_file, "write"):
            self._write(path_or_file)
        else:
            with open(path_or_file, "w", newline="") as fh:
                self._write(fh)

    def _write(self, fh):
        writer = csv.writer(fh)
        writer.writerow(self.columns)
        for step, block, src, p, tgt in self.rows:
            writer.writerow([step, block, repr(src), repr(p), repr(tgt)])


# -- positional shift probe --------------------------------------------------


@dataclass(frozen=True)
class ShiftReport:
    offset: tuple
    salient_source: tuple
    before: tuple
    after: tuple


def _per_head(x, heads, head_dim):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x.reshape(x.shape[0], heads, head_dim).transpose(1, 0, 2)
    return x


def cross_image_argmax(q_target, k_source, q_subject, grid, *, source_offset=(0, 0),
                       subject_position=0, base=DEFAULT_ROPE_BASE):
    """Where the subject's most-attended source token lands in the target grid.

    Inputs are pre-rotation contents shaped (heads, tokens, head_dim); the
    subject query is (heads, head_dim).  The source keys are rotated at their
    grid positions plus ``source_offset``.  The subject query picks the source
    token with the largest head-averaged logit; the target location whose query
    scores highest against that key is returned as (row, col), together with
    the chosen source cell.
    """
    q_target = np.asarray(q_target, dtype=np.float64)
    k_source = np.asarray(k_source, dtype=np.float64)
    q_subject = np.asarray(q_subject, dtype=np.float64)
    head_dim = q_target.shape[-1]
    h, w = grid
    tgt_ang = rotation_angles(image_positions(grid), head_dim, base)
    src_ang = rotation_angles(image_positions(grid, source_offset), head_dim, base)
    sub_ang = rotation_angles(np.array([[subject_position, subject_position]]), head_dim, base)
    q_t = apply_rotary(q_target, tgt_ang)
    k_s = apply_rotary(k_source, src_ang)
    q_s = apply_rotary(q_subject[:, None, :], sub_ang)[:, 0]

    subject_logits = np.einsum("hd,hnd->n", q_s, k_s) / q_s.shape[0]
    salient = int(np.argmax(subject_logits))
    cross = np.einsum("hnd,hd->n", q_t, k_s[:, salient]) / q_t.shape[0]
    hit = int(np.argmax(cross))
    return divmod(salient, w), divmod(hit, w)


def shift_probe(q_target, k_source, q_subject, grid, offset, *, subject_position=0,
                base=DEFAULT_ROPE_BASE):
    """Compare the cross-image argmax with and without a source positional offset."""
    h, w = grid
    if abs(offset[0]) >= h or abs(offset[1]) >= w:
        raise ContractError(f"offset {offset} outside grid {grid}")
    salient, before = cross_image_argmax(q_target, k_source, q_subject, grid,
                                         subject_position=subject_position, base=base)
    _, after = cross_image_argmax(q_target, k_source, q_subject, grid, source_offset=offset,
                                  subject_position=subject_position, base=base)
    return ShiftReport(tuple(offset), salient, before, after)


def positional_shift_probe(model, source, prompt, offset, *, target=None, step_label=1000, block=0):
    """Run the shift probe on a model block's projections of real latents.

    The target latent defaults to the source itself.  The subject query is the
    prompt's subject token (or its last token).
    """
    target = source if target is None else target
    src = model.block_projections(block, source, prompt, step_label)
    tgt = model.block_projections(block, target, prompt, step_label)
    idx = prompt.subject_index if prompt.subject_index is not None else len(prompt.tokens) - 1
    return shift_probe(tgt["q_img"], src["k_img"], tgt["q_p"][:, idx], model.config.image_grid,
                       offset, subject_position=idx, base=model.config.rope_base)
