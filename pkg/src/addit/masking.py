"""Subject-guided latent blending: attention map -> rough mask -> points -> mask -> blend."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_latent, check_mask, check_same_shape
from .exceptions import ContractError, DegenerateInputError

DEFAULT_BINS = 64
STOP_RATIO = 0.35
MAX_POINTS = 4
# 4-connectivity everywhere
CROSS = ndimage.generate_binary_structure(2, 1)


@dataclass
class SubjectMask:
    saliency: np.ndarray = field(repr=False)
    rough: np.ndarray = field(repr=False)
    refined: np.ndarray = field(repr=False)
    points: list
    otsu_threshold: float


# -- attention maps ----------------------------------------------------------


def subject_saliency(state, subject_index, grid):
    """Head-averaged rectified Q_target . k_object / sqrt(d_k) over the image grid."""
    if subject_index is None:
        raise ContractError("no subject token index")
    if not 0 <= subject_index < state.k_p.shape[1]:
        raise ContractError(f"subject_index {subject_index} out of range")
    k_obj = state.k_p[:, subject_index]
    scores = np.einsum("hnd,hd->hn", state.q_img, k_obj) / math.sqrt(state.head_dim)
    return np.maximum(scores, 0.0).mean(axis=0).reshape(grid)


def normalize_max(grid_map):
    peak = grid_map.max()
    return grid_map / peak if peak > 0 else np.zeros_like(grid_map)


def aggregate_subject_attention(maps):
    """Mean of per-(block, step) saliency grids, then scaled so the max is 1.

    ``maps`` is an iterable of (height, width) non-negative arrays, or a dict
    keyed by (block, step).
    """
    if isinstance(maps, dict):
        maps = list(maps.values())
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    if not maps:
        raise ContractError("no attention maps recorded for the configured layer/step set")
    if any(m.shape != maps[0].shape for m in maps):
        raise ContractError("attention maps disagree in shape")
    if any(np.any(m < 0) for m in maps):
        raise ContractError("attention maps must be non-negative")
    return normalize_max(np.mean(maps, axis=0))


class SubjectMapRecorder:
    """Attention hook collecting subject saliency for selected (block, step) pairs."""

    def __init__(self, subject_index, grid, layer_step_set=None):
        self.subject_index = subject_index
        self.grid = tuple(grid)
        self.layer_step_set = None if layer_step_set is None else set(layer_step_set)
        self.maps = {}

    def wants(self, block, step):
        return self.layer_step_set is None or (block, step) in self.layer_step_set

    def record(self, step, block, state):
        if self.subject_index is not None and self.wants(block, step):
            self.maps[block, step] = subject_saliency(state, self.subject_index, self.grid)

    def aggregate(self, pairs=None):
        keys = self.maps.keys() if pairs is None else [p for p in pairs if p in self.maps]
        if pairs is not None and len(keys) != len(set(pairs)):
            missing = sorted(set(pairs) - set(self.maps))
            raise ContractError(f"recorder lacks maps for {missing}")
        return aggregate_subject_attention([self.maps[k] for k in keys])


# -- Otsu --------------------------------------------------------------------


def _bin_indices(values, num_bins):
    lo, hi = values.min(), values.max()
    idx = np.floor((values - lo) / (hi - lo) * num_bins).astype(np.int64)
    return np.clip(idx, 0, num_bins - 1)


def otsu_bin(saliency, num_bins=DEFAULT_BINS):
    """Index k of the last bin in the lower class maximising between-class variance.

    Bins split [min, max] evenly; class means use bin centres (in units of bin
    index).  Ties go to the smallest k.
    """
    values = np.asarray(saliency, dtype=np.float64).ravel()
    if values.size == 0 or values.min() == values.max():
        raise DegenerateInputError("Otsu threshold needs at least two distinct values")
    counts = np.bincount(_bin_indices(values, num_bins), minlength=num_bins).astype(np.float64)
    centers = np.arange(num_bins) + 0.5
    total = counts.sum()
    w0 = np.cumsum(counts)[:-1]
    s0 = np.cumsum(counts * centers)[:-1]
    w1 = total - w0
    s1 = (counts * centers).sum() - s0
    with np.errstate(divide="ignore", invalid="ignore"):
        between = w0 * w1 * (s0 / w0 - s1 / w1) ** 2 / total**2
    between = np.where((w0 > 0) & (w1 > 0), between, -np.inf)
    return int(np.argmax(between))


def otsu_threshold(saliency, num_bins=DEFAULT_BINS):
    """Threshold value at the upper edge of the chosen bin; the rough mask is ``map > t``.

    Returns (threshold, rough_mask).  The mask is derived from bin membership so
    it agrees with the histogram split exactly.
    """
    s = np.asarray(saliency, dtype=np.float64)
    k = otsu_bin(s, num_bins)
    lo, hi = s.min(), s.max()
    threshold = lo + (k + 1) * (hi - lo) / num_bins
    rough = _bin_indices(s.ravel(), num_bins).reshape(s.shape) > k
    return float(threshold), rough


class OtsuThresholder(TransformerMixin, BaseEstimator):
    """Fit a histogram Otsu threshold on a saliency map; transform maps to masks."""

    def __init__(self, num_bins=DEFAULT_BINS):
        self.num_bins = num_bins

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        self.bin_ = otsu_bin(X, self.num_bins)
        self.threshold_, _ = otsu_threshold(X, self.num_bins)
        self.range_ = (float(X.min()), float(X.max()))
        return self

    def transform(self, X):
        X = np.asarray(X, dtype=np.float64)
        lo, hi = self.range_
        idx = np.clip(np.floor((X - lo) / (hi - lo) * self.num_bins), 0, self.num_bins - 1)
        return idx > self.bin_


# -- localisation points ------------------------------------------------------


def exclusion_radius(grid):
    return math.ceil(max(grid) / 8)


def sample_points(saliency, max_points=MAX_POINTS, stop_ratio=STOP_RATIO, radius=None):
    """Greedy local-maximum picking with disk suppression.

    Take the global maximum (row-major first on ties), suppress every cell
    within Euclidean ``radius`` of it, and repeat until ``max_points`` are
    chosen or the remaining maximum drops below ``stop_ratio`` times the
    initial maximum.
    """
    s = np.array(saliency, dtype=np.float64)
    if s.min() == s.max():
        raise DegenerateInputError("cannot sample points from a constant map")
    radius = exclusion_radius(s.shape) if radius is None else radius
    rows, cols = np.indices(s.shape)
    p_max = s.max()
    points = []
    while len(points) < max_points:
        flat = int(np.argmax(s))
        value = s.flat[flat]
        if not np.isfinite(value) or (points and value < stop_ratio * p_max):
            break
        r, c = divmod(flat, s.shape[1])
        points.append((r, c))
        s[(rows - r) ** 2 + (cols - c) ** 2 <= radius**2] = -np.inf
    return points


# -- refinement ---------------------------------------------------------------


def intensity_field(x0_estimate):
    """Per-token channel norm of a latent."""
    return np.linalg.norm(check_latent(x0_estimate, name="x0_estimate"), axis=-1)


def grow_regions(field_, points, tolerance):
    """Union of the 4-connected components of |I - I(seed)| <= tol containing each seed."""
    grown = np.zeros(field_.shape, dtype=bool)
    for r, c in points:
        similar = np.abs(field_ - field_[r, c]) <= tolerance
        labels, _ = ndimage.label(similar, structure=CROSS)
        grown |= labels == labels[r, c]
    return grown


def refine_mask(x0_estimate, rough, points, tolerance_scale=0.2):
    """Point-prompted region growing standing in for a learned segmenter.

    M = grown ∪ (rough ∩ dilate(grown, 1)), where ``grown`` is the region
    grown from the points with tolerance ``tolerance_scale * std(I)``.
    """
    if not points:
        raise ContractError("refine_mask needs at least one point")
    field_ = intensity_field(x0_estimate)
    rough = check_mask(rough, field_.shape, "rough")
    for r, c in points:
        if not (0 <= r < field_.shape[0] and 0 <= c < field_.shape[1]):
            raise ContractError(f"point {(r, c)} outside grid {field_.shape}")
    grown = grow_regions(field_, points, tolerance_scale * field_.std())
    ring = ndimage.binary_dilation(grown, structure=CROSS)
    return grown | (rough & ring)


def blend_latents(z_target, z_source, mask):
    """M * z_target + (1 - M) * z_source, selecting whole cells exactly."""
    z_target = np.asarray(z_target, dtype=np.float64)
    z_source = np.asarray(z_source, dtype=np.float64)
    check_same_shape(z_target, z_source, ("z_target", "z_source"))
    m = check_mask(mask, z_target.shape[:2])
    return np.where(m[..., None], z_target, z_source)


def build_subject_mask(saliency, x0_estimate, num_bins=DEFAULT_BINS, max_points=MAX_POINTS,
                       stop_ratio=STOP_RATIO, tolerance_scale=0.2):
    """Full localisation chain on an aggregated, max-normalised saliency map."""
    threshold, rough = otsu_threshold(saliency, num_bins)
    points = sample_points(saliency, max_points, stop_ratio)
    refined = refine_mask(x0_estimate, rough, points, tolerance_scale)
    return SubjectMask(saliency, rough, refined, points, threshold)


# -- export ---------------------------------------------------------------------


def to_pgm(grid, path):
    """8-bit binary PGM; floats are scaled by their max, booleans map to 0/255."""
    g = np.asarray(grid)
    if g.dtype == bool:
        img = g.astype(np.uint8) * 255
    else:
        g = g.astype(np.float64)
        lo, hi = g.min(), g.max()
        img = np.zeros(g.shape, np.uint8) if hi == lo else np.rint((g - lo) / (hi - lo) * 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    header = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if header is None:
        raise ContractError("not a binary PGM file")
    w, h, maxval = (int(g) for g in header.groups())
    if maxval != 255:
        raise ContractError("only 8-bit PGM is supported")
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=header.end()).reshape(h, w)


def mask_to_json(mask):
    return json.dumps(np.asarray(mask, dtype=bool).tolist())


def mask_from_json(text):
    return np.asarray(json.loads(text), dtype=bool)


def points_to_json(points):
    return json.dumps([[int(r), int(c)] for r, c in points])
