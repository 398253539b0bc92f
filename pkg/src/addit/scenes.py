"""Constructed oracle-backend scenes for direction checks and CLI sweeps."""

from dataclasses import dataclass

import numpy as np

from .backends import OracleBackend, random_probe
from .evaluation import BBox
from .model import TokenSequence


@dataclass
class InsertionScene:
    backend: OracleBackend
    prompt: TokenSequence
    gt_boxes: list
    reference_scale: float


def placeholder_prompt(words=("a", "dog"), subject="dog", dim=4):
    """Token sequence for backends that ignore prompt contents."""
    words = tuple(words)
    return TokenSequence(words, tuple(range(len(words))), np.zeros((len(words), dim)),
                         words.index(subject) if subject in words else None)


def insertion_scene(seed=0, grid=(8, 8), channels=4, amplitude=2.0, patch=2,
                    placements=((1, 1), (5, 5)), include_empty=True):
    """Scene + object-at-plausible-placement dataset.

    The source dataset is the bare scene.  Target points are the scene with an
    additive ``patch`` x ``patch`` object at each placement, plus (when
    ``include_empty``) the bare scene, so a run can fail to add the object.
    Ground-truth boxes are the placements.  ``reference_scale`` is the object's
    per-cell channel-norm, so a fully rendered object scores 1 with the toy
    detector.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    h, w = grid
    scene = rng.standard_normal((h, w, channels))
    points, masks, boxes = [], [], []
    for r, c in placements:
        x = scene.copy()
        x[r:r + patch, c:c + patch] += amplitude
        m = np.zeros(grid, dtype=bool)
        m[r:r + patch, c:c + patch] = True
        points.append(x)
        masks.append(m)
        boxes.append(BBox(c, r, patch, patch))
    if include_empty:
        points.append(scene)
        masks.append(np.zeros(grid, dtype=bool))
    backend = OracleBackend([scene], points, masks, random_probe(seed))
    return InsertionScene(backend, placeholder_prompt(), boxes, amplitude * np.sqrt(channels))


def two_point_backend(seed=1, grid=(8, 8), channels=4):
    """Source and target share one two-point dataset."""
    rng = np.random.Generator(np.random.Philox(seed))
    pts = rng.standard_normal((2, *grid, channels))
    return OracleBackend(pts, pts, probe=random_probe(seed))
