"""Affordance / inclusion metrics, benchmark records, a toy change detector, and sweeps."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from sklearn.base import clone

from .exceptions import ContractError, SchemaError
from .masking import CROSS

SCORE_THRESHOLD = 0.5
AFFORDANCE_FRACTION = 0.5


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box: (x, y) is the top-left corner; x runs along columns."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ContractError(f"box needs positive width and height, got {self}")

    @property
    def area(self):
        return self.w * self.h

    @property
    def x2(self):
        return self.x + self.w

    @property
    def y2(self):
        return self.y + self.h

    def within(self, width, height):
        return self.x >= 0 and self.y >= 0 and self.x2 <= width and self.y2 <= height

    def translate(self, dx, dy):
        return BBox(self.x + dx, self.y + dy, self.w, self.h)

    def to_list(self):
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True)
class Detection:
    box: BBox
    score: float = 1.0
    label: str = "object"

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ContractError(f"detection score must be in [0, 1], got {self.score}")


@dataclass
class BenchmarkRecord:
    src_prompt: str
    tgt_prompt: str
    subject_token: str
    instruction: str
    gt_boxes: list
    source: object = None
    detections: list | None = None
    extra: dict = field(default_factory=dict)


# -- metrics -------------------------------------------------------------------


def union_overlap_area(box, others):
    """Exact area of ``box`` ∩ (union of ``others``) by coordinate compression."""
    clipped = []
    for o in others:
        x1, y1 = max(box.x, o.x), max(box.y, o.y)
        x2, y2 = min(box.x2, o.x2), min(box.y2, o.y2)
        if x2 > x1 and y2 > y1:
            clipped.append((x1, y1, x2, y2))
    if not clipped:
        return 0.0
    xs = sorted({c[0] for c in clipped} | {c[2] for c in clipped})
    ys = sorted({c[1] for c in clipped} | {c[3] for c in clipped})
    area = 0.0
    for xa, xb in zip(xs[:-1], xs[1:]):
        for ya, yb in zip(ys[:-1], ys[1:]):
            if any(c[0] <= xa and xb <= c[2] and c[1] <= ya and yb <= c[3] for c in clipped):
                area += (xb - xa) * (yb - ya)
    return area


def inside_fraction(detection, gt):
    box = detection.box if isinstance(detection, Detection) else detection
    return union_overlap_area(box, gt) / box.area


def affordance_score(detections, gt):
    """Fraction of detections with at least half their area inside the union of GT boxes.

    Returns 0.0 when there are no detections; use :func:`evaluate_image` to get
    the accompanying ``undetected`` flag.
    """
    if not detections:
        return 0.0
    hits = sum(inside_fraction(d, gt) >= AFFORDANCE_FRACTION for d in detections)
    return hits / len(detections)


def evaluate_image(detections, gt, score_threshold=SCORE_THRESHOLD):
    kept = [d for d in detections if d.score >= score_threshold]
    return {
        "affordance": affordance_score(kept, gt),
        "detected": bool(kept),
        "undetected": not kept,
        "n_detections": len(kept),
    }


def inclusion_rate(per_image_detections, score_threshold=SCORE_THRESHOLD):
    """Fraction of images with at least one detection scoring >= ``score_threshold``."""
    per_image_detections = list(per_image_detections)
    if not per_image_detections:
        return 0.0
    hit = sum(any(d.score >= score_threshold for d in dets) for dets in per_image_detections)
    return hit / len(per_image_detections)


def summarize(per_image_detections, gts, score_threshold=SCORE_THRESHOLD):
    """{affordance, inclusion, n}; affordance averages over images with a detection."""
    rows = [evaluate_image(d, g, score_threshold) for d, g in zip(per_image_detections, gts)]
    detected = [r["affordance"] for r in rows if r["detected"]]
    return {
        "affordance": float(np.mean(detected)) if detected else None,
        "inclusion": inclusion_rate(per_image_detections, score_threshold),
        "n": len(rows),
    }


# -- toy detector ------------------------------------------------------------------


def robust_sigma(values):
    """1.4826 * median absolute deviation."""
    v = np.asarray(values, dtype=np.float64).ravel()
    return 1.4826 * float(np.median(np.abs(v - np.median(v))))


class ToyDetector:
    """Change detector standing in for an open-vocabulary detector.

    The difference field is the per-cell channel norm of ``after - before``.
    Cells above ``k`` robust standard deviations (MAD based) of that field are
    grouped into 4-connected components; components smaller than ``min_size``
    cells are dropped.  Each component yields its bounding box and a score equal
    to its mean difference divided by ``reference_scale``, clipped to [0, 1].
    """

    def __init__(self, k=3.0, min_size=2, reference_scale=1.0, label="object"):
        self.k = k
        self.min_size = min_size
        self.reference_scale = reference_scale
        self.label = label

    def difference(self, before, after):
        before, after = np.asarray(before, dtype=np.float64), np.asarray(after, dtype=np.float64)
        if before.shape != after.shape:
            raise ContractError(f"shape mismatch {before.shape} vs {after.shape}")
        return np.linalg.norm(after - before, axis=-1) if before.ndim == 3 else np.abs(after - before)

    def __call__(self, before, after):
        diff = self.difference(before, after)
        hot = diff > self.k * robust_sigma(diff)
        labels, n = ndimage.label(hot, structure=CROSS)
        out = []
        for i, sl in enumerate(ndimage.find_objects(labels), start=1):
            comp = labels[sl] == i
            if comp.sum() < self.min_size:
                continue
            rows, cols = sl
            score = min(1.0, float(diff[sl][comp].mean()) / self.reference_scale)
            box = BBox(cols.start, rows.start, cols.stop - cols.start, rows.stop - rows.start)
            out.append(Detection(box, score, self.label))
        return out


def toy_detector(before, after, **kwargs):
    return ToyDetector(**kwargs)(before, after)


# -- benchmark I/O ------------------------------------------------------------------

REQUIRED_FIELDS = ("src_prompt", "tgt_prompt", "subject_token", "instruction", "gt_boxes")


def _parse_box(raw, index):
    try:
        if isinstance(raw, dict):
            return BBox(float(raw["x"]), float(raw["y"]), float(raw["w"]), float(raw["h"]))
        x, y, w, h = (float(v) for v in raw)
        return BBox(x, y, w, h)
    except (KeyError, TypeError, ValueError, ContractError) as exc:
        raise SchemaError(f"bad box {raw!r}: {exc}", index) from None


def parse_record(raw, index):
    if not isinstance(raw, dict):
        raise SchemaError("record must be an object", index)
    missing = [k for k in REQUIRED_FIELDS if k not in raw]
    if missing:
        raise SchemaError(f"missing fields {missing}", index)
    for key in REQUIRED_FIELDS[:4]:
        if not isinstance(raw[key], str):
            raise SchemaError(f"{key} must be a string", index)
    if raw["subject_token"] not in raw["tgt_prompt"].split():
        raise SchemaError(f"subject_token {raw['subject_token']!r} not in tgt_prompt", index)
    if not isinstance(raw["gt_boxes"], list) or not raw["gt_boxes"]:
        raise SchemaError("gt_boxes must be a non-empty list", index)
    boxes = [_parse_box(b, index) for b in raw["gt_boxes"]]
    detections = None
    if raw.get("detections") is not None:
        detections = []
        for d in raw["detections"]:
            try:
                detections.append(Detection(_parse_box(d["box"], index), float(d.get("score", 1.0)),
                                            d.get("label", raw["subject_token"])))
            except (KeyError, TypeError, ContractError) as exc:
                raise SchemaError(f"bad detection {d!r}: {exc}", index) from None
    extra = {k: v for k, v in raw.items() if k not in REQUIRED_FIELDS + ("source", "detections")}
    return BenchmarkRecord(raw["src_prompt"], raw["tgt_prompt"], raw["subject_token"],
                           raw["instruction"], boxes, raw.get("source"), detections, extra)


def load_benchmark(path_or_text):
    """Parse a JSON list of benchmark records; errors name the offending index."""
    text = path_or_text
    if not str(path_or_text).lstrip().startswith("["):
        with open(path_or_text) as fh:
            text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}") from None
    if not isinstance(doc, list):
        raise SchemaError("benchmark must be a JSON list of records")
    return [parse_record(r, i) for i, r in enumerate(doc)]


# -- sweeps -----------------------------------------------------------------------

SWEEP_PARAMS = {"gamma": "gamma", "t_struct": "t_struct", "t_blend": "t_blend"}


def parse_grid(text):
    """'start:stop:step' (inclusive of stop) or a comma list."""
    if ":" in text:
        start, stop, step = (float(p) for p in text.split(":"))
        if step <= 0:
            raise ContractError("grid step must be positive")
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 10) for i in range(n)]
    return [float(p) for p in text.split(",") if p.strip()]


def sweep(editor, parameter, grid, cases, detector=None, score_threshold=SCORE_THRESHOLD):
    """Evaluate ``editor`` at each grid value of ``parameter``.

    ``cases`` is a list of (fit_kwargs, prompt, gt_boxes, edit_overrides)
    tuples; fit_kwargs go to ``AdditEditor.fit``.  Returns rows of
    (value, affordance, inclusion).
    """
    if parameter not in SWEEP_PARAMS:
        raise ContractError(f"cannot sweep {parameter!r}; choose from {sorted(SWEEP_PARAMS)}")
    grid = list(grid)
    if not grid:
        raise ContractError("sweep grid is empty")
    detector = detector or ToyDetector()
    rows = []
    for value in grid:
        if parameter in ("t_struct", "t_blend"):
            value = int(round(value))
        est = clone(editor).set_params(**{SWEEP_PARAMS[parameter]: value})
        dets, gts = [], []
        for fit_kwargs, prompt, gt, overrides in cases:
            result = est.fit(**fit_kwargs).edit(prompt, **(overrides or {}))
            dets.append(detector(result.source, result.output))
            gts.append(gt)
        summary = summarize(dets, gts, score_threshold)
        rows.append((value, summary["affordance"], summary["inclusion"]))
    return rows


def write_rows_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if v is None else v for v in row])
