"""File formats: latents (.npy), renders (PGM), requests/results (JSON + sidecars), manifests."""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .masking import mask_to_json, to_pgm
from .model import embed_prompt
from .pipeline import EditRequest, EditResult, PipelineConfig


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def save_latent(path, latent):
    np.save(path, np.asarray(latent, dtype=np.float64), allow_pickle=False)


def load_latent(path):
    return np.load(path, allow_pickle=False)


def render(latent, path):
    """Channel-norm grayscale render; diagnostic only."""
    to_pgm(np.linalg.norm(np.asarray(latent), axis=-1), path)


def save_request(request, directory, name="request"):
    directory = Path(directory)
    doc = {
        "target_prompt": list(request.target_prompt.words),
        "subject_index": request.target_prompt.subject_index,
        "source_prompt": None if request.source_prompt is None else list(request.source_prompt.words),
        "config": request.config.to_dict(),
    }
    if request.config.mode == "real":
        sidecar = f"{name}_source.npy"
        save_latent(directory / sidecar, request.source)
        doc["source"] = {"latent": sidecar}
    else:
        doc["source"] = {"seed": int(request.source)}
    path = directory / f"{name}.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


def load_request(path, model_config):
    path = Path(path)
    doc = json.loads(path.read_text())
    words = doc["target_prompt"]
    idx = doc.get("subject_index")
    prompt = embed_prompt(words, model_config, words[idx] if idx is not None else None)
    src_prompt = None if doc.get("source_prompt") is None else embed_prompt(doc["source_prompt"], model_config)
    cfg = PipelineConfig.from_dict(doc["config"])
    if "latent" in doc["source"]:
        source = load_latent(path.parent / doc["source"]["latent"])
    else:
        source = doc["source"]["seed"]
    return EditRequest(source, prompt, cfg, src_prompt)


def write_trace(path, result):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EditResult.trace_columns)
        w.writerows(result.trace)


def write_spread(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("step", "block", "source_frac", "prompt_frac", "target_frac"))
        for step, block, src, p, tgt in rows:
            w.writerow([step, block, repr(src), repr(p), repr(tgt)])


def save_result(result, directory, config=None):
    """Write an EditResult as JSON plus binary/CSV/PGM sidecars; returns written paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    written = []

    def out(name):
        written.append(d / name)
        return d / name

    save_latent(out("output.npy"), result.output)
    render(result.output, out("output.pgm"))
    save_latent(out("source.npy"), result.source)
    write_spread(out("spread.csv"), result.spread)
    write_trace(out("trace.csv"), result)
    doc = {
        "output": "output.npy",
        "source": "source.npy",
        "gamma": result.gamma,
        "warnings": list(result.warnings),
        "spread": "spread.csv",
        "trace": "trace.csv",
        "mask": None,
    }
    if result.mask is not None:
        m = result.mask
        out("mask_rough.json").write_text(mask_to_json(m.rough))
        out("mask.json").write_text(mask_to_json(m.refined))
        out("points.json").write_text(json.dumps([[int(r), int(c)] for r, c in m.points]))
        to_pgm(m.rough, out("mask_rough.pgm"))
        to_pgm(m.refined, out("mask.pgm"))
        to_pgm(m.saliency, out("saliency.pgm"))
        doc["mask"] = {
            "rough": "mask_rough.json",
            "refined": "mask.json",
            "points": [[int(r), int(c)] for r, c in m.points],
            "otsu_threshold": m.otsu_threshold,
        }
    if config is not None:
        doc["config"] = config.to_dict()
    out("result.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    return written
