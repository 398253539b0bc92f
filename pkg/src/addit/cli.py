"""Training-free object insertion on a toy MM-DiT.

Renders are channel-norm grayscale maps of toy latents: diagnostics, not photographs.

Exit codes: 0 success, 1 usage error, 2 data/schema error, 3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .attention import AttentionWeights, balance_residual
from .evaluation import (
    ToyDetector,
    evaluate_image,
    load_benchmark,
    parse_grid,
    summarize,
    sweep,
    write_rows_csv,
)
from .exceptions import ContractError, SchemaError
from .flow import Schedule
from .io import load_latent, render, save_latent, save_request, save_result, sha256_file, write_spread
from .model import ModelConfig, ToyMMDiT, embed_prompt
from .pipeline import AdditEditor, EditRequest, ExtensionSchedule, PipelineConfig, run_edit
from .backends import ModelBackend
from .scenes import insertion_scene

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
logger = logging.getLogger("addit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _gamma_arg(text):
    if text == "auto":
        return text
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"gamma must be 'auto' or a number, got {text!r}") from None
    if value <= 0:
        raise argparse.ArgumentTypeError("gamma must be positive")
    return value


def _env_seed():
    raw = os.environ.get("ADDIT_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"ADDIT_SEED must be an integer, got {raw!r}") from None


def _add_common(p):
    p.add_argument("--config", type=Path, help="JSON file with optional 'model' and 'pipeline' sections")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--steps", type=int, default=None, help="denoising steps (default 30)")
    p.add_argument("--seed", type=int, default=None, help="noise seed (falls back to $ADDIT_SEED, then 0)")


def _add_edit_flags(p, prompt_required=True):
    p.add_argument("--prompt", required=prompt_required, help="target prompt, whitespace separated")
    p.add_argument("--subject", help="the added-object word in the prompt")
    p.add_argument("--source-prompt", help="prompt of the source image (generated mode)")
    p.add_argument("--source", type=Path, help="clean source latent (.npy) for --mode real")
    p.add_argument("--source-seed", type=int, default=None, help="seed that generates the source")
    p.add_argument("--mode", choices=("generated", "real"), default=None)
    p.add_argument("--t-struct", type=int, default=None)
    p.add_argument("--t-blend", type=int, default=None)
    p.add_argument("--gamma", type=_gamma_arg, default=None, help="'auto' or a positive number (default 1.05)")
    p.add_argument("--ext-multi-until", type=int, default=None)
    p.add_argument("--ext-single-until", type=int, default=None)
    p.add_argument("--no-extension", action="store_true", help="disable extended attention")
    p.add_argument("--no-blend", action="store_true", help="disable latent blending")
    p.add_argument("--blend-all", action="store_true",
                   help="blend with an all-zero mask at every step from t_blend on (keeps the source)")


def build_parser():
    parser = _Parser(prog="addit", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="sample a source latent from a prompt")
    _add_common(p)
    p.add_argument("--prompt", required=True)

    p = sub.add_parser("edit", help="insert an object with a target prompt")
    _add_common(p)
    _add_edit_flags(p)

    p = sub.add_parser("analyze", help="attention spread per gamma setting and the balance curve")
    _add_common(p)
    _add_edit_flags(p)
    p.add_argument("--gammas", default="1.0,auto,1.2", help="comma list of gamma settings")

    p = sub.add_parser("sweep", help="affordance/inclusion across a parameter grid")
    _add_common(p)
    p.add_argument("--param", choices=("gamma", "t_struct", "t_blend"), required=True)
    p.add_argument("--grid", required=True, help="start:stop:step (inclusive) or comma list")
    p.add_argument("--n-seeds", type=int, default=50)
    p.add_argument("--scene-seed", type=int, default=0)

    p = sub.add_parser("eval", help="affordance and inclusion on a benchmark JSON")
    _add_common(p)
    p.add_argument("--benchmark", type=Path, required=True)
    p.add_argument("--score-threshold", type=float, default=0.5)
    return parser


# -- config assembly -------------------------------------------------------------


def _load_config_file(path):
    if path is None:
        return {}, {}
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise SchemaError("config must be a JSON object")
    return doc.get("model", {}), doc.get("pipeline", {})


def _seed(args, default=0):
    if args.seed is not None:
        return args.seed
    env = _env_seed()
    return env if env is not None else default


def _model(model_doc):
    try:
        return ToyMMDiT(ModelConfig.from_dict(model_doc))
    except (TypeError, ContractError) as exc:
        raise UsageError(f"bad model config: {exc}") from None


def _pipeline_config(args, base_doc):
    try:
        cfg = PipelineConfig.from_dict(base_doc)
        ext = cfg.extension
        ext = ExtensionSchedule(
            args.ext_multi_until if args.ext_multi_until is not None else ext.multi_stream_until,
            args.ext_single_until if args.ext_single_until is not None else ext.single_stream_until,
            ext.enabled and not args.no_extension,
        )
        weights = cfg.weights
        if args.gamma == "auto":
            weights = AttentionWeights.balanced(1.0, mode="auto")
        elif args.gamma is not None:
            weights = AttentionWeights.balanced(args.gamma)
        updates = {"extension": ext, "weights": weights, "target_seed": _seed(args, cfg.target_seed)}
        for flag, key in (("mode", "mode"), ("t_struct", "t_struct"), ("t_blend", "t_blend"),
                          ("steps", "num_steps"), ("source_seed", "source_seed")):
            value = getattr(args, flag)
            if value is not None:
                updates[key] = value
        if args.no_blend:
            updates["blend"] = False
        cfg = replace(cfg, **updates)
        schedule = cfg.schedule()
        schedule.index_for(cfg.resolved_t_struct)
        schedule.index_for(cfg.t_blend)
        if args.blend_all:
            cfg = replace(cfg, blend=True, blend_repeat=True)
        return cfg
    except (TypeError, ContractError) as exc:
        raise UsageError(f"bad pipeline config: {exc}") from None


def _edit_request(args, model, cfg):
    prompt = embed_prompt(args.prompt, model.config, args.subject)
    if args.subject is not None and prompt.subject_index is None:
        logger.warning("subject %r not found in prompt; blending will be skipped", args.subject)
    source_prompt = embed_prompt(args.source_prompt, model.config) if args.source_prompt else None
    if args.blend_all:
        cfg = replace(cfg, mask_override=np.zeros(model.config.image_grid, dtype=bool))
    if cfg.mode == "real":
        if args.source is None:
            raise UsageError("--mode real requires --source <latent.npy>")
        try:
            source = load_latent(args.source)
        except (OSError, ValueError) as exc:
            raise SchemaError(f"cannot read source latent {args.source}: {exc}") from None
        if source.shape != model.config.latent_shape:
            raise SchemaError(f"source latent shape {source.shape} != {model.config.latent_shape}")
    else:
        source = cfg.source_seed
    return EditRequest(source, prompt, cfg, source_prompt)


# -- manifest --------------------------------------------------------------------


def _write_manifest(out, command, argv, config, seeds, inputs, outputs, started):
    manifest = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "config": config,
        "seeds": seeds,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(Path(p).relative_to(out)): sha256_file(p) for p in sorted(outputs)},
        "wall_clock_seconds": round(time.perf_counter() - started, 6),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


# -- commands -------------------------------------------------------------------


def cmd_generate(args, argv, started):
    model_doc, pipe_doc = _load_config_file(args.config)
    model = _model(model_doc)
    steps = args.steps if args.steps is not None else pipe_doc.get("num_steps", 30)
    seed = _seed(args)
    schedule = Schedule.linear(steps)
    prompt = embed_prompt(args.prompt, model.config)
    latent = model.sample(prompt, seed, schedule)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    save_latent(out / "latent.npy", latent)
    render(latent, out / "render.pgm")
    config = {"model": model.config.to_dict(), "num_steps": steps, "prompt": list(prompt.words),
              "schedule": schedule.to_dict()}
    _write_manifest(out, "generate", argv, config, {"seed": seed}, [],
                    [out / "latent.npy", out / "render.pgm"], started)
    return EXIT_OK


def cmd_edit(args, argv, started):
    model_doc, pipe_doc = _load_config_file(args.config)
    model = _model(model_doc)
    cfg = _pipeline_config(args, pipe_doc)
    request = _edit_request(args, model, cfg)
    result = run_edit(request, ModelBackend(model))
    out = args.out
    outputs = save_result(result, out, request.config)
    outputs.append(save_request(request, out))
    if request.config.mode == "real":
        outputs.append(out / "request_source.npy")
    config = {"model": model.config.to_dict(), "pipeline": request.config.to_dict(),
              "solved_gamma": result.gamma}
    seeds = {"source_seed": request.config.source_seed, "target_seed": request.config.target_seed}
    inputs = [args.source] if request.config.mode == "real" else []
    _write_manifest(out, "edit", argv, config, seeds, inputs, outputs, started)
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK


def cmd_analyze(args, argv, started):
    model_doc, pipe_doc = _load_config_file(args.config)
    model = _model(model_doc)
    base = _pipeline_config(args, pipe_doc)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    outputs, solved = [], {}
    probe = None
    for setting in (s.strip() for s in args.gammas.split(",") if s.strip()):
        g = _gamma_arg(setting)
        weights = AttentionWeights.balanced(1.0, "auto") if g == "auto" else AttentionWeights.balanced(g)
        cfg = replace(base, weights=weights)
        result = run_edit(_edit_request(args, model, cfg), ModelBackend(model))
        path = out / f"spread_gamma-{setting}.csv"
        write_spread(path, result.spread)
        outputs.append(path)
        solved[setting] = result.gamma
        probe = result.probe_state or probe
    if probe is not None:
        grid = np.linspace(0.5, 2.0, 61)
        path = out / "balance.csv"
        write_rows_csv(path, ("gamma", "f"), [(float(g), balance_residual(probe, g)) for g in grid])
        outputs.append(path)
    config = {"model": model.config.to_dict(), "pipeline": base.to_dict(), "gammas": solved}
    _write_manifest(out, "analyze", argv, config, {"target_seed": base.target_seed}, [], outputs, started)
    return EXIT_OK


def cmd_sweep(args, argv, started):
    model_doc, pipe_doc = _load_config_file(args.config)
    try:
        grid = parse_grid(args.grid)
    except (ValueError, ContractError) as exc:
        raise UsageError(f"bad --grid: {exc}") from None
    if not grid:
        raise UsageError("--grid is empty")
    seed = _seed(args)
    scene = insertion_scene(args.scene_seed)
    steps = args.steps if args.steps is not None else pipe_doc.get("num_steps", 30)
    editor = AdditEditor(scene.backend, num_steps=steps, **{k: v for k, v in pipe_doc.items()
                                                             if k in AdditEditor().get_params()})
    cases = [({}, scene.prompt, scene.gt_boxes, {"source_seed": seed + i, "target_seed": seed + 100 + i})
             for i in range(args.n_seeds)]
    rows = sweep(editor, args.param, grid, cases, ToyDetector(reference_scale=scene.reference_scale))
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    path = out / "sweep.csv"
    write_rows_csv(path, ("value", "affordance", "inclusion"), rows)
    config = {"param": args.param, "grid": grid, "n_seeds": args.n_seeds, "scene_seed": args.scene_seed,
              "backend": "oracle insertion scene", "editor": {k: v for k, v in editor.get_params().items()
                                                               if k != "backend"}}
    _write_manifest(out, "sweep", argv, config, {"seed": seed}, [], [path], started)
    return EXIT_OK


def cmd_eval(args, argv, started):
    model_doc, pipe_doc = _load_config_file(args.config)
    records = load_benchmark(args.benchmark)
    model = None
    seed = _seed(args)
    dets_all, gts, rows = [], [], []
    for i, rec in enumerate(records):
        if rec.detections is not None:
            dets = rec.detections
        else:
            model = model or _model(model_doc)
            prompt = embed_prompt(rec.tgt_prompt, model.config, rec.subject_token)
            src_prompt = embed_prompt(rec.src_prompt, model.config)
            cfg = PipelineConfig.from_dict(pipe_doc)
            if isinstance(rec.source, dict) and "seed" in rec.source:
                cfg = replace(cfg, source_seed=int(rec.source["seed"]))
            else:
                cfg = replace(cfg, source_seed=seed + i)
            cfg = replace(cfg, target_seed=seed + 10_000 + i)
            result = run_edit(EditRequest(cfg.source_seed, prompt, cfg, src_prompt), ModelBackend(model))
            dets = ToyDetector(label=rec.subject_token)(result.source, result.output)
        dets_all.append(dets)
        gts.append(rec.gt_boxes)
        r = evaluate_image(dets, rec.gt_boxes, args.score_threshold)
        rows.append((i, r["affordance"], int(r["detected"]), r["n_detections"]))
    summary = summarize(dets_all, gts, args.score_threshold)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    write_rows_csv(out / "per_image.csv", ("index", "affordance", "detected", "n_detections"), rows)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    _write_manifest(out, "eval", argv, {"score_threshold": args.score_threshold,
                                        "pipeline": pipe_doc, "model": model_doc},
                    {"seed": seed}, [args.benchmark], [out / "per_image.csv", out / "summary.json"], started)
    print(json.dumps(summary))
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "edit": cmd_edit, "analyze": cmd_analyze,
            "sweep": cmd_sweep, "eval": cmd_eval}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.perf_counter()
    try:
        return COMMANDS[args.command](args, argv, started)
    except UsageError as exc:
        print(f"addit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SchemaError as exc:
        print(f"addit: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"addit: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ContractError as exc:
        print(f"addit: invariant violation: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
