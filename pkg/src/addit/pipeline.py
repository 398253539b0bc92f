"""The edit pipeline: parallel source/target denoising with structure transfer,
gated extended attention, and subject-guided latent blending.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_latent, check_mask, check_seed
from .attention import DEFAULT_GAMMA, AttentionWeights, attention_spread, solve_gamma
from .backends import ModelBackend
from .exceptions import ContractError, DegenerateInputError
from .flow import Schedule, estimate_x0, euler_step, noise_to, sample_noise
from .masking import SubjectMask, aggregate_subject_attention, blend_latents, build_subject_mask
from .model import TokenSequence, ToyMMDiT

logger = logging.getLogger(__name__)

T_STRUCT_GENERATED = 933
T_STRUCT_REAL = 867
T_BLEND = 500


@dataclass(frozen=True)
class ExtensionSchedule:
    """Extended attention runs while the step label is >= the block kind's cutoff."""

    multi_stream_until: int = 670
    single_stream_until: int = 340
    enabled: bool = True

    def __post_init__(self):
        for name in ("multi_stream_until", "single_stream_until"):
            if not 0 <= getattr(self, name) <= 1000:
                raise ContractError(f"{name} must be a label in [0, 1000]")
        if self.multi_stream_until < self.single_stream_until:
            raise ContractError("multi_stream_until must be >= single_stream_until")

    def active(self, kind, t_label):
        if not self.enabled:
            return False
        cutoff = self.multi_stream_until if kind == "multi" else self.single_stream_until
        return t_label >= cutoff

    def flags(self, block_kinds, t_label):
        return [self.active(kind, t_label) for kind in block_kinds]


@dataclass(frozen=True)
class PipelineConfig:
    """Run parameters.  ``t_struct=None`` resolves to 933 (generated) or 867 (real)."""

    mode: str = "generated"
    t_struct: int | None = None
    t_blend: int = T_BLEND
    extension: ExtensionSchedule = ExtensionSchedule()
    weights: AttentionWeights = AttentionWeights.balanced(DEFAULT_GAMMA)
    num_steps: int = 30
    schedule_shift: float = 1.0
    source_seed: int | None = 0
    target_seed: int = 1
    structure_transfer: bool = True
    blend: bool = True
    blend_repeat: bool = False
    mask_steps: int = 3
    mask_blocks: tuple | None = None
    mask_override: np.ndarray | None = field(default=None, compare=False, repr=False)
    gamma_probe_block: int = 0
    gamma_bracket: tuple = (0.5, 2.0)
    gamma_tolerance: float = 1e-4

    def __post_init__(self):
        if self.mode not in ("generated", "real"):
            raise ContractError(f"mode must be 'generated' or 'real', got {self.mode!r}")
        if self.mode == "generated":
            if self.source_seed is None:
                raise ContractError("generated mode requires source_seed")
            check_seed(self.source_seed, "source_seed")
        check_seed(self.target_seed, "target_seed")
        if self.mask_steps < 1:
            raise ContractError("mask_steps must be >= 1")

    @property
    def resolved_t_struct(self):
        if self.t_struct is not None:
            return int(self.t_struct)
        return T_STRUCT_GENERATED if self.mode == "generated" else T_STRUCT_REAL

    def schedule(self):
        return Schedule.linear(self.num_steps, self.schedule_shift)

    def to_dict(self):
        d = asdict(self)
        d["t_struct"] = self.resolved_t_struct
        d["mask_override"] = None if self.mask_override is None else np.asarray(self.mask_override).tolist()
        d["mask_blocks"] = None if self.mask_blocks is None else list(self.mask_blocks)
        d["gamma_bracket"] = list(self.gamma_bracket)
        return d

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        if "extension" in doc and isinstance(doc["extension"], dict):
            doc["extension"] = ExtensionSchedule(**doc["extension"])
        if "weights" in doc and isinstance(doc["weights"], dict):
            doc["weights"] = AttentionWeights(**doc["weights"])
        for key in ("mask_blocks", "gamma_bracket"):
            if doc.get(key) is not None:
                doc[key] = tuple(doc[key])
        if doc.get("mask_override") is not None:
            doc["mask_override"] = np.asarray(doc["mask_override"], dtype=bool)
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractError(f"unknown pipeline config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class EditRequest:
    """``source`` is a seed (generated mode) or a clean latent (real mode)."""

    source: object
    target_prompt: TokenSequence
    config: PipelineConfig = PipelineConfig()
    source_prompt: TokenSequence | None = None

    def __post_init__(self):
        if self.config.mode == "real":
            if np.isscalar(self.source):
                raise ContractError("real mode requires a clean source latent")
            self.source = check_latent(self.source, name="source")
        elif self.source is None:
            self.source = self.config.source_seed


@dataclass
class EditResult:
    output: np.ndarray
    source: np.ndarray
    mask: SubjectMask | None
    spread: list
    gamma: float | None
    warnings: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    x0_estimate: np.ndarray | None = field(default=None, repr=False)
    probe_state: object = field(default=None, repr=False)

    trace_columns = ("step", "t", "sigma", "stream_active", "extended_blocks", "event")


def default_source_prompt(prompt):
    """The target prompt with its subject word removed (or unchanged if that empties it)."""
    idx = prompt.subject_index
    if idx is None or len(prompt) == 1:
        return prompt
    keep = [i for i in range(len(prompt)) if i != idx]
    return TokenSequence(tuple(prompt.words[i] for i in keep), tuple(prompt.tokens[i] for i in keep),
                         prompt.embeddings[keep], None)


def run_real_mode_step(source_clean, eps, step, schedule):
    """Source-stream latent at ``step`` re-synthesised from the clean image and a fixed noise."""
    return noise_to(source_clean, eps, step, schedule)


def _source_trajectory(request, backend, schedule):
    """Per-step (latent, context) of the source stream, plus its clean endpoint."""
    cfg = request.config
    src_prompt = request.source_prompt
    if src_prompt is None:
        src_prompt = default_source_prompt(request.target_prompt)
    traj = []
    if cfg.mode == "generated":
        x = sample_noise(request.source, backend.latent_shape)
        for step in range(schedule.num_steps):
            v, ctx = backend.source_forward(x, src_prompt, step, schedule)
            traj.append((x, ctx))
            x = euler_step(x, v, step, schedule)
        traj.append((x, None))
    else:
        clean = request.source
        eps = sample_noise(cfg.source_seed if cfg.source_seed is not None else 0, clean.shape)
        for step in range(schedule.num_steps):
            x = run_real_mode_step(clean, eps, step, schedule)
            _, ctx = backend.source_forward(x, src_prompt, step, schedule)
            traj.append((x, ctx))
        traj.append((run_real_mode_step(clean, eps, schedule.num_steps, schedule), None))
    return traj


def run_edit(request, backend=None):
    """Execute one edit and return an :class:`EditResult`."""
    backend = backend or ModelBackend(ToyMMDiT())
    cfg = request.config
    schedule = cfg.schedule()
    prompt = request.target_prompt
    warnings = []

    def warn(msg):
        logger.warning(msg)
        warnings.append(msg)

    traj = _source_trajectory(request, backend, schedule)
    source_clean = traj[-1][0]
    if cfg.mode == "real" and not np.array_equal(source_clean, request.source):
        raise ContractError("real-mode source reconstruction is not exact")

    eps_target = sample_noise(cfg.target_seed, backend.latent_shape)
    if cfg.structure_transfer:
        start = schedule.index_for(cfg.resolved_t_struct)
    else:
        start = 0
    if start == schedule.num_steps:
        raise ContractError("t_struct leaves no denoising steps")
    x = noise_to(source_clean, eps_target, start, schedule) if cfg.structure_transfer else eps_target

    blend_step = schedule.index_for(cfg.t_blend) if cfg.blend else None
    if blend_step is not None and (blend_step < start or blend_step >= schedule.num_steps):
        warn(f"t_blend={cfg.t_blend} falls outside the target's denoising range; blending skipped")
        blend_step = None
    subject_index = prompt.subject_index
    if blend_step is not None and subject_index is None and cfg.mask_override is None:
        warn("target prompt has no subject token; latent blending skipped")
        blend_step = None
    mask_pairs = set()
    if blend_step is not None and cfg.mask_override is None:
        blocks = range(len(backend.block_kinds)) if cfg.mask_blocks is None else cfg.mask_blocks
        steps = range(max(start, blend_step - cfg.mask_steps + 1), blend_step + 1)
        mask_pairs = {(b, s) for b in blocks for s in steps}

    weights = cfg.weights
    gamma = None if weights.mode == "auto" else weights.gamma_target
    probe = None
    spread = []
    maps = {}
    mask = None
    applied_mask = None
    x0_est = None
    trace = []

    for step in range(start, schedule.num_steps):
        label = schedule.label(step)
        x_src, ctx = traj[step]
        extend = cfg.extension.flags(backend.block_kinds, label)
        event = []
        if weights.mode == "auto" and gamma is None and any(extend):
            probe = backend.probe_state(x, prompt, step, schedule, ctx, cfg.gamma_probe_block)
            gamma = solve_gamma(probe, cfg.gamma_tolerance, cfg.gamma_bracket)
            weights = AttentionWeights.balanced(gamma, mode="auto")
            event.append(f"gamma={gamma:.6f}")
        if applied_mask is not None and cfg.blend_repeat:
            x = blend_latents(x, x_src, applied_mask)

        def hook(block, state, _step=step, _x=x):
            if state.extended:
                src, p, tgt = attention_spread(state, weights)
                spread.append((_step, block, src, p, tgt))
            if (block, _step) in mask_pairs:
                maps[block, _step] = backend.subject_saliency(state, subject_index, _x, _step, schedule)

        v = backend.target_forward(x, prompt, step, schedule, ctx, extend, weights, hook)

        if step == blend_step:
            x0_est = estimate_x0(x, v, step, schedule)
            if cfg.mask_override is not None:
                applied_mask = check_mask(cfg.mask_override, backend.grid, "mask_override")
            else:
                saliency = aggregate_subject_attention([maps[k] for k in sorted(maps)])
                try:
                    mask = build_subject_mask(saliency, x0_est)
                    applied_mask = mask.refined
                except DegenerateInputError as exc:
                    warn(f"subject attention map is degenerate ({exc}); blending skipped")
            if applied_mask is not None:
                x = blend_latents(x, x_src, applied_mask)
                v = backend.target_forward(x, prompt, step, schedule, ctx, extend, weights)
                event.append("blend")

        trace.append((step, label, schedule.sigma(step), "target", sum(extend), ";".join(event)))
        x = euler_step(x, v, step, schedule)

    if applied_mask is not None and cfg.blend_repeat:
        x = blend_latents(x, source_clean, applied_mask)

    return EditResult(
        output=x, source=source_clean, mask=mask, spread=spread, gamma=gamma,
        warnings=warnings, trace=trace, x0_estimate=x0_est, probe_state=probe,
    )


def chain_edits(initial, followups, backend=None):
    """Run ``initial`` then feed each output into a real-mode edit with the next prompt.

    Follow-up ``k`` (1-based) reuses the initial config in real mode with
    ``t_struct`` re-resolved for real images unless set explicitly, and seeds
    offset by ``k``.
    """
    results = [run_edit(initial, backend)]
    base = initial.config
    for k, item in enumerate(followups, start=1):
        prompt, source_prompt = item if isinstance(item, tuple) else (item, None)
        if prompt.subject_index is None:
            raise ContractError(f"follow-up {k} has no subject token")
        cfg = replace(base, mode="real",
                      source_seed=(base.source_seed or 0) + k, target_seed=base.target_seed + k)
        request = EditRequest(results[-1].output, prompt, cfg, source_prompt)
        results.append(run_edit(request, backend))
    return results


class AdditEditor(BaseEstimator):
    """Estimator-style front end to :func:`run_edit`.

    ``fit`` binds the source (a clean latent for ``mode='real'``; nothing for
    ``mode='generated'``, where ``source_seed`` regenerates it).  ``edit`` runs
    one prompt and returns the full :class:`EditResult`; ``transform`` maps a
    list of prompts to stacked output latents.

    ``gamma`` is a float or ``'auto'``.  Parameters mirror
    :class:`PipelineConfig`; ``get_params``/``set_params`` and
    :func:`sklearn.base.clone` work as usual, which is what the sweeps use.
    """

    def __init__(self, backend=None, *, mode="generated", t_struct=None, t_blend=T_BLEND,
                 gamma=DEFAULT_GAMMA, ext_multi_until=670, ext_single_until=340, extension=True,
                 num_steps=30, source_seed=0, target_seed=1, structure_transfer=True, blend=True,
                 blend_repeat=False, mask_steps=3):
        self.backend = backend
        self.mode = mode
        self.t_struct = t_struct
        self.t_blend = t_blend
        self.gamma = gamma
        self.ext_multi_until = ext_multi_until
        self.ext_single_until = ext_single_until
        self.extension = extension
        self.num_steps = num_steps
        self.source_seed = source_seed
        self.target_seed = target_seed
        self.structure_transfer = structure_transfer
        self.blend = blend
        self.blend_repeat = blend_repeat
        self.mask_steps = mask_steps

    def pipeline_config(self, **overrides):
        if self.gamma == "auto":
            weights = AttentionWeights.balanced(1.0, mode="auto")
        else:
            weights = AttentionWeights.balanced(float(self.gamma))
        cfg = PipelineConfig(
            mode=self.mode, t_struct=self.t_struct, t_blend=self.t_blend,
            extension=ExtensionSchedule(self.ext_multi_until, self.ext_single_until, self.extension),
            weights=weights, num_steps=self.num_steps, source_seed=self.source_seed,
            target_seed=self.target_seed, structure_transfer=self.structure_transfer,
            blend=self.blend, blend_repeat=self.blend_repeat, mask_steps=self.mask_steps,
        )
        return replace(cfg, **overrides) if overrides else cfg

    def fit(self, X=None, y=None, source_prompt=None):
        self.backend_ = self.backend if self.backend is not None else ModelBackend(ToyMMDiT())
        if self.mode == "real":
            if X is None:
                raise ContractError("real mode needs a clean source latent")
            self.source_ = check_latent(X, grid=self.backend_.grid, name="source")
        else:
            self.source_ = self.source_seed
        self.source_prompt_ = source_prompt
        self.config_ = self.pipeline_config()
        return self

    def _check_fitted(self):
        if not hasattr(self, "backend_"):
            from sklearn.exceptions import NotFittedError

            raise NotFittedError("AdditEditor is not fitted; call fit() first")

    def edit(self, prompt, **overrides):
        self._check_fitted()
        cfg = self.pipeline_config(**overrides)
        source = cfg.source_seed if cfg.mode == "generated" else self.source_
        return run_edit(EditRequest(source, prompt, cfg, self.source_prompt_), self.backend_)

    def transform(self, X):
        prompts = [X] if isinstance(X, TokenSequence) else list(X)
        return np.stack([self.edit(p).output for p in prompts])
