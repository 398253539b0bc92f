"""Velocity backends the edit pipeline can drive.

A backend exposes two forward calls, one per stream:

``source_forward(x, prompt, step, schedule) -> (velocity, context)``
    Plain denoising of the source stream.  ``context`` is whatever the target
    stream needs from the source at this step (keys/values for the model).
``target_forward(x, prompt, step, schedule, context, extend, weights, hook)``
    Target-stream velocity, drawing on ``context`` in the blocks flagged by
    ``extend``.  ``hook(block, state)`` sees each block's attention state.

plus ``probe_state`` (attention state used to solve gamma) and
``subject_saliency`` (subject-token map for one recorded state).
"""

from __future__ import annotations

import numpy as np

from .attention import AttentionState, AttentionWeights, partition_mass
from .flow import oracle_velocity, posterior_weights
from .masking import subject_saliency


class ModelBackend:
    """Drives a :class:`~addit.model.ToyMMDiT`."""

    def __init__(self, model):
        self.model = model
        cfg = model.config
        self.grid = cfg.image_grid
        self.latent_shape = cfg.latent_shape
        self.block_kinds = [cfg.block_kind(i) for i in range(cfg.num_blocks)]

    def source_forward(self, x, prompt, step, schedule):
        return self.model.forward(x, prompt, schedule.label(step))

    def target_forward(self, x, prompt, step, schedule, context, extend, weights, hook=None):
        use = context if any(extend) else None
        v, _ = self.model.forward(x, prompt, schedule.label(step), source_kv=use, extend=extend,
                                  weights=weights, hook=hook)
        return v

    def probe_state(self, x, prompt, step, schedule, context, block=0):
        captured = {}

        def grab(i, state):
            if i == block:
                captured["state"] = state

        extend = [i == block for i in range(len(self.block_kinds))]
        self.model.forward(x, prompt, schedule.label(step), source_kv=context, extend=extend,
                           weights=AttentionWeights(), hook=grab)
        return captured["state"]

    def subject_saliency(self, state, subject_index, x, step, schedule):
        return subject_saliency(state, subject_index, self.grid)


def random_probe(seed, heads=4, n_prompt=8, n_image=64, head_dim=16, logit_scale=1.0):
    """Extended attention state with i.i.d. Gaussian contents.

    Source and target keys share one distribution, so the balancing gamma sits
    near 1.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    s = logit_scale

    def g(n):
        return rng.standard_normal((heads, n, head_dim)) * s

    return AttentionState(q_p=g(n_prompt), q_img=g(n_image), k_p=g(n_prompt), k_img=g(n_image),
                          v_p=g(n_prompt), v_img=g(n_image), k_src=g(n_image), v_src=g(n_image))


class OracleBackend:
    """Closed-form flow over finite point sets, with an attention-mass mixing rule.

    The source stream follows the exact posterior-mean velocity of
    ``source_points``.  The target stream follows that of ``target_points``;
    while extension is active, a fraction of its velocity equal to the prompt
    queries' attention mass on the source partition of ``probe`` (under the
    current weights) instead pulls it toward the source stream's current clean
    estimate.  Raising gamma lowers that mass and weakens the pull.

    ``object_masks`` (one boolean grid per target point) define the subject
    map: the posterior-weighted average of the masks at the current target
    latent.
    """

    block_kinds = ["multi"]

    def __init__(self, source_points, target_points, object_masks=None, probe=None):
        self.source_points = np.asarray(source_points, dtype=np.float64)
        self.target_points = np.asarray(target_points, dtype=np.float64)
        self.latent_shape = self.source_points.shape[1:]
        self.grid = self.latent_shape[:2]
        self.object_masks = None if object_masks is None else np.asarray(object_masks, dtype=np.float64)
        self.probe = random_probe(0) if probe is None else probe

    def source_forward(self, x, prompt, step, schedule):
        sigma = schedule.sigma(step)
        v = oracle_velocity(x, sigma, self.source_points)
        return v, x - sigma * v

    def source_mass(self, weights):
        return float(partition_mass(self.probe, weights)[..., 0].mean())

    def target_forward(self, x, prompt, step, schedule, context, extend, weights, hook=None):
        sigma = schedule.sigma(step)
        v = oracle_velocity(x, sigma, self.target_points)
        if any(extend):
            w_src = self.source_mass(weights or AttentionWeights())
            v = w_src * (x - context) / sigma + (1.0 - w_src) * v
            if hook is not None:
                hook(0, self.probe)
        elif hook is not None:
            hook(0, self.probe.without_source())
        return v

    def probe_state(self, x, prompt, step, schedule, context, block=0):
        return self.probe

    def subject_saliency(self, state, subject_index, x, step, schedule):
        if self.object_masks is None:
            return np.zeros(self.grid)
        w = posterior_weights(x, schedule.sigma(step), self.target_points)
        return np.tensordot(w, self.object_masks, axes=1)
