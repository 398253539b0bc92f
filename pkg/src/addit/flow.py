"""Rectified-flow schedule and the noising / denoising primitives.

Conventions
-----------
A schedule has ``num_steps + 1`` entries indexed ``0 .. num_steps`` in the
denoising direction.  Entry 0 is pure noise (sigma = 1, label 1000) and the
last entry is clean data (sigma = 0, label 0).  Latents are float64 arrays of
shape (height, width, channels); the step index they live at is tracked by
the caller.

Noise is drawn from numpy's Philox4x32-10 counter-based bit generator
(``numpy.random.Philox`` keyed by the 64-bit seed) followed by
``Generator.standard_normal``.  The pair (seed, shape) fixes the values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_same_shape, check_seed
from .exceptions import ContractError, NoSuccessorError, UndefinedVelocityError

NOISE_GENERATOR = "numpy.random.Philox/standard_normal/v1"


@dataclass(frozen=True)
class Schedule:
    """Discrete sigma table with integer time labels in [0, 1000]."""

    num_steps: int
    sigmas: np.ndarray = field(repr=False)
    timesteps: np.ndarray = field(repr=False)

    def __post_init__(self):
        sigmas = np.asarray(self.sigmas, dtype=np.float64)
        timesteps = np.asarray(self.timesteps, dtype=np.int64)
        n = int(self.num_steps)
        if n < 1:
            raise ContractError("num_steps must be positive")
        if sigmas.shape != (n + 1,) or timesteps.shape != (n + 1,):
            raise ContractError("sigmas and timesteps need num_steps + 1 entries")
        if sigmas[0] != 1.0 or sigmas[-1] != 0.0:
            raise ContractError("sigma must start at exactly 1 and end at exactly 0")
        if not np.all(np.diff(sigmas) < 0):
            raise ContractError("sigmas must be strictly decreasing")
        if not np.all(np.diff(timesteps) < 0):
            raise ContractError("timesteps must be strictly decreasing")
        if timesteps[0] > 1000 or timesteps[-1] < 0:
            raise ContractError("timesteps must lie in [0, 1000]")
        sigmas.setflags(write=False)
        timesteps.setflags(write=False)
        object.__setattr__(self, "num_steps", n)
        object.__setattr__(self, "sigmas", sigmas)
        object.__setattr__(self, "timesteps", timesteps)

    @classmethod
    def linear(cls, num_steps=30, shift=1.0):
        """sigma_k = 1 - k/N, optionally warped by the usual rectified-flow time shift.

        The shift maps s -> shift*s / (1 + (shift - 1)*s); shift=1 is the identity.
        Labels are round(1000 * sigma), so the 30-step default yields 933, 867
        and 500 exactly.
        """
        if shift <= 0:
            raise ContractError("shift must be positive")
        s = 1.0 - np.arange(num_steps + 1, dtype=np.float64) / num_steps
        if shift != 1.0:
            s = shift * s / (1.0 + (shift - 1.0) * s)
        s[0], s[-1] = 1.0, 0.0
        t = np.rint(1000.0 * s).astype(np.int64)
        return cls(num_steps, s, t)

    def __len__(self):
        return self.num_steps + 1

    def sigma(self, step):
        return float(self.sigmas[self._check_step(step)])

    def label(self, step):
        return int(self.timesteps[self._check_step(step)])

    def index_for(self, t):
        """Step index for a time label, by nearest-not-after lookup.

        Returns the last step whose label is >= ``t``: the nearest step the
        trajectory reaches no later than ``t``.  Labels present in the table map
        to themselves.
        """
        t = int(t)
        if not 0 <= t <= int(self.timesteps[0]):
            raise ContractError(f"time label {t} outside [0, {int(self.timesteps[0])}]")
        return int(np.flatnonzero(self.timesteps >= t)[-1])

    def has_successor(self, step):
        return self._check_step(step) < self.num_steps

    def _check_step(self, step):
        step = int(step)
        if not 0 <= step <= self.num_steps:
            raise ContractError(f"step {step} outside schedule [0, {self.num_steps}]")
        return step

    def to_dict(self):
        return {
            "num_steps": self.num_steps,
            "sigmas": [float(s) for s in self.sigmas],
            "timesteps": [int(t) for t in self.timesteps],
        }

    @classmethod
    def from_dict(cls, doc):
        try:
            return cls(doc["num_steps"], doc["sigmas"], doc["timesteps"])
        except KeyError as exc:
            raise ContractError(f"schedule document missing {exc}") from None

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def __eq__(self, other):
        if not isinstance(other, Schedule):
            return NotImplemented
        return (
            self.num_steps == other.num_steps
            and np.array_equal(self.sigmas, other.sigmas)
            and np.array_equal(self.timesteps, other.timesteps)
        )

    __hash__ = None


def sample_noise(seed, shape):
    """i.i.d. standard normal tensor fully determined by (seed, shape)."""
    seed = check_seed(seed)
    rng = np.random.Generator(np.random.Philox(seed))
    return rng.standard_normal(tuple(shape))


def noise_to(x0, eps, step, schedule):
    """Interpolate clean data toward noise: (1 - sigma) * x0 + sigma * eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    check_same_shape(x0, eps, ("x0", "eps"))
    sigma = schedule.sigma(step)
    return (1.0 - sigma) * x0 + sigma * eps


def _step_delta(step, schedule):
    if not schedule.has_successor(step):
        raise NoSuccessorError(f"step {step} is terminal; no successor sigma")
    return schedule.sigmas[step + 1] - schedule.sigmas[step]


def euler_step(x_t, velocity, step, schedule):
    """Advance one step: x + (sigma_{k+1} - sigma_k) * v."""
    x_t = np.asarray(x_t, dtype=np.float64)
    velocity = np.asarray(velocity, dtype=np.float64)
    check_same_shape(x_t, velocity, ("x_t", "velocity"))
    return x_t + _step_delta(step, schedule) * velocity


def estimate_x0(x_t, velocity, step, schedule, exact=False):
    """One-shot clean-image estimate from a velocity prediction.

    The default is the single-Euler-step form x_t + (sigma_{k+1} - sigma_k) * v,
    used on the blending path.  ``exact=True`` returns the straight-line
    inversion x_t - sigma_k * v, which recovers x0 exactly when
    v = (x_t - x0) / sigma_k.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    velocity = np.asarray(velocity, dtype=np.float64)
    check_same_shape(x_t, velocity, ("x_t", "velocity"))
    if exact:
        return x_t - schedule.sigma(step) * velocity
    return x_t + _step_delta(step, schedule) * velocity


def posterior_weights(x_t, sigma, points):
    """Posterior over a finite point dataset given a noisy sample at ``sigma``.

    w_i is proportional to exp(-||x_t - (1 - sigma) x_i||^2 / (2 sigma^2)),
    evaluated with a max-shifted softmax.
    """
    if sigma <= 0:
        raise UndefinedVelocityError("posterior is undefined at sigma = 0")
    pts = np.asarray(points, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    if pts.ndim < 1 or len(pts) == 0:
        raise ContractError("oracle point set must be non-empty")
    if pts.shape[1:] != x_t.shape:
        raise ContractError(f"point shape {pts.shape[1:]} does not match latent {x_t.shape}")
    diff = x_t[None] - (1.0 - sigma) * pts
    sq = np.sum(diff.reshape(len(pts), -1) ** 2, axis=1)
    logits = -sq / (2.0 * sigma**2)
    logits -= logits.max()
    w = np.exp(logits)
    return w / w.sum()


def oracle_velocity(x_t, sigma, points):
    """Closed-form E[eps - x0 | x_t] for a uniform prior on ``points``."""
    w = posterior_weights(x_t, sigma, points)
    mean = np.tensordot(w, np.asarray(points, dtype=np.float64), axes=1)
    return (np.asarray(x_t, dtype=np.float64) - mean) / sigma


def integrate(x, schedule, velocity_fn, start=0):
    """Euler-integrate from step ``start`` to the terminal step.

    ``velocity_fn(x, step)`` returns the velocity at a step.
    """
    for step in range(start, schedule.num_steps):
        x = euler_step(x, velocity_fn(x, step), step, schedule)
    return x
