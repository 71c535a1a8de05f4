"""Diffusion noise schedule and the closed-form forward process.

A schedule owns the per-step variances beta_1..beta_T and the running
products alpha_bar_t = prod_{s<=t}(1 - beta_s), with alpha_bar_0 == 1 by
convention so that t = 0 denotes the clean latent.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

SCHEDULE_KINDS = ("constant", "linear")

# desk defaults: short chain with meaningful signal decay
DEFAULT_KIND = "linear"
DEFAULT_T = 100
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.05


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    step_count: int
    beta_start: float
    beta_end: float
    betas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)

    @property
    def T(self):
        return self.step_count

    def beta(self, t):
        """beta_t for t in [1, T]."""
        self._check_t(t, low=1)
        return float(self.betas[t - 1])

    def alpha_bar(self, t):
        """alpha_bar_t for t in [0, T]; alpha_bar_0 == 1."""
        self._check_t(t, low=0)
        if t == 0:
            return 1.0
        return float(self.alpha_bars[t - 1])

    def _check_t(self, t, low):
        if not isinstance(t, (int, np.integer)):
            raise TypeError(f"timestep must be an integer, got {type(t).__name__}")
        if not low <= t <= self.step_count:
            raise ValueError(f"timestep {t} outside [{low}, {self.step_count}]")

    def spec_dict(self):
        """Serializable form; alpha_bars are always recomputed on load."""
        return {
            "kind": self.kind,
            "T": self.step_count,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
        }


def build_schedule(kind, T, beta_start, beta_end=None):
    """Construct a NoiseSchedule.

    `constant` uses beta_start at every step; `linear` interpolates evenly
    from beta_start to beta_end inclusive.
    """
    if kind not in SCHEDULE_KINDS:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"step count must be a positive integer, got {T!r}")
    if beta_end is None:
        beta_end = beta_start
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"betas must satisfy 0 < start <= end < 1, got start={beta_start}, end={beta_end}"
        )

    if kind == "constant":
        betas = np.full(T, float(beta_start))
    else:
        betas = np.linspace(float(beta_start), float(beta_end), T)
    if not np.all((betas > 0.0) & (betas < 1.0)):
        raise ValueError("schedule produced a beta outside (0, 1)")
    alpha_bars = np.cumprod(1.0 - betas)
    return NoiseSchedule(kind, int(T), float(beta_start), float(beta_end), betas, alpha_bars)


def schedule_from_spec(spec):
    return build_schedule(spec["kind"], spec["T"], spec["beta_start"], spec["beta_end"])


def default_schedule():
    return build_schedule(DEFAULT_KIND, DEFAULT_T, DEFAULT_BETA_START, DEFAULT_BETA_END)


def _check_shapes(a, b):
    sa, sb = ad.value_of(a).shape, ad.value_of(b).shape
    if sa != sb:
        raise ValueError(f"shape mismatch: {sa} vs {sb}")


def forward_marginal(schedule, z0, t, eps):
    """Noisy latent at step t in closed form: sqrt(ab_t) z0 + sqrt(1-ab_t) eps."""
    schedule._check_t(t, low=1)
    _check_shapes(z0, eps)
    ab = schedule.alpha_bar(t)
    return ad.lincomb(math.sqrt(ab), z0, math.sqrt(1.0 - ab), eps)


def forward_step(schedule, z_prev, t, eps):
    """One Markov step of the forward chain: sqrt(1-beta_t) z + sqrt(beta_t) eps."""
    b = schedule.beta(t)
    _check_shapes(z_prev, eps)
    return ad.lincomb(math.sqrt(1.0 - b), z_prev, math.sqrt(b), eps)


def fusion_window(schedule, low_frac=0.2, high_frac=0.8):
    """Closed integer window [ceil(low*T), ceil(high*T)] for fusion timesteps."""
    T = schedule.step_count
    return math.ceil(low_frac * T), math.ceil(high_frac * T)


def sample_fusion_timestep(rng, schedule, low_frac=0.2, high_frac=0.8):
    """Uniform integer timestep from the fusion window; deterministic per rng state."""
    if schedule.step_count < 2:
        raise ValueError("fusion timestep sampling needs at least 2 steps")
    lo, hi = fusion_window(schedule, low_frac, high_frac)
    return int(rng.integers(lo, hi + 1))
