"""The training objective: denoising reconstruction terms, the
coarse-denoising fusion pair, and their weighted combination.

Reconstruction terms use a per-element mean of squared error so loss
weights stay independent of the latent dimension. Expectations are
estimated with a single Monte-Carlo draw per call; reproducibility comes
from the caller-owned rng.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nets, prompts, sampler
from .schedule import forward_marginal, sample_fusion_timestep

COSINE_GUARD = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Weights for the prior, visual-fusion and textual-fusion terms."""

    lambda_cs: float = 1.0
    lambda_fi: float = 0.01
    lambda_fs: float = 0.01

    def __post_init__(self):
        for name in ("lambda_cs", "lambda_fi", "lambda_fs"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0.0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


@dataclass(frozen=True)
class LossBreakdown:
    l_ci: float
    l_cs: float
    l_fi: float
    l_fs: float
    total: float


def denoising_mse(eps_true, eps_pred):
    """Mean over elements of squared differences."""
    tv, pv = ad.value_of(eps_true), ad.value_of(eps_pred)
    if tv.shape != pv.shape:
        raise ValueError(f"shape mismatch: {tv.shape} vs {pv.shape}")
    return ad.vmean(ad.square(ad.sub(eps_true, eps_pred)))


def cosine_similarity(a, b):
    """dot(a, b) / (|a||b| + 1e-12); the guard tolerates zero vectors."""
    av, bv = ad.value_of(a), ad.value_of(b)
    if av.shape != bv.shape:
        raise ValueError(f"shape mismatch: {av.shape} vs {bv.shape}")
    return ad.cosine(a, b, guard=COSINE_GUARD)


def _reconstruction_loss(state, schedule, image, token_ids, rng, info=None):
    t = int(rng.integers(1, schedule.step_count + 1))
    z0 = ad.value_of(nets.encode_image(state, image))
    eps = rng.standard_normal(z0.shape)
    z_t = forward_marginal(schedule, z0, t, eps)
    cond = nets.encode_text(state, token_ids)
    eps_hat = nets.denoise_eps(state, z_t, t, cond)
    if info is not None:
        info["t"] = t
    return denoising_mse(eps, eps_hat)


def instance_finetune_loss(state, schedule, instance_pair, rng, info=None):
    """Denoising reconstruction of the subject image under its instance text."""
    image, token_ids = instance_pair
    return _reconstruction_loss(state, schedule, image, token_ids, rng, info)


def class_prior_loss(state, schedule, prior_pair, rng, info=None):
    """Reconstruction of a scene-free class prior image (baseline regularizer)."""
    image, token_ids = prior_pair
    return _reconstruction_loss(state, schedule, image, token_ids, rng, info)


def class_scene_prior_loss(state, schedule, prior_pair_cs, rng, info=None):
    """Reconstruction of a class-scene prior image under its class-scene text."""
    image, token_ids = prior_pair_cs
    return _reconstruction_loss(state, schedule, image, token_ids, rng, info)


def fusion_losses(state, schedule, prior_pair_cs, instance_image, tpl, tau, rng,
                  info=None):
    """Visual/textual matching pair on a coarse-denoised image.

    A class-scene prior latent is noised to a mid-window timestep,
    coarse-denoised for `tau` steps under the instance-scene text, and
    decoded; the decoded image is pulled toward the subject's visual
    embedding (l_fi) and the scene text embedding (l_fs). Gradients flow
    through every denoiser call and the decoder.
    """
    if tau < 1:
        raise ValueError(f"tau must be >= 1, got {tau}")
    x_cs, _cs_tokens = prior_pair_cs
    t = sample_fusion_timestep(rng, schedule)
    z0 = ad.value_of(nets.encode_image(state, x_cs))
    eps = rng.standard_normal(z0.shape)
    z_t = forward_marginal(schedule, z0, t, eps)

    cond_is = nets.encode_text(
        state, state.vocab.tokenize(prompts.instance_scene_text(tpl)))
    z_tilde = sampler.coarse_denoise(
        schedule, state.denoiser_fn(), z_t, t, cond_is, tau)
    x_tilde = nets.decode_latent(state, z_tilde)

    l_fi = ad.mul(cosine_similarity(
        nets.dino_embed(state, x_tilde),
        ad.value_of(nets.dino_embed(state, instance_image))), -1.0)
    l_fs = ad.mul(cosine_similarity(
        nets.clip_image_embed(state, x_tilde),
        nets.clip_text_embed(state, tpl.class_noun, tpl.scene)), -1.0)
    if info is not None:
        info["t"] = t
        info["tau"] = int(tau)
    return l_fi, l_fs


def total_loss(l_ci, l_cs, l_fi, l_fs, weights):
    """Weighted objective; absent streams contribute zero."""
    parts = []
    for name, v in (("l_ci", l_ci), ("l_cs", l_cs), ("l_fi", l_fi), ("l_fs", l_fs)):
        v = 0.0 if v is None else float(v)
        if not math.isfinite(v):
            raise ValueError(f"non-finite loss component {name}={v}")
        parts.append(v)
    l_ci, l_cs, l_fi, l_fs = parts
    total = (l_ci + weights.lambda_cs * l_cs
             + weights.lambda_fi * l_fi + weights.lambda_fs * l_fs)
    return LossBreakdown(l_ci, l_cs, l_fi, l_fs, total)
