"""Reverse-process operators: predicted clean latent, DDIM stepping,
the recursive coarse denoiser, the stochastic ancestral step, and full
prompt-conditioned generation.

All operators are differentiable through the denoiser handle when it
returns tape Vars; otherwise they run on raw arrays.
"""

import math

import numpy as np

from . import autodiff as ad


def predict_x0(schedule, denoiser, z_t, t, cond):
    """Predicted clean latent: (z_t - sqrt(1-ab_t) eps_hat) / sqrt(ab_t)."""
    schedule._check_t(t, low=1)
    eps_hat = denoiser(z_t, t, cond)
    ab = schedule.alpha_bar(t)
    root = math.sqrt(ab)
    return ad.lincomb(1.0 / root, z_t, -math.sqrt(1.0 - ab) / root, eps_hat)


def _ddim_from_eps(schedule, z_t, t, t_next, eps_hat):
    """Deterministic step to t_next reusing one denoiser output."""
    ab = schedule.alpha_bar(t)
    ab_n = schedule.alpha_bar(t_next)
    root = math.sqrt(ab)
    h = ad.lincomb(1.0 / root, z_t, -math.sqrt(1.0 - ab) / root, eps_hat)
    return ad.lincomb(math.sqrt(ab_n), h, math.sqrt(1.0 - ab_n), eps_hat)


def ddim_step(schedule, denoiser, z_t, t, t_next, cond):
    """One deterministic reverse step from t to t_next (t_next < t).

    t_next = 0 lands exactly on the predicted clean latent.
    """
    schedule._check_t(t, low=1)
    schedule._check_t(t_next, low=0)
    if t_next >= t:
        raise ValueError(f"ddim step requires t_next < t, got {t_next} >= {t}")
    eps_hat = denoiser(z_t, t, cond)
    return _ddim_from_eps(schedule, z_t, t, t_next, eps_hat)


def intermediate_timestep(tau, t):
    """Descent rule r(tau, t) = ceil((tau-1) * t / tau) for the coarse recursion."""
    return math.ceil((tau - 1) * t / tau)


def coarse_denoise(schedule, denoiser, z_t, t, cond, tau):
    """Coarse clean-latent estimate in exactly `tau` denoiser calls.

    tau = 1 is the predicted clean latent; otherwise one deterministic
    step to r(tau, t) followed by the same procedure with tau - 1. The
    loop below is the recursion unrolled (see tests for the equivalence
    check); gradients flow through every denoiser call.
    """
    if not isinstance(tau, (int, np.integer)) or tau < 1:
        raise ValueError(f"tau must be a positive integer, got {tau!r}")
    schedule._check_t(t, low=1)
    z, t_cur, k = z_t, int(t), int(tau)
    while k > 1:
        r = intermediate_timestep(k, t_cur)
        eps_hat = denoiser(z, t_cur, cond)
        z = _ddim_from_eps(schedule, z, t_cur, r, eps_hat)
        t_cur = r
        k -= 1
    return predict_x0(schedule, denoiser, z, t_cur, cond)


def coarse_denoise_trajectory(tau, t):
    """Timesteps at which coarse_denoise invokes the denoiser."""
    out, t_cur, k = [], int(t), int(tau)
    while k > 1:
        out.append(t_cur)
        t_cur = intermediate_timestep(k, t_cur)
        k -= 1
    out.append(t_cur)
    return out


def ancestral_step(schedule, denoiser, z_t, t, cond, noise):
    """Stochastic reverse step with sigma_t = sqrt(beta_t)."""
    schedule._check_t(t, low=1)
    b = schedule.beta(t)
    ab = schedule.alpha_bar(t)
    eps_hat = denoiser(z_t, t, cond)
    mean = ad.lincomb(
        1.0 / math.sqrt(1.0 - b), z_t,
        -b / (math.sqrt(1.0 - b) * math.sqrt(1.0 - ab)), eps_hat,
    )
    return ad.lincomb(1.0, mean, math.sqrt(b), noise)


def ddim_ladder(T, n_steps):
    """Uniformly spaced descending timesteps from T to 0 (inclusive).

    Rounding collisions (possible when n_steps > T) are deduplicated.
    """
    if n_steps < 1:
        raise ValueError("need at least one sampling step")
    raw = np.round(np.linspace(T, 0, n_steps + 1)).astype(int)
    ladder = [int(raw[0])]
    for v in raw[1:]:
        if int(v) < ladder[-1]:
            ladder.append(int(v))
    return ladder


def generate(schedule, denoiser, text_encoder, decoder, prompt, n_ddim_steps, seed,
             *, latent_dim):
    """Sample one image: unit-Gaussian latent, DDIM ladder T -> 0, decode."""
    cond = text_encoder(prompt)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x67656E]))
    z = rng.standard_normal(latent_dim)
    ladder = ddim_ladder(schedule.step_count, n_ddim_steps)
    for t, t_next in zip(ladder[:-1], ladder[1:]):
        z = ddim_step(schedule, denoiser, z, t, t_next, cond)
    return decoder(z)


def generate_with_state(state, schedule, prompt_tokens, n_ddim_steps, seed):
    """Convenience wrapper binding a ModelState's components into generate()."""
    from . import nets

    return generate(
        schedule,
        state.denoiser_fn(),
        lambda toks: nets.encode_text(state, state.vocab.tokenize(toks)),
        lambda z: nets.decode_latent(state, z),
        prompt_tokens,
        n_ddim_steps,
        seed,
        latent_dim=state.latent_dim,
    )
