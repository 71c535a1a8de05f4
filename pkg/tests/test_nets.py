"""Parametric functions: text encoder, denoiser, autoencoder, embedders."""

import numpy as np
import pytest

from scenefuse import autodiff as ad
from scenefuse import losses, nets

from conftest import SMALL_HW, rand_image


def fd_grad_check(f, x0, tol=1e-5, h=1e-6):
    """Norm-relative FD check of df/dx at x0 (array input, scalar output)."""
    v = ad.Var(x0.copy())
    out = f(v)
    ad.backward(out)
    g = v.grad
    fd = np.zeros_like(x0)
    it = np.nditer(x0, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        p = x0.copy(); p[idx] += h
        m = x0.copy(); m[idx] -= h
        fd[idx] = (float(ad.value_of(f(ad.Var(p)))) - float(ad.value_of(f(ad.Var(m))))) / (2 * h)
        it.iternext()
    num = np.linalg.norm(g - fd)
    den = max(np.linalg.norm(g) + np.linalg.norm(fd), 1e-10)
    assert num / den < tol, num / den


# --- text encoder ----------------------------------------------------------

def test_encode_text_single_token_is_projection(small_state):
    st = small_state
    out = np.asarray(nets.encode_text(st, [3]))
    expect = st.params["text.emb"][3] @ st.params["text.proj_w"] + st.params["text.proj_b"]
    np.testing.assert_allclose(out, expect, atol=1e-14)


def test_encode_text_order_invariant(small_state):
    a = np.asarray(nets.encode_text(small_state, [0, 1, 4]))
    b = np.asarray(nets.encode_text(small_state, [4, 0, 1]))
    np.testing.assert_array_equal(a, b)


def test_encode_text_unknown_id(small_state):
    with pytest.raises(nets.NetError):
        nets.encode_text(small_state, [99])
    with pytest.raises(nets.NetError):
        nets.encode_text(small_state, [])


def test_encode_text_gradients_reach_used_rows(small_state):
    st = small_state
    with st.tape() as tape:
        out = ad.vsum(ad.square(nets.encode_text(st, [1, 2])))
        ad.backward(out)
    g = tape["text.emb"].grad
    assert np.abs(g[1]).max() > 0 and np.abs(g[2]).max() > 0
    assert np.abs(g[0]).max() == 0


# --- denoiser --------------------------------------------------------------

def test_denoise_eps_pure_and_shape(small_state, small_schedule):
    st = small_state
    rng = np.random.default_rng(0)
    z = rng.normal(size=st.latent_dim)
    cond = rng.normal(size=st.arch["d_cond"])
    a = np.asarray(nets.denoise_eps(st, z, 5, cond))
    b = np.asarray(nets.denoise_eps(st, z, 5, cond))
    np.testing.assert_array_equal(a, b)
    assert a.shape == (st.latent_dim,)
    with pytest.raises(nets.NetError):
        nets.denoise_eps(st, z[:-1], 5, cond)
    with pytest.raises(nets.NetError):
        nets.denoise_eps(st, z, 0, cond)
    with pytest.raises(nets.NetError):
        nets.denoise_eps(st, z, 21, cond)


def test_denoise_eps_zero_weights_zero_output(small_vocab, small_schedule):
    st = nets.init_model(small_vocab, small_schedule, seed=1, image_hw=SMALL_HW,
                         hidden=16, d_tok=8, d_cond=8, d_time=8)
    for n in st.trainable:
        if n.startswith("den."):
            st.params[n][...] = 0.0
    rng = np.random.default_rng(0)
    out = np.asarray(nets.denoise_eps(st, rng.normal(size=st.latent_dim), 3,
                                      rng.normal(size=8)))
    np.testing.assert_array_equal(out, np.zeros(st.latent_dim))


def test_denoise_eps_parameter_gradients_fd(small_state):
    st = small_state
    rng = np.random.default_rng(1)
    z = rng.normal(size=st.latent_dim)
    cond_ids = [0, 1]
    target = rng.normal(size=st.latent_dim)
    h = 1e-6

    def loss_value():
        cond = nets.encode_text(st, cond_ids)
        out = nets.denoise_eps(st, z, 7, cond)
        return float(ad.value_of(losses.denoising_mse(target, out)))

    with st.tape() as tape:
        cond = nets.encode_text(st, cond_ids)
        out = nets.denoise_eps(st, z, 7, cond)
        ad.backward(losses.denoising_mse(target, out))
        grads = {n: v.grad for n, v in tape.items() if v.grad is not None}

    rng_idx = np.random.default_rng(2)
    worst = 0.0
    for name in ("den.w1", "den.w2", "den.w3", "den.b1", "den.gate_w", "text.proj_w"):
        p = st.params[name]
        flat = p.reshape(-1)
        for _ in range(10):
            i = int(rng_idx.integers(0, flat.size))
            old = flat[i]
            flat[i] = old + h; fp = loss_value()
            flat[i] = old - h; fm = loss_value()
            flat[i] = old
            fd = (fp - fm) / (2 * h)
            a = grads[name].reshape(-1)[i]
            worst = max(worst, abs(a - fd) / max(1e-4, abs(a), abs(fd)))
    assert worst < 1e-4, worst


# --- autoencoder -----------------------------------------------------------

def test_identity_autoencoder_roundtrip(small_state):
    rng = np.random.default_rng(3)
    x = rand_image(rng)
    z = np.asarray(nets.encode_image(small_state, x))
    assert z.shape == (SMALL_HW * SMALL_HW * 3,)
    back = np.asarray(nets.decode_latent(small_state, z))
    np.testing.assert_array_equal(back, x)


def test_decode_clamps(small_state):
    z = np.linspace(-1.0, 2.0, small_state.latent_dim)
    img = np.asarray(nets.decode_latent(small_state, z))
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_linear_autoencoder(small_vocab, small_schedule):
    st = nets.init_model(small_vocab, small_schedule, seed=4, image_hw=SMALL_HW,
                         hidden=16, d_tok=8, d_cond=8, d_time=8,
                         encoder_mode="linear")
    rng = np.random.default_rng(5)
    x = rand_image(rng)
    z = np.asarray(nets.encode_image(st, x))
    # full-rank orthogonal map: reconstruction is (numerically) exact
    back = np.asarray(nets.decode_latent(st, z))
    assert np.sqrt(np.mean((back - x) ** 2)) < 0.05
    # encode is linear (check against scaled input small enough to avoid clamp)
    np.testing.assert_allclose(
        np.asarray(nets.encode_image(st, 0.5 * x)), 0.5 * z, atol=1e-12)


def test_linear_autoencoder_rows_orthonormal(small_vocab, small_schedule):
    st = nets.init_model(small_vocab, small_schedule, seed=4, image_hw=SMALL_HW,
                         hidden=16, d_tok=8, d_cond=8, d_time=8,
                         encoder_mode="linear", latent_dim=100)
    q = st.params["ae.enc"]
    assert q.shape == (100, SMALL_HW * SMALL_HW * 3)
    np.testing.assert_allclose(q @ q.T, np.eye(100), atol=1e-10)


def test_shape_validation(small_state):
    with pytest.raises(nets.NetError):
        nets.encode_image(small_state, np.zeros((4, 4, 3)))
    with pytest.raises(nets.NetError):
        nets.decode_latent(small_state, np.zeros(7))


# --- embedders -------------------------------------------------------------

def test_embedder_dims_and_purity(small_state):
    rng = np.random.default_rng(6)
    x = rand_image(rng)
    d1 = np.asarray(nets.dino_embed(small_state, x))
    d2 = np.asarray(nets.dino_embed(small_state, x))
    np.testing.assert_array_equal(d1, d2)
    assert d1.shape == (nets.DINO_DIM,) == (56,)
    c = np.asarray(nets.clip_image_embed(small_state, x))
    assert c.shape == (nets.CLIP_DIM,) == (52,)


def test_dino_embed_pixel_gradients_fd(small_state):
    rng = np.random.default_rng(7)
    x = rand_image(rng)
    ref = np.asarray(nets.dino_embed(small_state, rand_image(rng)))
    fd_grad_check(
        lambda v: losses.cosine_similarity(nets.dino_embed(small_state, v), ref),
        x, tol=1e-5)


def test_clip_embed_pixel_gradients_fd(small_state):
    rng = np.random.default_rng(8)
    x = rand_image(rng)
    ref = np.asarray(nets.clip_image_embed(small_state, rand_image(rng)))
    fd_grad_check(
        lambda v: losses.cosine_similarity(nets.clip_image_embed(small_state, v), ref),
        x, tol=1e-5)


def test_clip_text_embed_lookup(small_state):
    vec = nets.clip_text_embed(small_state, "dog", "in the rain")
    assert vec.shape == (nets.CLIP_DIM,)
    with pytest.raises(nets.NetError):
        nets.clip_text_embed(small_state, "dog", "on the moon")


def test_clip_text_embed_is_calibration_mean(world0):
    """The text-side embedding equals the mean of its calibration renders."""
    from scenefuse import world as world_mod

    spec = world0.spec
    cls, scene = spec.classes[0], spec.scenes[0]
    ci, si = 0, 0
    embeds = []
    for k in range(spec.calibration_count):
        rng = np.random.default_rng(
            np.random.SeedSequence([0, world_mod._L_CAL, ci, si, k]))
        inst = world_mod.random_instance(spec, cls, rng)
        img = world_mod.render(spec, inst, scene, pose_seed=int(rng.integers(2**31)))
        embeds.append(np.asarray(nets.clip_features(img, spec.image_hw, 3)))
    row = world0.clip_table[world0.clip_keys.index((cls, scene))]
    np.testing.assert_allclose(row, np.mean(embeds, axis=0), atol=1e-12)


def test_tape_requires_exclusive_use(small_state):
    with small_state.tape():
        with pytest.raises(RuntimeError):
            small_state.tape().__enter__()
