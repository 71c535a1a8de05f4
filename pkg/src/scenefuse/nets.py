"""Parametric functions: text encoder, denoiser, autoencoder, embedders.

The trainable surface is the text encoder (token table + pooled affine
projection) and the denoiser (a 3-layer GELU perceptron over
[latent | time embedding | condition]). The autoencoder and the two
feature embedders are frozen; the embedders are handcrafted feature maps
with known separation behavior rather than trained networks, so metric
properties can be asserted instead of hoped for.
"""

import math
from contextlib import contextmanager

import numpy as np

from . import autodiff as ad

ENCODER_MODES = ("identity", "linear")

# frozen embedder weighting; the instance embedder leans on the hue
# signature of the center crop, the scene embedder on global color and
# texture energy. Features are centered (global means subtracted, hue
# histogram de-meaned) so cosine similarity responds to structure and
# color rather than shared brightness.
DINO_BLOCK_WEIGHT = 0.15
DINO_HUE_WEIGHT = 6.0
DINO_HUE_KAPPA = 6.0
DINO_HUE_BINS = 8
CLIP_MEAN_WEIGHT = 1.0
CLIP_BLOCK_WEIGHT = 0.3
CLIP_ENERGY_WEIGHT = 4.0

DINO_DIM = 48 + DINO_HUE_BINS
CLIP_DIM = 3 + 48 + 1

_CHROMA_EPS = 1e-6

TRAINABLE_NAMES = (
    "text.emb",
    "text.proj_w",
    "text.proj_b",
    "den.w1",
    "den.b1",
    "den.w2",
    "den.b2",
    "den.w3",
    "den.b3",
    "den.gate_w",
    "den.gate_b",
)


class NetError(ValueError):
    pass


class ModelState:
    """Parameter store plus the reverse-mode tape hook.

    `params` maps names to float64 arrays. While a tape is active (see
    :meth:`tape`), `p(name)` returns a Var view for trainable entries so
    losses built from these become differentiable; otherwise raw arrays
    are returned and the same code runs tape-free.
    """

    def __init__(self, params, trainable, arch, vocab, schedule_spec,
                 clip_keys=()):
        self.params = params
        self.trainable = tuple(trainable)
        self.arch = dict(arch)
        self.vocab = vocab
        self.schedule_spec = dict(schedule_spec)
        self.clip_keys = list(clip_keys)
        self._clip_index = {k: i for i, k in enumerate(self.clip_keys)}
        self.denoiser_calls = 0
        self._tape = None
        for name in self.trainable:
            if name not in params:
                raise NetError(f"trainable parameter {name!r} missing from params")

    @property
    def frozen(self):
        return tuple(n for n in self.params if n not in self.trainable)

    def p(self, name):
        if self._tape is not None and name in self._tape:
            return self._tape[name]
        return self.params[name]

    @contextmanager
    def tape(self):
        """Activate gradient recording for the trainable parameters.

        Yields the name -> Var mapping; after backward() the gradients
        are on those Vars.
        """
        if self._tape is not None:
            raise RuntimeError("tape already active")
        self._tape = {n: ad.Var(self.params[n]) for n in self.trainable}
        try:
            yield self._tape
        finally:
            self._tape = None

    def clone(self):
        st = ModelState(
            {n: a.copy() for n, a in self.params.items()},
            self.trainable,
            self.arch,
            self.vocab,
            self.schedule_spec,
            self.clip_keys,
        )
        return st

    def denoiser_fn(self):
        """Bind denoise_eps into the (z, t, cond) handle samplers expect."""
        return lambda z_t, t, cond: denoise_eps(self, z_t, t, cond)

    def image_shape(self):
        hw = self.arch["image_hw"]
        return (hw, hw, self.arch["channels"])

    @property
    def latent_dim(self):
        return self.arch["latent_dim"]


def init_model(vocab, schedule, seed, *, image_hw=16, channels=3,
               encoder_mode="identity", latent_dim=None, hidden=256,
               d_tok=32, d_cond=32, d_time=16, clip_calibration=None):
    """Build a fresh ModelState with seeded initialization."""
    if encoder_mode not in ENCODER_MODES:
        raise NetError(f"unknown encoder mode {encoder_mode!r}")
    d_pix = image_hw * image_hw * channels
    if encoder_mode == "identity":
        latent_dim = d_pix
    elif latent_dim is None:
        latent_dim = d_pix
    if latent_dim > d_pix:
        raise NetError("latent dimension cannot exceed pixel dimension")
    if d_time % 2 != 0:
        raise NetError("time embedding dimension must be even")

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x6D6F64]))
    d_in = latent_dim + d_time + d_cond
    V = len(vocab)

    params = {
        "text.emb": rng.normal(0.0, 0.5, (V, d_tok)),
        "text.proj_w": rng.normal(0.0, 1.0 / math.sqrt(d_tok), (d_tok, d_cond)),
        "text.proj_b": np.zeros(d_cond),
        "den.w1": rng.normal(0.0, 1.0 / math.sqrt(d_in), (d_in, hidden)),
        "den.b1": np.zeros(hidden),
        "den.w2": rng.normal(0.0, 1.0 / math.sqrt(hidden), (hidden, hidden)),
        "den.b2": np.zeros(hidden),
        "den.w3": rng.normal(0.0, 0.01 / math.sqrt(hidden), (hidden, latent_dim)),
        "den.b3": np.zeros(latent_dim),
        # time-gated passthrough: the optimal noise prediction carries a
        # near-identity component on the latent, which a hidden width below
        # the latent dimension cannot represent; a learned scalar gate on
        # z_t restores it. Zero-initialized, so the net starts as a plain
        # perceptron.
        "den.gate_w": np.zeros(d_time),
        "den.gate_b": np.zeros(()),
    }

    n_f = d_time // 2
    if n_f > 1:
        freqs = np.exp(-math.log(1000.0) * np.arange(n_f) / (n_f - 1))
    else:
        freqs = np.ones(1)
    params["time.freqs"] = freqs

    if encoder_mode == "linear":
        gauss = np.random.default_rng(
            np.random.SeedSequence([int(seed), 0x6165])).normal(size=(d_pix, d_pix))
        q, _ = np.linalg.qr(gauss)
        params["ae.enc"] = np.ascontiguousarray(q.T[:latent_dim])

    # embedder constants are recorded as frozen tensors so checkpoints are
    # self-describing; the feature functions read the module constants
    params["dino.weights"] = np.array([DINO_BLOCK_WEIGHT, DINO_HUE_WEIGHT, DINO_HUE_KAPPA])
    params["clip.weights"] = np.array([CLIP_MEAN_WEIGHT, CLIP_BLOCK_WEIGHT, CLIP_ENERGY_WEIGHT])

    clip_keys = []
    if clip_calibration is not None:
        clip_keys, table = clip_calibration
        table = np.asarray(table, dtype=np.float64)
        if table.shape != (len(clip_keys), CLIP_DIM):
            raise NetError("calibration table shape does not match its key list")
        params["clip.table"] = table

    params = {n: np.asarray(a, dtype=np.float64) for n, a in params.items()}
    arch = {
        "image_hw": image_hw,
        "channels": channels,
        "encoder_mode": encoder_mode,
        "latent_dim": int(latent_dim),
        "hidden": hidden,
        "d_tok": d_tok,
        "d_cond": d_cond,
        "d_time": d_time,
        "vocab_size": V,
    }
    return ModelState(params, TRAINABLE_NAMES, arch, vocab, schedule.spec_dict(),
                      clip_keys)


# ---------------------------------------------------------------------------
# text conditioning

def encode_text(state, token_ids):
    """Embed tokens, mean-pool, project: the condition vector for prompts."""
    ids = list(token_ids)
    if not ids:
        raise NetError("cannot encode an empty prompt")
    V = state.arch["vocab_size"]
    for i in ids:
        if not 0 <= int(i) < V:
            raise NetError(f"token id {i} outside vocabulary of size {V}")
    rows = ad.gather_rows(state.p("text.emb"), ids)
    pooled = ad.vmean(rows, axis=0)
    return ad.add(ad.vecmat(pooled, state.p("text.proj_w")), state.p("text.proj_b"))


def time_embedding(state, t):
    freqs = state.params["time.freqs"]
    phase = float(t) * freqs
    return np.concatenate([np.sin(phase), np.cos(phase)])


def denoise_eps(state, z_t, t, cond):
    """Denoiser forward: predicted noise for a latent at timestep t."""
    T = state.schedule_spec["T"]
    if not 1 <= int(t) <= T:
        raise NetError(f"timestep {t} outside schedule range [1, {T}]")
    zv = ad.value_of(z_t)
    if zv.shape != (state.latent_dim,):
        raise NetError(f"latent shape {zv.shape} != ({state.latent_dim},)")
    state.denoiser_calls += 1
    temb = time_embedding(state, t)
    x = ad.concat([z_t, temb, cond])
    core = ad.mlp3(
        x,
        state.p("den.w1"), state.p("den.b1"),
        state.p("den.w2"), state.p("den.b2"),
        state.p("den.w3"), state.p("den.b3"),
    )
    gate = ad.add(ad.dot(state.p("den.gate_w"), temb), state.p("den.gate_b"))
    return ad.add(core, ad.mul(gate, z_t))


# ---------------------------------------------------------------------------
# frozen autoencoder

def _check_image_shape(state, x):
    shape = ad.value_of(x).shape
    if shape != state.image_shape():
        raise NetError(f"image shape {shape} != {state.image_shape()}")


def encode_image(state, x):
    """Image -> latent with the frozen encoder."""
    _check_image_shape(state, x)
    flat = ad.reshape(x, (-1,))
    if state.arch["encoder_mode"] == "identity":
        return flat
    return ad.matvec(state.params["ae.enc"], flat)


def decode_latent(state, z):
    """Latent -> image with the frozen decoder; output clamped to [0, 1]."""
    zv = ad.value_of(z)
    if zv.shape != (state.latent_dim,):
        raise NetError(f"latent shape {zv.shape} != ({state.latent_dim},)")
    if state.arch["encoder_mode"] == "identity":
        flat = z
    else:
        flat = ad.vecmat(z, state.params["ae.enc"])
    return ad.clamp(ad.reshape(flat, state.image_shape()), 0.0, 1.0)


# ---------------------------------------------------------------------------
# frozen embedders
#
# dino_features / clip_features are pure functions of the image so the
# world builder can calibrate text embeddings before any model exists;
# the state-bound wrappers below add shape validation.

_HUE_BIN_COS = np.cos(2.0 * np.pi * np.arange(DINO_HUE_BINS) / DINO_HUE_BINS)
_HUE_BIN_SIN = np.sin(2.0 * np.pi * np.arange(DINO_HUE_BINS) / DINO_HUE_BINS)


def _block_means(x, hw, channels):
    grid = ad.reshape(x, (4, hw // 4, 4, hw // 4, channels))
    return ad.reshape(ad.vmean(grid, axis=(1, 3)), (-1,))


def _hue_histogram(crop, kappa=DINO_HUE_KAPPA):
    """Chroma-weighted soft hue histogram; smooth everywhere."""
    r = ad.reshape(crop[..., 0], (-1, 1))
    g = ad.reshape(crop[..., 1], (-1, 1))
    b = ad.reshape(crop[..., 2], (-1, 1))
    u = ad.sub(r, ad.mul(ad.add(g, b), 0.5))
    v = ad.mul(ad.sub(g, b), math.sqrt(3.0) / 2.0)
    chroma = ad.sqrt(ad.add(ad.add(ad.square(u), ad.square(v)), _CHROMA_EPS))
    align = ad.div(ad.add(ad.mul(u, _HUE_BIN_COS), ad.mul(v, _HUE_BIN_SIN)), chroma)
    w = ad.exp(ad.mul(align, kappa))
    p = ad.div(w, ad.vsum(w, axis=1, keepdims=True))
    return ad.vmean(ad.mul(chroma, p), axis=0)


def _centered_block_means(x, hw, channels, gmeans):
    blocks = ad.reshape(_block_means(x, hw, channels), (16, channels))
    return ad.reshape(ad.sub(blocks, gmeans), (-1,))


def dino_features(x, hw, channels):
    """Instance-oriented feature map: 4x4 block means per channel plus a
    soft hue histogram over the center crop; both centered."""
    gmeans = ad.vmean(x, axis=(0, 1))
    blocks = _centered_block_means(x, hw, channels, gmeans)
    q = hw // 4
    crop = x[q:hw - q, q:hw - q, :]
    hist = _hue_histogram(crop)
    hist = ad.sub(hist, ad.vmean(hist))
    return ad.concat([ad.mul(blocks, DINO_BLOCK_WEIGHT), ad.mul(hist, DINO_HUE_WEIGHT)])


def clip_features(x, hw, channels):
    """Scene-oriented feature map: global color (relative to mid-gray),
    centered block means, and diagonal-gradient energy."""
    gmeans = ad.vmean(x, axis=(0, 1))
    color = ad.sub(gmeans, 0.5)
    blocks = _centered_block_means(x, hw, channels, gmeans)
    d = ad.sub(x[1:, 1:, :], x[:-1, :-1, :])
    energy = ad.reshape(ad.vmean(ad.square(d)), (1,))
    return ad.concat([
        ad.mul(color, CLIP_MEAN_WEIGHT),
        ad.mul(blocks, CLIP_BLOCK_WEIGHT),
        ad.mul(energy, CLIP_ENERGY_WEIGHT),
    ])


def dino_embed(state, x):
    _check_image_shape(state, x)
    return dino_features(x, state.arch["image_hw"], state.arch["channels"])


def clip_image_embed(state, x):
    _check_image_shape(state, x)
    return clip_features(x, state.arch["image_hw"], state.arch["channels"])


def clip_text_embed(state, class_noun, scene):
    """Frozen text-side embedding: the calibration mean for (class, scene)."""
    key = (class_noun, scene)
    if key not in state._clip_index:
        raise NetError(f"no calibrated text embedding for {key!r}")
    return state.params["clip.table"][state._clip_index[key]]
