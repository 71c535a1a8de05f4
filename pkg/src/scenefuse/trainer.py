"""Training orchestration: pretraining on the synthetic corpus, the
prior-preservation baseline finetune, and the two-stream finetune.

Each step of the two-stream finetune runs a composite stream (instance
reconstruction + class-scene prior reconstruction) and a fusion stream
(coarse denoising of a noised prior latent under the instance-scene
text, scored against the subject's visual embedding and the scene's text
embedding), then applies one Adam update on the weighted total. Streams
draw from independent per-step rngs so ablations are comparable
step-by-step.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses, nets, prompts, seeds
from .losses import LossWeights
from .schedule import schedule_from_spec


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    tau: int = 3
    learning_rate: float = 1e-5
    steps: int = 1200
    batch_size: int = 1
    n_prior: int = 200
    n_instance: int = 1
    window_low: float = 0.2
    window_high: float = 0.8
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.tau < 1:
            raise ValueError(f"tau must be >= 1, got {self.tau}")
        if not 0.0 <= self.window_low < self.window_high <= 1.0:
            raise ValueError("window fractions must satisfy 0 <= low < high <= 1")
        if self.steps < 1:
            raise ValueError("need at least one training step")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


class Adam:
    """Adam over the trainable entries of a ModelState."""

    def __init__(self, state, config):
        self.lr = config.learning_rate
        self.beta1 = config.adam_beta1
        self.beta2 = config.adam_beta2
        self.eps = config.adam_eps
        self.step_count = 0
        self.moments = {
            n: (np.zeros_like(state.params[n]), np.zeros_like(state.params[n]))
            for n in state.trainable
        }

    def update(self, state, grads):
        from . import _kernels as K

        self.step_count += 1
        for name in state.trainable:
            g = grads.get(name)
            if g is None:
                continue
            m, v = self.moments[name]
            p = state.params[name]
            K.adam_step(p.reshape(-1), np.ascontiguousarray(g).reshape(-1),
                        m.reshape(-1), v.reshape(-1), self.step_count,
                        self.lr, self.beta1, self.beta2, self.eps)


def _finite_or_raise(value, step, context):
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite {context} ({value}) at step {step}")
    return float(value)


def _backward_and_grads(state, tape_vars, total):
    ad.backward(total)
    return {n: v.grad for n, v in tape_vars.items() if v.grad is not None}


def pretrain(world, corpus, config, schedule=None, model_kwargs=None):
    """Train denoiser and text encoder on the corpus denoising objective.

    Returns (state, history). The model is initialized from the config
    seed; `model_kwargs` forwards architecture options to init_model.
    """
    if not corpus:
        raise ValueError("pretraining corpus is empty")
    if schedule is None:
        from .schedule import default_schedule

        schedule = default_schedule()
    state = nets.init_model(
        world.vocab, schedule, seeds.derive(config.seed, seeds.MODEL_INIT),
        image_hw=world.spec.image_hw,
        clip_calibration=world.calibration(),
        **(model_kwargs or {}),
    )
    history = pretrain_into(state, corpus, config)
    return state, history


def pretrain_into(state, corpus, config):
    """Run the pretraining loop on an existing state; returns the history.

    Batches above one stratify the timestep draw across the batch (each
    sample draws uniformly within its own slice of [1, T], so t stays
    uniform overall); this tames the gradient noise of single-sample
    noise-prediction without changing the objective.
    """
    from .schedule import forward_marginal

    sched = schedule_from_spec(state.schedule_spec)
    T = sched.step_count
    opt = Adam(state, config)
    B = config.batch_size
    history = []
    for step in range(1, config.steps + 1):
        rng = seeds.rng_for(config.seed, seeds.TRAINING, step, seeds.STREAM_PRIOR)
        total_val = 0.0
        grads_acc = {}
        for b in range(B):
            item = corpus[int(rng.integers(0, len(corpus)))]
            lo = 1 + (T * b) // B
            hi = max(lo + 1, 1 + (T * (b + 1)) // B)
            t = int(rng.integers(lo, hi))
            z0 = ad.value_of(nets.encode_image(state, item.image))
            eps = rng.standard_normal(z0.shape)
            z_t = forward_marginal(sched, z0, t, eps)
            with state.tape() as tape:
                cond = nets.encode_text(state, item.tokens)
                eps_hat = nets.denoise_eps(state, z_t, t, cond)
                loss = losses.denoising_mse(eps, eps_hat)
                ad.backward(loss)
                for n, v in tape.items():
                    if v.grad is not None:
                        acc = grads_acc.get(n)
                        grads_acc[n] = v.grad if acc is None else acc + v.grad
            total_val += float(loss.value)
        total_val /= B
        if B > 1:
            grads_acc = {n: g / B for n, g in grads_acc.items()}
        _finite_or_raise(total_val, step, "pretraining loss")
        opt.update(state, grads_acc)
        history.append({"step": step, "loss": total_val})
    return history


def _sample_pair(items, rng):
    return items[int(rng.integers(0, len(items)))]


def finetune_dreambooth(base_state, instance_set, prior_set_classonly, config):
    """Instance finetune plus the scene-free prior regularizer."""
    if not prior_set_classonly.scene_free():
        raise ValueError("baseline finetune requires a scene-free prior set")
    state = base_state.clone()
    sched = schedule_from_spec(state.schedule_spec)
    opt = Adam(state, config)
    history = []
    for step in range(1, config.steps + 1):
        rng_pick = seeds.rng_for(config.seed, seeds.TRAINING, step, seeds.STREAM_PICK)
        rng_ci = seeds.rng_for(config.seed, seeds.TRAINING, step, seeds.STREAM_INSTANCE)
        rng_cs = seeds.rng_for(config.seed, seeds.TRAINING, step, seeds.STREAM_PRIOR)
        inst_pair, _ = _sample_instance(instance_set, rng_pick)
        prior = _sample_pair(prior_set_classonly.items, rng_pick)

        calls_before = state.denoiser_calls
        with state.tape() as tape:
            info_ci, info_cs = {}, {}
            l_ci = losses.instance_finetune_loss(state, sched, inst_pair, rng_ci, info_ci)
            l_cs = losses.class_prior_loss(
                state, sched, (prior.image, prior.tokens), rng_cs, info_cs)
            total = ad.add(l_ci, ad.mul(l_cs, config.weights.lambda_cs))
            grads = _backward_and_grads(state, tape, total)

        breakdown = losses.total_loss(
            float(l_ci.value), float(l_cs.value), None, None,
            LossWeights(config.weights.lambda_cs, 0.0, 0.0))
        _finite_or_raise(breakdown.total, step, "finetune loss")
        opt.update(state, grads)
        history.append(_log_row(step, breakdown, info_ci, info_cs, None, None,
                                state.denoiser_calls - calls_before))
    return state, history


def finetune_comfusion(base_state, instance_set, prior_set_cs, config):
    """Two-stream finetune with the weighted four-term objective."""
    if not prior_set_cs.has_scenes():
        raise ValueError("two-stream finetune requires class-scene prior texts")
    state = base_state.clone()
    sched = schedule_from_spec(state.schedule_spec)
    opt = Adam(state, config)
    w = config.weights
    run_fusion = (w.lambda_fi > 0.0) or (w.lambda_fs > 0.0)
    history = []
    for step in range(1, config.steps + 1):
        rng_pick = seeds.rng_for(config.seed, seeds.TRAINING, step, seeds.STREAM_PICK)
        rng_ci = seeds.rng_for(config.seed, seeds.TRAINING, step, seeds.STREAM_INSTANCE)
        rng_cs = seeds.rng_for(config.seed, seeds.TRAINING, step, seeds.STREAM_PRIOR)
        rng_fu = seeds.rng_for(config.seed, seeds.TRAINING, step, seeds.STREAM_FUSION)

        inst_pair, inst_tpl = _sample_instance(instance_set, rng_pick)
        prior_c = _sample_pair(prior_set_cs.items, rng_pick)
        prior_f = _sample_pair(prior_set_cs.items, rng_fu)

        calls_before = state.denoiser_calls
        with state.tape() as tape:
            info_ci, info_cs, info_fu = {}, {}, {}
            l_ci = losses.instance_finetune_loss(state, sched, inst_pair, rng_ci, info_ci)
            l_cs = losses.class_scene_prior_loss(
                state, sched, (prior_c.image, prior_c.tokens), rng_cs, info_cs)
            total = ad.add(l_ci, ad.mul(l_cs, w.lambda_cs))
            l_fi_val = l_fs_val = None
            if run_fusion:
                tpl = prompts.PromptTemplate(
                    inst_tpl.identifier, inst_tpl.class_noun, prior_f.scene)
                l_fi, l_fs = losses.fusion_losses(
                    state, sched, (prior_f.image, prior_f.tokens),
                    inst_pair[0], tpl, config.tau, rng_fu, info_fu)
                total = ad.add(total, ad.add(ad.mul(l_fi, w.lambda_fi),
                                             ad.mul(l_fs, w.lambda_fs)))
                l_fi_val, l_fs_val = float(l_fi.value), float(l_fs.value)
                if not (np.isfinite(l_fi_val) and np.isfinite(l_fs_val)):
                    raise TrainingDiverged(
                        f"non-finite fusion loss at step {step}: "
                        f"l_fi={l_fi_val} l_fs={l_fs_val} "
                        f"t={info_fu.get('t')} tau={config.tau} "
                        f"|z|={float(np.abs(ad.value_of(inst_pair[0])).max())}")
            grads = _backward_and_grads(state, tape, total)

        breakdown = losses.total_loss(
            float(l_ci.value), float(l_cs.value), l_fi_val, l_fs_val, w)
        _finite_or_raise(breakdown.total, step, "finetune loss")
        opt.update(state, grads)
        history.append(_log_row(step, breakdown, info_ci, info_cs, info_fu if run_fusion else None,
                                config.tau if run_fusion else None,
                                state.denoiser_calls - calls_before))
    return state, history


def finetune_instance_only(base_state, instance_set, config):
    """Pure instance-reconstruction finetune (no regularization streams)."""
    state = base_state.clone()
    sched = schedule_from_spec(state.schedule_spec)
    opt = Adam(state, config)
    history = []
    for step in range(1, config.steps + 1):
        rng_pick = seeds.rng_for(config.seed, seeds.TRAINING, step, seeds.STREAM_PICK)
        rng_ci = seeds.rng_for(config.seed, seeds.TRAINING, step, seeds.STREAM_INSTANCE)
        inst_pair, _ = _sample_instance(instance_set, rng_pick)
        calls_before = state.denoiser_calls
        with state.tape() as tape:
            info_ci = {}
            l_ci = losses.instance_finetune_loss(state, sched, inst_pair, rng_ci, info_ci)
            grads = _backward_and_grads(state, tape, l_ci)
        breakdown = losses.total_loss(float(l_ci.value), None, None, None,
                                      LossWeights(0.0, 0.0, 0.0))
        _finite_or_raise(breakdown.total, step, "finetune loss")
        opt.update(state, grads)
        history.append(_log_row(step, breakdown, info_ci, None, None, None,
                                state.denoiser_calls - calls_before))
    return state, history


def _sample_instance(instance_set, rng):
    """instance_set: either [(image, tokens), ...] or an InstanceSet."""
    if hasattr(instance_set, "pairs"):
        idx = int(rng.integers(0, len(instance_set.pairs)))
        return instance_set.pairs[idx], instance_set.tpl
    idx = int(rng.integers(0, len(instance_set)))
    pair = instance_set[idx]
    return pair, None


@dataclass(frozen=True)
class InstanceSet:
    """The personalization subject: reference image(s) plus the template."""

    tpl: prompts.PromptTemplate
    pairs: tuple  # ((image, instance-text token ids), ...)

    def __post_init__(self):
        if not self.pairs:
            raise ValueError("instance set needs at least one reference image")

    @property
    def images(self):
        return [p[0] for p in self.pairs]


def make_instance_set(world, instance, identifier, n_images, seed):
    """Render the subject references and bind them to the instance text."""
    tpl = prompts.PromptTemplate(identifier, instance.class_noun, None)
    tokens = world.vocab.tokenize(prompts.instance_text(tpl))
    pairs = []
    from .world import render_reference

    for k in range(int(n_images)):
        img = render_reference(world.spec, instance,
                               pose_seed=seeds.derive(seed, seeds.WORLD, k))
        pairs.append((img, tokens))
    return InstanceSet(tpl, tuple(pairs))


def _log_row(step, breakdown, info_ci, info_cs, info_fu, tau, denoiser_calls):
    return {
        "step": step,
        "l_ci": breakdown.l_ci,
        "l_cs": breakdown.l_cs if info_cs is not None else None,
        "l_fi": breakdown.l_fi if info_fu is not None else None,
        "l_fs": breakdown.l_fs if info_fu is not None else None,
        "total": breakdown.total,
        "t_composite": [info_ci.get("t"), info_cs.get("t") if info_cs else None],
        "t_fusion": info_fu.get("t") if info_fu else None,
        "tau": tau,
        "denoiser_calls": denoiser_calls,
    }


def desk_config(**overrides):
    """Desk-scale finetune preset: small prior set, short run, workable lr."""
    base = dict(
        weights=LossWeights(1.0, 0.01, 0.01),
        tau=3,
        learning_rate=1e-3,
        steps=600,
        n_prior=32,
        n_instance=1,
        seed=0,
    )
    base.update(overrides)
    return TrainConfig(**base)


def desk_pretrain_config(**overrides):
    base = dict(
        weights=LossWeights(0.0, 0.0, 0.0),
        learning_rate=2e-3,
        steps=6000,
        batch_size=8,
        seed=0,
    )
    base.update(overrides)
    return TrainConfig(**base)
