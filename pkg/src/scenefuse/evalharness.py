"""Metric protocol and the ablation runner.

Instance fidelity is the mean pairwise cosine similarity between
embeddings of generated and reference images (computed with the
instance-oriented and scene-oriented embedders respectively); scene
fidelity is the mean cosine between generated-image embeddings and the
calibrated class-scene text embedding. The ablation suite trains each
loss variant per subject with shared seeds and reports directional
comparisons between rows.
"""

import json
from dataclasses import dataclass, replace

import numpy as np

from . import losses, nets, prompts, sampler, seeds, trainer, world as world_mod
from .schedule import schedule_from_spec


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class MetricsReport:
    dino: float
    clip_i: float
    clip_t: float
    n_generated: int
    n_reference: int
    per_scene: dict
    config_hash: str = ""

    def to_dict(self):
        return {
            "dino": self.dino,
            "clip_i": self.clip_i,
            "clip_t": self.clip_t,
            "n_generated": self.n_generated,
            "n_reference": self.n_reference,
            "per_scene": self.per_scene,
            "config_hash": self.config_hash,
        }


def instance_metric(embed_fn, generated, references):
    """Mean cosine over all (generated, reference) embedding pairs."""
    generated, references = list(generated), list(references)
    if not generated or not references:
        raise EvalError("instance metric needs non-empty image sets")
    ge = [np.asarray(embed_fn(g)) for g in generated]
    re = [np.asarray(embed_fn(r)) for r in references]
    vals = [float(losses.cosine_similarity(a, b)) for a in ge for b in re]
    return float(np.mean(vals))


def scene_metric(state, generated, tpl):
    """Mean cosine between generated images and the class-scene text embedding.

    The identifier is deliberately absent from the text side: scores are
    taken against the calibrated class-scene embedding.
    """
    generated = list(generated)
    if not generated:
        raise EvalError("scene metric needs at least one image")
    text = nets.clip_text_embed(state, tpl.class_noun, tpl.scene)
    vals = [
        float(losses.cosine_similarity(np.asarray(nets.clip_image_embed(state, g)), text))
        for g in generated
    ]
    return float(np.mean(vals))


@dataclass(frozen=True)
class Subject:
    """One personalization target: its spec, template and reference images."""

    name: str
    instance: world_mod.InstanceSpec
    tpl: prompts.PromptTemplate
    references: tuple


def subject_from_index(world, class_noun, index, identifier, n_references):
    """Canonical subject of a class; reference images are world data
    (derived from the world seed), independent of any stage seed."""
    inst = world_mod.instance_for_index(world.spec, class_noun, index, world.seed)
    ref_seed = seeds.derive(world.seed, world_mod.hash_class(class_noun), index)
    iset = trainer.make_instance_set(world, inst, identifier, n_references, ref_seed)
    return Subject(f"{class_noun}-{index}", inst, iset.tpl, tuple(iset.images)), iset


def run_benchmark(checkpoint, subjects, scenes, n_images_per_cell, seed,
                  n_ddim_steps=15, config_hash="", collect_images=None):
    """Generate per-(subject, scene) images and aggregate the three metrics.

    `checkpoint` is one ModelState shared by all subjects or a mapping
    from subject name to the subject's own finetuned state.
    """
    if n_images_per_cell < 1:
        raise EvalError("need at least one image per benchmark cell")
    if not subjects or not scenes:
        raise EvalError("benchmark needs subjects and scenes")

    def state_for(subj):
        if isinstance(checkpoint, dict):
            if subj.name not in checkpoint:
                raise EvalError(f"no checkpoint for subject {subj.name!r}")
            return checkpoint[subj.name]
        return checkpoint

    dino_vals, clip_i_vals, clip_t_vals = [], [], []
    per_scene = {s: {"dino": [], "clip_i": [], "clip_t": []} for s in scenes}
    n_generated = 0
    n_reference = sum(len(s.references) for s in subjects)

    for si_subj, subj in enumerate(subjects):
        state = state_for(subj)
        sched = schedule_from_spec(state.schedule_spec)
        gen_all = []
        for si, scene in enumerate(scenes):
            tpl = subj.tpl.with_scene(scene)
            toks = prompts.instance_scene_text(tpl)
            cell = []
            for j in range(n_images_per_cell):
                g_seed = seeds.derive(seed, seeds.EVAL, si_subj, si, j)
                img = np.asarray(sampler.generate_with_state(
                    state, sched, toks, n_ddim_steps, g_seed))
                cell.append(img)
                if collect_images is not None:
                    collect_images.append((subj.name, scene, j, img))
            n_generated += len(cell)
            gen_all.extend(cell)
            d = instance_metric(lambda x: nets.dino_embed(state, x), cell, subj.references)
            ci = instance_metric(lambda x: nets.clip_image_embed(state, x), cell,
                                 subj.references)
            ct = scene_metric(state, cell, tpl)
            per_scene[scene]["dino"].append(d)
            per_scene[scene]["clip_i"].append(ci)
            per_scene[scene]["clip_t"].append(ct)
            clip_t_vals.append(ct)
        dino_vals.append(instance_metric(
            lambda x: nets.dino_embed(state, x), gen_all, subj.references))
        clip_i_vals.append(instance_metric(
            lambda x: nets.clip_image_embed(state, x), gen_all, subj.references))

    per_scene_out = {
        s: {k: float(np.mean(v)) for k, v in vals.items()}
        for s, vals in per_scene.items()
    }
    return MetricsReport(
        dino=float(np.mean(dino_vals)),
        clip_i=float(np.mean(clip_i_vals)),
        clip_t=float(np.mean(clip_t_vals)),
        n_generated=n_generated,
        n_reference=n_reference,
        per_scene=per_scene_out,
        config_hash=config_hash,
    )


# ---------------------------------------------------------------------------
# ablation suite

ABLATION_ROWS = (
    "real-images",
    "dreambooth",
    "comfusion",
    "comfusion-no-fusion",
    "comfusion-no-fi",
    "comfusion-no-fs",
    "comfusion-tau1",
    "comfusion-tau5",
)


@dataclass(frozen=True)
class AblationConfig:
    train: trainer.TrainConfig
    seeds: tuple = (11, 12, 13)
    subjects: tuple = (("circle", 0), ("square", 0), ("triangle", 0), ("cross", 0))
    scenes: tuple = None  # defaults to the world's scenes
    n_images_per_cell: int = 4
    n_ddim_steps: int = 15
    prior_ddim_steps: int = 15
    identifier: str = prompts.DEFAULT_IDENTIFIER


def _row_train_config(row, base):
    w = base.weights
    if row == "dreambooth":
        return replace(base, weights=losses.LossWeights(w.lambda_cs, 0.0, 0.0))
    if row == "comfusion":
        return base
    if row == "comfusion-no-fusion":
        return replace(base, weights=losses.LossWeights(w.lambda_cs, 0.0, 0.0))
    if row == "comfusion-no-fi":
        return replace(base, weights=losses.LossWeights(w.lambda_cs, 0.0, w.lambda_fs))
    if row == "comfusion-no-fs":
        return replace(base, weights=losses.LossWeights(w.lambda_cs, w.lambda_fi, 0.0))
    if row == "comfusion-tau1":
        return replace(base, tau=1)
    if row == "comfusion-tau5":
        return replace(base, tau=5)
    raise EvalError(f"unknown ablation row {row!r}")


def run_ablation_suite(base_state, world, config):
    """Train every ablation row per subject with shared seeds; emit the
    comparison table plus directional pass/fail flags."""
    scenes = tuple(config.scenes or world.spec.scenes)
    rows = {name: [] for name in ABLATION_ROWS}
    calls_per_step = {}

    for master in config.seeds:
        # subjects and priors are shared by every row at this seed
        subjects, isets, priors_cs, priors_class = [], [], {}, {}
        for k, (cls, idx) in enumerate(config.subjects):
            subj, iset = subject_from_index(
                world, cls, idx, config.identifier, config.train.n_instance)
            subjects.append(subj)
            isets.append(iset)
            if cls not in priors_cs:
                priors_cs[cls] = world_mod.generate_priors(
                    base_state, world, cls, list(scenes), config.train.n_prior,
                    seeds.derive(master, seeds.PRIORS, k, 1),
                    n_ddim_steps=config.prior_ddim_steps)
                priors_class[cls] = world_mod.generate_priors(
                    base_state, world, cls, None, config.train.n_prior,
                    seeds.derive(master, seeds.PRIORS, k, 2),
                    n_ddim_steps=config.prior_ddim_steps)

        for row in ABLATION_ROWS:
            if row == "real-images":
                report = _real_images_report(world, subjects, scenes,
                                             config.n_images_per_cell, master,
                                             base_state)
                rows[row].append(report)
                continue
            row_cfg_base = _row_train_config(row, config.train)
            states = {}
            call_counts = []
            for k, (subj, iset) in enumerate(zip(subjects, isets)):
                cfg = replace(row_cfg_base,
                              seed=seeds.derive(master, seeds.TRAINING, k))
                if row == "dreambooth":
                    st, hist = trainer.finetune_dreambooth(
                        base_state, iset, priors_class[subj.instance.class_noun], cfg)
                else:
                    st, hist = trainer.finetune_comfusion(
                        base_state, iset, priors_cs[subj.instance.class_noun], cfg)
                states[subj.name] = st
                call_counts.extend(h["denoiser_calls"] for h in hist)
            report = run_benchmark(states, subjects, scenes,
                                   config.n_images_per_cell,
                                   seeds.derive(master, seeds.EVAL),
                                   n_ddim_steps=config.n_ddim_steps)
            rows[row].append(report)
            calls_per_step[row] = float(np.mean(call_counts))

    means = {
        name: {
            "dino": float(np.mean([r.dino for r in reports])),
            "clip_i": float(np.mean([r.clip_i for r in reports])),
            "clip_t": (float(np.mean([r.clip_t for r in reports]))
                       if all(r.clip_t is not None for r in reports) else None),
            "denoiser_calls_per_step": calls_per_step.get(name),
        }
        for name, reports in rows.items()
    }
    flags = directional_flags(means)
    return {
        "seeds": list(config.seeds),
        "rows": means,
        "per_seed": {
            name: [r.to_dict() for r in reports] for name, reports in rows.items()
        },
        "flags": flags,
    }


def _real_images_report(world, subjects, scenes, n_per_cell, master, state):
    """Upper-bound row: held-out renders of each subject scored as if generated."""
    dino_vals, clip_i_vals = [], []
    n_gen = 0
    for k, subj in enumerate(subjects):
        held = []
        for si, scene in enumerate(scenes):
            for j in range(n_per_cell):
                held.append(world_mod.render(
                    world.spec, subj.instance, scene,
                    pose_seed=seeds.derive(master, seeds.EVAL, 999, k, si, j)))
        n_gen += len(held)
        dino_vals.append(instance_metric(
            lambda x: nets.dino_embed(state, x), held, subj.references))
        clip_i_vals.append(instance_metric(
            lambda x: nets.clip_image_embed(state, x), held, subj.references))
    return MetricsReport(
        dino=float(np.mean(dino_vals)),
        clip_i=float(np.mean(clip_i_vals)),
        clip_t=None,
        n_generated=n_gen,
        n_reference=sum(len(s.references) for s in subjects),
        per_scene={},
    )


def directional_flags(means):
    """Strict directional comparisons between seed-averaged rows."""
    cf, db = means["comfusion"], means["dreambooth"]
    no_fs, no_fi = means["comfusion-no-fs"], means["comfusion-no-fi"]
    t1, t5 = means["comfusion-tau1"], means["comfusion-tau5"]
    return {
        "a_scene_gain_vs_baseline": cf["clip_t"] > db["clip_t"],
        "b_drop_fs_instance_up": no_fs["dino"] > cf["dino"],
        "b_drop_fs_scene_down": no_fs["clip_t"] < cf["clip_t"],
        "c_drop_fi_scene_up": no_fi["clip_t"] > cf["clip_t"],
        "c_drop_fi_instance_down": no_fi["dino"] < cf["dino"],
        "d_tau5_instance_up": t5["dino"] > t1["dino"],
        "d_tau5_scene_down": t5["clip_t"] < t1["clip_t"],
    }


def format_table(result):
    """Aligned plain-text ablation table."""
    headers = ["row", "DINO", "CLIP-I", "CLIP-T", "calls/step"]
    lines = []
    for name in ABLATION_ROWS:
        m = result["rows"][name]
        lines.append([
            name,
            f"{m['dino']:.4f}",
            f"{m['clip_i']:.4f}",
            "n/a" if m["clip_t"] is None else f"{m['clip_t']:.4f}",
            "n/a" if m["denoiser_calls_per_step"] is None
            else f"{m['denoiser_calls_per_step']:.2f}",
        ])
    widths = [max(len(h), *(len(row[i]) for row in lines)) for i, h in enumerate(headers)]
    out = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    out.append("  ".join("-" * w for w in widths))
    for row in lines:
        out.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    out.append("")
    for k, v in result["flags"].items():
        out.append(f"{'PASS' if v else 'FAIL'}  {k}")
    return "\n".join(out) + "\n"


def result_to_json(result):
    return json.dumps(result, indent=2, sort_keys=True)
