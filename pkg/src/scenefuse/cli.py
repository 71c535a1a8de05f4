"""Command-line interface.

Subcommands: world build, pretrain, priors, finetune, sample, eval,
ablate. Every subcommand takes --config (JSON), --seed and --out; all
outputs land under the run directory with the config echoed back
verbatim so any run can be reproduced from its own artifacts.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

import argparse
import os
import shutil
import sys

import numpy as np

from . import evalharness, nets, prompts, sampler, seeds, tensorio, trainer
from . import world as world_mod
from .runconfig import (
    FINETUNE_DEFAULTS,
    PRETRAIN_DEFAULTS,
    Config,
    ConfigError,
    identifier_from,
    instance_from,
    model_kwargs_from,
    schedule_from,
    train_config_from,
    world_spec_from,
)
from .schedule import schedule_from_spec
from .trainer import TrainingDiverged
from .world import WorldBuildError


def _echo_run_inputs(args, command):
    os.makedirs(args.out, exist_ok=True)
    shutil.copyfile(args.config, os.path.join(args.out, "config.json"))
    with open(args.config, "rb") as fh:
        cfg_bytes = fh.read()
    import hashlib

    tensorio.write_json(os.path.join(args.out, "meta.json"), {
        "command": command,
        "seed": args.seed,
        "config_sha256": hashlib.sha256(cfg_bytes).hexdigest(),
    })


def _load_world(cfg):
    return world_mod.load_world(cfg.require_path("paths.world"))


def _load_checkpoint(cfg, field="paths.checkpoint"):
    return tensorio.load_checkpoint(cfg.require_path(field))


def cmd_world_build(args):
    cfg = Config.load(args.config)
    spec = world_spec_from(cfg)
    world = world_mod.build_world(spec, seeds.derive(args.seed, seeds.WORLD))
    _echo_run_inputs(args, "world build")
    out = os.path.join(args.out, "world")
    world_mod.save_world(out, world)
    print(f"world built at {out}; gates: "
          f"dino margin {world.gate_report['dino_margin']:.3f}, "
          f"clip worst margin {world.gate_report['clip_worst_margin']:.3f}")
    return 0


def cmd_pretrain(args):
    cfg = Config.load(args.config)
    world = _load_world(cfg)
    sched = schedule_from(cfg)
    corpus = world_mod.build_pretrain_corpus(
        world, int(cfg.get("corpus.n_per_cell", 16)),
        seeds.derive(args.seed, seeds.CORPUS))
    tc = train_config_from(cfg, "pretrain", args.seed, PRETRAIN_DEFAULTS)
    state, history = trainer.pretrain(
        world, corpus, tc, schedule=sched, model_kwargs=model_kwargs_from(cfg))
    _echo_run_inputs(args, "pretrain")
    ckpt = os.path.join(args.out, "checkpoint")
    tensorio.save_checkpoint(ckpt, state, extra_meta={"stage": "pretrain", "seed": args.seed})
    tensorio.write_jsonl(os.path.join(args.out, "losslog.jsonl"), history)
    print(f"pretrained checkpoint at {ckpt}; "
          f"final loss {history[-1]['loss']:.4f} over {len(history)} steps")
    return 0


def cmd_priors(args):
    cfg = Config.load(args.config)
    world = _load_world(cfg)
    state = _load_checkpoint(cfg)
    class_noun = cfg.get("priors.class_noun")
    if class_noun not in world.spec.classes:
        raise ConfigError(f"config field priors.class_noun: unknown class {class_noun!r}")
    kind = cfg.get("priors.kind", "class-scene")
    if kind not in ("class-scene", "class-only"):
        raise ConfigError("config field priors.kind must be class-scene or class-only")
    scene_keys = None if kind == "class-only" else list(
        cfg.get("priors.scenes", list(world.spec.scenes)))
    pset = world_mod.generate_priors(
        state, world, class_noun, scene_keys,
        int(cfg.get("priors.n", 32)),
        seeds.derive(args.seed, seeds.PRIORS),
        n_ddim_steps=int(cfg.get("priors.ddim_steps", 15)),
        checkpoint_id=cfg.get("paths.checkpoint"),
    )
    _echo_run_inputs(args, "priors")
    out = os.path.join(args.out, "priors")
    world_mod.save_priors(out, pset)
    print(f"{len(pset)} {kind} prior images at {out}")
    return 0


def cmd_finetune(args):
    cfg = Config.load(args.config)
    world = _load_world(cfg)
    base = _load_checkpoint(cfg)
    tc = train_config_from(cfg, "finetune", args.seed, FINETUNE_DEFAULTS)
    instance, _ = instance_from(cfg, world)
    identifier = identifier_from(cfg, world)
    iset = trainer.make_instance_set(
        world, instance, identifier, tc.n_instance,
        seeds.derive(world.seed, world_mod.hash_class(instance.class_noun),
                     int(cfg.get("finetune.instance.index", 0))))

    if args.mode == "comfusion":
        priors = world_mod.load_priors(cfg.require_path("paths.priors"))
        state, history = trainer.finetune_comfusion(base, iset, priors, tc)
    elif args.mode == "dreambooth":
        priors = world_mod.load_priors(cfg.require_path("paths.priors"))
        state, history = trainer.finetune_dreambooth(base, iset, priors, tc)
    else:
        state, history = trainer.finetune_instance_only(base, iset, tc)

    _echo_run_inputs(args, f"finetune --mode {args.mode}")
    ckpt = os.path.join(args.out, "checkpoint")
    tensorio.save_checkpoint(ckpt, state, extra_meta={
        "stage": f"finetune-{args.mode}", "seed": args.seed,
        "identifier": identifier, "class_noun": instance.class_noun,
    })
    tensorio.write_jsonl(os.path.join(args.out, "losslog.jsonl"), history)
    print(f"finetuned ({args.mode}) checkpoint at {ckpt}; "
          f"final total loss {history[-1]['total']:.4f}")
    return 0


def cmd_sample(args):
    cfg = Config.load(args.config)
    state = _load_checkpoint(cfg)
    sched = schedule_from_spec(state.schedule_spec)
    prompt = cfg.get("sample.prompt")
    tokens = prompt.split() if isinstance(prompt, str) else list(prompt)
    n_images = int(cfg.get("sample.n_images", 1))
    n_steps = int(cfg.get("sample.ddim_steps", 15))
    _echo_run_inputs(args, "sample")
    for k in range(n_images):
        img = np.asarray(sampler.generate_with_state(
            state, sched, tokens, n_steps,
            seeds.derive(args.seed, seeds.SAMPLING, k)))
        tensorio.save_tensor(os.path.join(args.out, f"sample_{k:03d}.tensor"), img)
        tensorio.write_ppm(os.path.join(args.out, f"sample_{k:03d}.ppm"), img)
    print(f"{n_images} samples for {' '.join(tokens)!r} under {args.out}")
    return 0


def cmd_eval(args):
    cfg = Config.load(args.config)
    world = _load_world(cfg)
    state = _load_checkpoint(cfg)
    identifier = identifier_from(cfg, world)
    instance, index = instance_from(cfg, world)
    iset = trainer.make_instance_set(
        world, instance, identifier, int(cfg.get("finetune.n_instance", 1)),
        seeds.derive(world.seed, world_mod.hash_class(instance.class_noun),
                     index if index is not None else 0))
    subj = evalharness.Subject(
        f"{instance.class_noun}-{index if index is not None else 0}",
        instance, iset.tpl, tuple(iset.images))
    scenes = tuple(cfg.get("eval.scenes", list(world.spec.scenes)))
    collect = [] if args.emit_images else None
    report = evalharness.run_benchmark(
        state, [subj], scenes,
        int(cfg.get("eval.n_images_per_cell", 4)),
        seeds.derive(args.seed, seeds.EVAL),
        n_ddim_steps=int(cfg.get("eval.ddim_steps", 15)),
        config_hash=tensorio.config_hash(cfg.data),
        collect_images=collect,
    )
    _echo_run_inputs(args, "eval")
    tensorio.write_json(os.path.join(args.out, "metrics.json"), report.to_dict())
    if collect is not None:
        os.makedirs(args.emit_images, exist_ok=True)
        for name, scene, j, img in collect:
            stem = f"{name}_{scene.replace(' ', '-')}_{j:02d}"
            tensorio.save_tensor(os.path.join(args.emit_images, stem + ".tensor"), img)
            tensorio.write_ppm(os.path.join(args.emit_images, stem + ".ppm"), img)
    print(f"metrics: dino {report.dino:.4f}  clip-i {report.clip_i:.4f}  "
          f"clip-t {report.clip_t:.4f}  ({report.n_generated} images)")
    return 0


def cmd_ablate(args):
    cfg = Config.load(args.config)
    world = _load_world(cfg)
    base = _load_checkpoint(cfg)
    tc = train_config_from(cfg, "finetune", 0, FINETUNE_DEFAULTS)
    subjects = tuple(
        (s[0], int(s[1])) for s in cfg.get(
            "ablate.subjects", [[c, 0] for c in world.spec.classes]))
    for cls, _ in subjects:
        if cls not in world.spec.classes:
            raise ConfigError(f"config field ablate.subjects: unknown class {cls!r}")
    acfg = evalharness.AblationConfig(
        train=tc,
        seeds=tuple(int(s) for s in cfg.get(
            "ablate.seeds", [args.seed + i for i in range(3)])),
        subjects=subjects,
        scenes=tuple(cfg.get("eval.scenes", list(world.spec.scenes))),
        n_images_per_cell=int(cfg.get("eval.n_images_per_cell", 4)),
        n_ddim_steps=int(cfg.get("eval.ddim_steps", 15)),
        prior_ddim_steps=int(cfg.get("priors.ddim_steps", 15)),
        identifier=identifier_from(cfg, world),
    )
    result = evalharness.run_ablation_suite(base, world, acfg)
    _echo_run_inputs(args, "ablate")
    table = evalharness.format_table(result)
    tensorio.write_json(os.path.join(args.out, "ablation.json"), result)
    tensorio._atomic_write(os.path.join(args.out, "ablation.txt"), table.encode())
    print(table)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="scenefuse",
        description="Desk-scale personalization laboratory for a toy latent diffusion model",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--seed", required=True, type=int, help="master seed")
        p.add_argument("--out", required=True, help="run directory")

    world_p = sub.add_parser("world", help="world utilities")
    world_sub = world_p.add_subparsers(dest="world_command", required=True)
    add_common(world_sub.add_parser("build", help="build and gate the synthetic world"))

    add_common(sub.add_parser("pretrain", help="pretrain on the synthetic corpus"))
    add_common(sub.add_parser("priors", help="generate prior images from a checkpoint"))

    ft = sub.add_parser("finetune", help="personalize a pretrained checkpoint")
    ft.add_argument("--mode", required=True,
                    choices=["comfusion", "dreambooth", "instance-only"])
    add_common(ft)

    add_common(sub.add_parser("sample", help="generate images from a checkpoint"))

    ev = sub.add_parser("eval", help="run the metric benchmark")
    ev.add_argument("--emit-images", default=None,
                    help="directory for decoded images (tensor + ppm)")
    add_common(ev)

    add_common(sub.add_parser("ablate", help="run the ablation suite"))
    return parser


_HANDLERS = {
    "world": cmd_world_build,
    "pretrain": cmd_pretrain,
    "priors": cmd_priors,
    "finetune": cmd_finetune,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}

_CONFIG_ERRORS = (ConfigError, prompts.PromptError, world_mod.WorldError,
                  nets.NetError, FileNotFoundError)
_RUNTIME_ERRORS = (TrainingDiverged, WorldBuildError, tensorio.CheckpointError,
                   tensorio.TensorFormatError, evalharness.EvalError, ValueError,
                   RuntimeError)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = _HANDLERS[args.command]
    try:
        return handler(args)
    except _CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except _RUNTIME_ERRORS as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
