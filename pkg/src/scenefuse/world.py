"""Deterministic toy image universe.

Classes are flat colored shapes (circle, square, triangle, cross) with a
per-instance hue, texture phase and size; scenes are procedural
backgrounds with well-separated color/texture signatures. The world also
owns the text-side embedding calibration and asserts the embedder
separation properties at build time, failing loudly if the universe does
not support the metric protocol.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import nets, prompts
from .losses import cosine_similarity

DEFAULT_CLASSES = ("circle", "square", "triangle", "cross")
DEFAULT_SCENES = (
    "in the rain",
    "in the snow",
    "on the grass",
    "in the river",
    "in the sky",
    "on the floor",
    "in the room",
    "on the table",
)
DEFAULT_IDENTIFIERS = ("sks", "qzx")

# seed-derivation labels (keep stable: they define the reproducible streams)
_L_CAL = 0x63616C
_L_GATE = 0x67617465
_L_CORPUS = 0x636F7270
_L_PRIORS = 0x7072696F
_L_INSTANCE = 0x696E7374


class WorldError(ValueError):
    pass


class WorldBuildError(RuntimeError):
    """Raised when the embedder separation gates fail on a fresh world."""


@dataclass(frozen=True)
class WorldSpec:
    classes: tuple = DEFAULT_CLASSES
    scenes: tuple = DEFAULT_SCENES
    image_hw: int = 16
    channels: int = 3
    calibration_count: int = 64
    identifiers: tuple = DEFAULT_IDENTIFIERS

    def __post_init__(self):
        if not self.classes or not self.scenes:
            raise WorldError("world needs at least one class and one scene")
        if self.image_hw % 4 != 0 or self.image_hw < 8:
            raise WorldError("image size must be a multiple of 4 and >= 8")
        if self.channels != 3:
            raise WorldError("renderers are RGB only")
        for s in self.scenes:
            if s not in prompts.SCENE_PHRASES:
                raise WorldError(f"scene {s!r} is not in the scene vocabulary")


@dataclass(frozen=True)
class InstanceSpec:
    class_noun: str
    hue: float
    texture_phase: float
    size: float

    def __post_init__(self):
        if not 0.0 <= self.hue < 1.0:
            raise WorldError(f"hue must be in [0, 1), got {self.hue}")
        if not 0.0 <= self.size <= 1.0:
            raise WorldError(f"size must be in [0, 1], got {self.size}")


@dataclass(frozen=True)
class CorpusItem:
    image: np.ndarray = field(repr=False)
    tokens: list
    class_noun: str
    scene: str


@dataclass(frozen=True)
class PriorItem:
    image: np.ndarray = field(repr=False)
    tokens: list
    class_noun: str
    scene: str  # None for scene-free class priors


@dataclass(frozen=True)
class PriorSet:
    items: tuple
    generation_seed: int
    source_checkpoint: str

    def __len__(self):
        return len(self.items)

    def scene_free(self):
        return all(it.scene is None for it in self.items)

    def has_scenes(self):
        return all(it.scene is not None for it in self.items)


# ---------------------------------------------------------------------------
# scene renderers

def _grid(hw):
    y, x = np.mgrid[0:hw, 0:hw].astype(np.float64)
    return x, y


def _render_rain(hw, rng):
    img = np.empty((hw, hw, 3))
    img[..., 0], img[..., 1], img[..., 2] = 0.36, 0.42, 0.58
    x, y = _grid(hw)
    diag = x - y
    for _ in range(max(4, hw // 3)):
        off = rng.uniform(-hw, hw)
        streak = 0.26 * np.exp(-((diag - off) ** 2) / 0.45)
        img += streak[..., None] * np.array([0.9, 0.95, 1.0])
    return img


def _render_snow(hw, rng):
    img = np.empty((hw, hw, 3))
    img[..., 0], img[..., 1], img[..., 2] = 0.70, 0.60, 0.80
    x, y = _grid(hw)
    for _ in range(hw):
        cx, cy = rng.uniform(0, hw, size=2)
        r2 = (x - cx) ** 2 + (y - cy) ** 2
        img += (0.33 * np.exp(-r2 / 0.5))[..., None]
    return img


def _render_grass(hw, rng):
    img = np.empty((hw, hw, 3))
    img[..., 0], img[..., 1], img[..., 2] = 0.18, 0.72, 0.14
    blades = rng.normal(0.0, 0.055, size=(hw, hw, 1))
    img += blades * np.array([0.5, 1.0, 0.4])
    return img


def _render_river(hw, rng):
    img = np.empty((hw, hw, 3))
    img[..., 0], img[..., 1], img[..., 2] = 0.13, 0.30, 0.62
    _, y = _grid(hw)
    phase = rng.uniform(0, 1)
    wave = 0.11 * np.sin(2 * math.pi * (y / 4.0 + phase))
    img += wave[..., None] * np.array([0.55, 0.8, 1.0])
    return img


def _render_sky(hw, rng):
    img = np.empty((hw, hw, 3))
    img[..., 0], img[..., 1], img[..., 2] = 0.42, 0.78, 0.95
    x, y = _grid(hw)
    for _ in range(3):
        cx = rng.uniform(0, hw)
        cy = rng.uniform(0, hw * 0.5)
        r2 = (x - cx) ** 2 + (y - cy) ** 2
        img += (0.22 * np.exp(-r2 / 5.0))[..., None]
    return img


def _render_floor(hw, rng):
    img = np.empty((hw, hw, 3))
    img[..., 0], img[..., 1], img[..., 2] = 0.62, 0.50, 0.30
    _, y = _grid(hw)
    seams = (y.astype(int) % 4 == int(rng.integers(0, 4)))
    img -= (0.16 * seams)[..., None] * np.array([1.0, 1.0, 0.8])
    img += rng.normal(0.0, 0.02, size=(hw, hw, 1))
    return img


def _render_room(hw, rng):
    img = np.empty((hw, hw, 3))
    img[..., 0], img[..., 1], img[..., 2] = 0.80, 0.72, 0.60
    band = int(hw * 3 / 4)
    img[band:, :, :] = np.array([0.50, 0.40, 0.30])
    img += rng.normal(0.0, 0.015, size=(hw, hw, 1))
    return img


def _render_table(hw, rng):
    img = np.empty((hw, hw, 3))
    img[..., 0], img[..., 1], img[..., 2] = 0.38, 0.20, 0.14
    _, y = _grid(hw)
    phase = rng.uniform(0, 1)
    grain = 0.07 * np.sin(2 * math.pi * (y / 2.0 + phase))
    img += grain[..., None] * np.array([1.0, 0.8, 0.5])
    return img


def _render_plain(hw, rng):
    img = np.full((hw, hw, 3), 0.55)
    img += rng.normal(0.0, 0.01, size=(hw, hw, 1))
    return img


_SCENE_RENDERERS = {
    "in the rain": _render_rain,
    "in the snow": _render_snow,
    "on the grass": _render_grass,
    "in the river": _render_river,
    "in the sky": _render_sky,
    "on the floor": _render_floor,
    "in the room": _render_room,
    "on the table": _render_table,
}

REFERENCE_BACKDROP = "plain"  # neutral backdrop for subject reference images


# ---------------------------------------------------------------------------
# shape rasterization

def _hsv_to_rgb(h, s, v):
    i = int(h * 6.0) % 6
    f = h * 6.0 - math.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return [
        (v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q),
    ][i]


def _shape_sdf(kind, x, y, cx, cy, r):
    dx, dy = x - cx, y - cy
    if kind == "circle":
        return np.sqrt(dx * dx + dy * dy) - r
    if kind == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) - r * 0.9
    if kind == "triangle":
        # upward equilateral triangle via three half-planes
        rr = r * 1.15
        d1 = dy - rr * 0.5
        d2 = -0.5 * dy - math.sqrt(3) / 2 * dx - rr * 0.5
        d3 = -0.5 * dy + math.sqrt(3) / 2 * dx - rr * 0.5
        return np.maximum(np.maximum(d1, d2), d3)
    if kind == "cross":
        bar1 = np.maximum(np.abs(dx) - r, np.abs(dy) - r / 2.6)
        bar2 = np.maximum(np.abs(dx) - r / 2.6, np.abs(dy) - r)
        return np.minimum(bar1, bar2)
    raise WorldError(f"unknown class kind {kind!r}")


def _composite_shape(img, instance, hw, rng):
    if instance.size <= 0.0:
        return img
    cx = hw / 2 - 0.5 + rng.uniform(-hw / 10, hw / 10)
    cy = hw / 2 - 0.5 + rng.uniform(-hw / 10, hw / 10)
    r = instance.size * hw * 0.28
    x, y = _grid(hw)
    d = _shape_sdf(instance.class_noun, x, y, cx, cy, r)
    alpha = np.clip(-d, 0.0, 1.0)
    base = np.array(_hsv_to_rgb(instance.hue, 0.95, 0.95))
    vmod = 1.0 + 0.12 * np.sin(2 * math.pi * (instance.texture_phase + (x + y) / 4.0))
    color = base[None, None, :] * vmod[..., None]
    return img * (1 - alpha[..., None]) + color * alpha[..., None]


def render(world_spec, instance, scene_key, pose_seed):
    """Deterministic render of an instance in a scene."""
    if instance.class_noun not in world_spec.classes:
        raise WorldError(f"unknown class {instance.class_noun!r}")
    if scene_key not in world_spec.scenes:
        raise WorldError(f"unknown scene {scene_key!r}")
    return _render_with_backdrop(world_spec, instance, scene_key, pose_seed)


def render_reference(world_spec, instance, pose_seed):
    """Render the subject on the neutral reference backdrop."""
    if instance.class_noun not in world_spec.classes:
        raise WorldError(f"unknown class {instance.class_noun!r}")
    return _render_with_backdrop(world_spec, instance, REFERENCE_BACKDROP, pose_seed)


def _render_with_backdrop(world_spec, instance, backdrop, pose_seed):
    hw = world_spec.image_hw
    rng = np.random.default_rng(np.random.SeedSequence([int(pose_seed), 0x72656E64]))
    renderer = _SCENE_RENDERERS[backdrop] if backdrop != REFERENCE_BACKDROP else _render_plain
    img = renderer(hw, rng)
    img = _composite_shape(img, instance, hw, rng)
    return np.clip(img, 0.0, 1.0)


def random_instance(world_spec, class_noun, rng):
    if class_noun not in world_spec.classes:
        raise WorldError(f"unknown class {class_noun!r}")
    return InstanceSpec(
        class_noun=class_noun,
        hue=float(rng.uniform(0.0, 1.0)),
        texture_phase=float(rng.uniform(0.0, 1.0)),
        size=float(rng.uniform(0.55, 0.95)),
    )


def instance_for_index(world_spec, class_noun, index, world_seed):
    """The index-th canonical subject of a class (deterministic)."""
    rng = np.random.default_rng(
        np.random.SeedSequence([int(world_seed), _L_INSTANCE, hash_class(class_noun), int(index)]))
    return random_instance(world_spec, class_noun, rng)


def hash_class(name):
    return sum((i + 1) * b for i, b in enumerate(name.encode())) % (2**31)


# ---------------------------------------------------------------------------
# world build: vocabulary, calibration, separation gates

class World:
    def __init__(self, spec, seed, vocab, clip_keys, clip_table, gate_report):
        self.spec = spec
        self.seed = int(seed)
        self.vocab = vocab
        self.clip_keys = clip_keys
        self.clip_table = clip_table
        self.gate_report = gate_report

    @property
    def image_hw(self):
        return self.spec.image_hw

    def calibration(self):
        return self.clip_keys, self.clip_table


def _embed_many(images, hw, fn):
    return np.stack([np.asarray(fn(img, hw, 3)) for img in images])


def build_world(spec=None, seed=0):
    """Assemble vocabulary and calibration, then verify the embedder gates."""
    spec = spec or WorldSpec()
    vocab = prompts.build_vocabulary(spec.classes, prompts.SCENE_PHRASES, spec.identifiers)
    hw = spec.image_hw

    clip_keys, rows = [], []
    for ci, cls in enumerate(spec.classes):
        for si, scene in enumerate(spec.scenes):
            embeds = []
            for k in range(spec.calibration_count):
                rng = np.random.default_rng(
                    np.random.SeedSequence([int(seed), _L_CAL, ci, si, k]))
                inst = random_instance(spec, cls, rng)
                img = render(spec, inst, scene, pose_seed=int(rng.integers(2**31)))
                embeds.append(np.asarray(nets.clip_features(img, hw, 3)))
            clip_keys.append((cls, scene))
            rows.append(np.mean(embeds, axis=0))
    clip_table = np.stack(rows)

    report = _run_separation_gates(spec, seed, clip_keys, clip_table)
    return World(spec, seed, vocab, clip_keys, clip_table, report)


def _run_separation_gates(spec, seed, clip_keys, clip_table):
    hw = spec.image_hw
    n_probe = 6  # instances per class in the probe set
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), _L_GATE]))

    # instance-separation probe: same instance across scenes vs different
    # instances within a scene, compared through the instance embedder
    instances = [
        random_instance(spec, cls, rng) for cls in spec.classes for _ in range(n_probe)
    ]
    embeds = {}
    for ii, inst in enumerate(instances):
        for si, scene in enumerate(spec.scenes):
            img = render(spec, inst, scene, pose_seed=int(rng.integers(2**31)))
            embeds[ii, si] = np.asarray(nets.dino_features(img, hw, 3))

    n_s = len(spec.scenes)
    same_vals, diff_vals = [], []
    for ii in range(len(instances)):
        for si in range(n_s):
            for sj in range(si + 1, n_s):
                same_vals.append(float(cosine_similarity(embeds[ii, si], embeds[ii, sj])))
    for si in range(n_s):
        for ii in range(len(instances)):
            for jj in range(ii + 1, len(instances)):
                diff_vals.append(float(cosine_similarity(embeds[ii, si], embeds[jj, si])))
    same_mean, diff_mean = float(np.mean(same_vals)), float(np.mean(diff_vals))

    # scene-alignment probe: renders must score highest against their own
    # scene's calibrated text embedding, per class, averaged over renders
    align_ok = True
    align_worst = None
    key_index = {k: i for i, k in enumerate(clip_keys)}
    for ci, cls in enumerate(spec.classes):
        probe = {}
        for si, scene in enumerate(spec.scenes):
            vals = np.zeros(n_s)
            for k in range(8):
                prng = np.random.default_rng(
                    np.random.SeedSequence([int(seed), _L_GATE, 2, ci, si, k]))
                inst = random_instance(spec, cls, prng)
                img = render(spec, inst, scene, pose_seed=int(prng.integers(2**31)))
                emb = np.asarray(nets.clip_features(img, hw, 3))
                for sj, other in enumerate(spec.scenes):
                    vals[sj] += float(cosine_similarity(emb, clip_table[key_index[(cls, other)]]))
            probe[scene] = vals / 8.0
        for si, scene in enumerate(spec.scenes):
            vals = probe[scene]
            margin = vals[si] - max(v for sj, v in enumerate(vals) if sj != si)
            if align_worst is None or margin < align_worst[0]:
                align_worst = (float(margin), cls, scene)
            if margin <= 0:
                align_ok = False

    report = {
        "dino_same_instance_mean": same_mean,
        "dino_diff_instance_mean": diff_mean,
        "dino_margin": same_mean - diff_mean,
        "clip_align_ok": align_ok,
        "clip_worst_margin": align_worst[0],
        "clip_worst_cell": [align_worst[1], align_worst[2]],
    }
    if same_mean <= diff_mean:
        raise WorldBuildError(
            f"instance embedder separation failed: same-instance mean {same_mean:.4f} "
            f"<= different-instance mean {diff_mean:.4f}")
    if not align_ok:
        raise WorldBuildError(
            f"scene embedder alignment failed at {align_worst[1:]} "
            f"(margin {align_worst[0]:.4f})")
    return report


# ---------------------------------------------------------------------------
# corpus and priors

def build_pretrain_corpus(world, n_per_cell, seed):
    """(render, class-scene prompt) pairs covering every class x scene cell."""
    if n_per_cell < 1:
        raise WorldError("n_per_cell must be >= 1")
    spec = world.spec
    items = []
    for ci, cls in enumerate(spec.classes):
        for si, scene in enumerate(spec.scenes):
            for k in range(n_per_cell):
                rng = np.random.default_rng(
                    np.random.SeedSequence([int(seed), _L_CORPUS, ci, si, k]))
                inst = random_instance(spec, cls, rng)
                img = render(spec, inst, scene, pose_seed=int(rng.integers(2**31)))
                tokens = world.vocab.tokenize(
                    prompts.class_scene_text(prompts.PromptTemplate(None, cls, scene)))
                items.append(CorpusItem(img, tokens, cls, scene))
    return items


def save_world(dirpath, world):
    """Persist a built world (spec, seed, gate report, calibration, vocab)."""
    import os

    from . import tensorio

    os.makedirs(dirpath, exist_ok=True)
    world.vocab.save(os.path.join(dirpath, "vocab.txt"))
    tensorio.save_tensor(os.path.join(dirpath, "clip_table.tensor"), world.clip_table)
    tensorio.write_json(os.path.join(dirpath, "world.json"), {
        "classes": list(world.spec.classes),
        "scenes": list(world.spec.scenes),
        "image_hw": world.spec.image_hw,
        "channels": world.spec.channels,
        "calibration_count": world.spec.calibration_count,
        "identifiers": list(world.spec.identifiers),
        "seed": world.seed,
        "gate_report": world.gate_report,
        "clip_keys": [list(k) for k in world.clip_keys],
    })


def load_world(dirpath):
    import json
    import os

    from . import tensorio
    from .prompts import Vocabulary

    with open(os.path.join(dirpath, "world.json")) as fh:
        meta = json.load(fh)
    spec = WorldSpec(
        classes=tuple(meta["classes"]),
        scenes=tuple(meta["scenes"]),
        image_hw=meta["image_hw"],
        channels=meta["channels"],
        calibration_count=meta["calibration_count"],
        identifiers=tuple(meta["identifiers"]),
    )
    vocab = Vocabulary.load(os.path.join(dirpath, "vocab.txt"))
    table = tensorio.load_tensor(os.path.join(dirpath, "clip_table.tensor"))
    keys = [tuple(k) for k in meta["clip_keys"]]
    return World(spec, meta["seed"], vocab, keys, table, meta["gate_report"])


def save_priors(dirpath, prior_set):
    import os

    import numpy as np

    from . import tensorio

    os.makedirs(dirpath, exist_ok=True)
    stack = np.stack([it.image for it in prior_set.items])
    tensorio.save_tensor(os.path.join(dirpath, "images.tensor"), stack)
    tensorio.write_json(os.path.join(dirpath, "priors.json"), {
        "generation_seed": prior_set.generation_seed,
        "source_checkpoint": prior_set.source_checkpoint,
        "items": [
            {"tokens": list(it.tokens), "class_noun": it.class_noun, "scene": it.scene}
            for it in prior_set.items
        ],
    })


def load_priors(dirpath):
    import json
    import os

    from . import tensorio

    stack = tensorio.load_tensor(os.path.join(dirpath, "images.tensor"))
    with open(os.path.join(dirpath, "priors.json")) as fh:
        meta = json.load(fh)
    if len(meta["items"]) != stack.shape[0]:
        raise WorldError("prior manifest and image stack disagree on count")
    items = tuple(
        PriorItem(stack[i], list(row["tokens"]), row["class_noun"], row["scene"])
        for i, row in enumerate(meta["items"])
    )
    return PriorSet(items, meta["generation_seed"], meta["source_checkpoint"])


def generate_priors(pretrained_state, world, class_noun, scene_keys, N, seed,
                    n_ddim_steps=15, checkpoint_id="unsaved"):
    """Prior images sampled from the pretrained model.

    With scene_keys, prompts cycle "a <class> <scene>" over the keys;
    scene_keys=None produces the scene-free "a <class>" prior set used by
    the baseline regularizer.
    """
    from . import sampler
    from .schedule import schedule_from_spec

    if N < 1:
        raise WorldError("prior set size must be >= 1")
    if class_noun not in world.spec.classes:
        raise WorldError(f"unknown class {class_noun!r}")
    if scene_keys is not None:
        for s in scene_keys:
            if s not in world.spec.scenes:
                raise WorldError(f"unknown scene key {s!r}")

    sched = schedule_from_spec(pretrained_state.schedule_spec)
    items = []
    for k in range(N):
        if scene_keys is None:
            tpl = prompts.PromptTemplate(None, class_noun, None)
            tokens = prompts.class_text(tpl)
            scene = None
        else:
            scene = scene_keys[k % len(scene_keys)]
            tpl = prompts.PromptTemplate(None, class_noun, scene)
            tokens = prompts.class_scene_text(tpl)
        img_seed = int(np.random.default_rng(
            np.random.SeedSequence([int(seed), _L_PRIORS, k])).integers(2**63))
        img = sampler.generate_with_state(
            pretrained_state, sched, tokens, n_ddim_steps, img_seed)
        items.append(PriorItem(np.asarray(img), world.vocab.tokenize(tokens),
                               class_noun, scene))
    return PriorSet(tuple(items), int(seed), checkpoint_id)
