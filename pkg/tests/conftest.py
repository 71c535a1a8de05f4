import numpy as np
import pytest

from scenefuse import nets, prompts, trainer
from scenefuse import world as world_mod
from scenefuse.schedule import build_schedule


@pytest.fixture(scope="session")
def world0():
    return world_mod.build_world(seed=0)


@pytest.fixture(scope="session")
def corpus0(world0):
    return world_mod.build_pretrain_corpus(world0, n_per_cell=16, seed=1)


@pytest.fixture(scope="session")
def desk_schedule():
    return build_schedule("linear", 100, 1e-4, 0.09)


@pytest.fixture(scope="session")
def pretrained(world0, corpus0, desk_schedule):
    """Desk-preset pretrained model shared by the heavier tests."""
    cfg = trainer.desk_pretrain_config(seed=3)
    state, _ = trainer.pretrain(world0, corpus0, cfg, schedule=desk_schedule)
    return state


# --- small fixtures for gradient checks -----------------------------------

SMALL_HW = 8


@pytest.fixture()
def small_vocab():
    return prompts.Vocabulary(
        ["a", "dog", "sks", "in", "the", "rain", "snow", "cat"])


@pytest.fixture()
def small_schedule():
    return build_schedule("linear", 20, 1e-3, 0.2)


@pytest.fixture()
def small_state(small_vocab, small_schedule):
    """Width-16 model over 8x8 images with one calibrated text key."""
    rng = np.random.default_rng(99)
    table = rng.normal(0.0, 0.3, (2, nets.CLIP_DIM))
    keys = [("dog", "in the rain"), ("dog", "in the snow")]
    return nets.init_model(
        small_vocab, small_schedule, seed=5,
        image_hw=SMALL_HW, hidden=16, d_tok=8, d_cond=8, d_time=8,
        clip_calibration=(keys, table),
    )


def rand_image(rng, hw=SMALL_HW):
    return rng.uniform(0.05, 0.95, (hw, hw, 3))
