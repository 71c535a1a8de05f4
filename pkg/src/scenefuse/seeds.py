"""Deterministic seed derivation.

Every stage of a run pulls its randomness from the master seed through a
fixed integer label, so changing one stage's draws never perturbs the
others and reruns are bit-identical.
"""

import numpy as np

# purpose labels (stable; recorded in run manifests)
WORLD = 101
CORPUS = 102
PRIORS = 103
TRAINING = 104
SAMPLING = 105
MODEL_INIT = 106
EVAL = 107

# per-step stream labels inside training
STREAM_INSTANCE = 1
STREAM_PRIOR = 2
STREAM_FUSION = 3
STREAM_PICK = 4


def derive(master_seed, *labels):
    """A child seed (63-bit int) from the master seed and integer labels."""
    ss = np.random.SeedSequence([int(master_seed)] + [int(x) for x in labels])
    return int(ss.generate_state(1, np.uint64)[0] >> 1)


def rng_for(master_seed, *labels):
    """A fresh Generator for (master_seed, labels...)."""
    return np.random.default_rng(
        np.random.SeedSequence([int(master_seed)] + [int(x) for x in labels]))
