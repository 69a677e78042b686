"""Deterministic RNG stream derivation.

All randomness in a run flows from one master seed.  A stream is named by
a purpose code plus integer qualifiers and derived as

    SeedSequence((master, purpose, *qualifiers))

so per-client and per-round streams are mutually independent and adding
clients or rounds never perturbs an existing stream.
"""

import numpy as np

# Purpose codes.  Frozen: changing them changes every derived stream.
INIT_PARAMS = 0      # model/parameter initialization
SPLIT = 1            # dataset shuffling for train/valid/test assignment
CLIENT_ROUND = 2     # per-client, per-round sampling and noise
COHORT_ORDER = 3     # per-round client ordering
SYNTH = 4            # synthetic dataset generation
CHECK = 5            # self-check and test-case generation


def stream(master_seed: int, purpose: int, *qualifiers: int) -> np.random.Generator:
    """Derive an independent generator from the master seed.

    Qualifiers must be non-negative integers (user ids, round indices).
    """
    if master_seed < 0:
        raise ValueError("master seed must be non-negative")
    key = (master_seed, purpose) + tuple(qualifiers)
    return np.random.default_rng(np.random.SeedSequence(key))


def client_round_stream(master_seed: int, user_id: int, round_idx: int) -> np.random.Generator:
    """Stream for one client's sampling/noise within one round."""
    return stream(master_seed, CLIENT_ROUND, user_id, round_idx)
