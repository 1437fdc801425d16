#!/usr/bin/env python3
"""Regenerate the frozen test fixtures under tests/data/.

Run from the repository root after an intentional change to the RNG
scheme or the selector forward pass, then review the diff carefully:
these files exist to make unintentional changes loud.
"""

import json
import os

import numpy as np

from selctl.numerics import SeededRng
from selctl.selectors import n_params, unflatten_params, medselect_forward, PoolView

DATA = os.path.join(os.path.dirname(__file__), "..", "tests", "data")


def freeze_rng():
    root = SeededRng(42)
    golden = {
        "root_uniform": root.uniforms(8).tolist(),
        "init_normal": root.child("init").normal(size=8).tolist(),
        "episode_integers": root.child("episode", 1, "t3").integers(0, 1000, size=8).tolist(),
        "shuffle_perm": root.child("shuffle", 0).permutation(10).tolist(),
    }
    path = os.path.join(DATA, "golden_rng_seed42.json")
    with open(path, "w") as f:
        json.dump(golden, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote {path}")


def freeze_selector_logits():
    d, hidden, n = 3, 4, 6
    rng = SeededRng(123)
    flat = 0.3 * rng.child("flat").normal(size=n_params(d, hidden))
    params = unflatten_params(flat, d, hidden)
    xs = rng.child("xs").normal(size=(n, d))
    pool = PoolView(embeddings=xs, clinical=np.zeros((n, 3)))
    logits = medselect_forward(params, pool)
    path = os.path.join(DATA, "golden_bilstm_logits.npy")
    np.save(path, logits)
    print(f"wrote {path}: {logits}")


if __name__ == "__main__":
    freeze_rng()
    freeze_selector_logits()
