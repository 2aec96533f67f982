"""Python access to the inkdiff core.

Images are float32 arrays of shape (height, width) with 1.0 for white paper
and 0.0 for ink. Pipeline functions take configuration as JSON text, the same
format the command-line tool reads.
"""

import json

from ._core import (
    InkdiffError,
    default_config,
    desk_config,
    dtw,
    encode,
    evaluate,
    forward_sample,
    generate,
    leaf_count,
    linear_alpha_bars,
    mu_theta,
    normalize,
    perturb,
    perturbation_curve,
    posterior_q,
    render,
    rmse,
    sample,
    score_pair,
    train,
    vocab_size,
    vocabulary,
)


def config(preset="default", **overrides):
    """Returns a config dict from a preset with top-level sections merged in."""
    base = json.loads(desk_config() if preset == "desk" else default_config())
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            base[key].update(value)
        else:
            base[key] = value
    return base


__all__ = [name for name in dir() if not name.startswith("_") and name != "json"]
