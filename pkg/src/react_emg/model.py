"""Parameter construction for the full REACT model."""

import numpy as np

from . import backbone, conditioning
from .config import GROUP_DEPTHS
from .params import ParamSet


def build_params(cfg, seed=0, conditioning_seed=None):
    """Fresh encoder, decoder and conditioning parameters.

    The conditioning pathway draws from its own stream so re-initialising it
    never perturbs backbone weights.
    """
    ps = ParamSet()
    rng = np.random.default_rng([seed, 1])
    backbone.init_encoder(ps, cfg, rng)
    backbone.init_decoder(ps, cfg, rng)
    crng = np.random.default_rng([seed if conditioning_seed is None else conditioning_seed, 2])
    conditioning.init_conditioning(ps, cfg, crng)
    return ps


def reset_conditioning(ps, cfg, seed):
    fresh = ParamSet()
    conditioning.init_conditioning(fresh, cfg, np.random.default_rng([seed, 2]))
    for name, t in fresh.items():
        ps[name].data = t.data.copy()


def group_depth(group):
    for prefix, depth in GROUP_DEPTHS.items():
        if group == prefix or group.startswith(prefix + "."):
            return depth
    raise KeyError(f"no depth assigned to parameter group {group!r}")
