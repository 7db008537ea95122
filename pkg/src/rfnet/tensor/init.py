"""Seeded parameter initialisation.

All randomness flows through numpy's Philox generator, a 64-bit
counter-based PRNG, so a seed fully determines every initial weight.
"""

import numpy as np

from .core import Tensor


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def fan_in_uniform(rng: np.random.Generator, shape, dtype=np.float32) -> Tensor:
    """Uniform in +-sqrt(1/fan_in), fan_in being the product of all but the first extent."""
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
    bound = np.sqrt(1.0 / max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def constant(shape, value: float, dtype=np.float32) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True)
