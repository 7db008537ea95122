"""Parameter containers shared by the fusion blocks and the network.

Containers are plain dataclasses whose leaves are :class:`Tensor`. Names are
derived from the field path: list fields expand to ``<field><index>`` with
1-based indices, so ``FusionParams.stage[2].tsa_r.branch[1].kernel`` becomes
``fusion.stage3.tsa_r.branch2.kernel``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Dict, Iterator, Mapping, Tuple

import numpy as np

from .tensor import Tensor
from .tensor.init import fan_in_uniform, zeros


@dataclass
class Conv:
    kernel: Tensor
    bias: Tensor

    @classmethod
    def init(cls, rng, c_out: int, c_in: int, k: int, dtype=np.float32) -> "Conv":
        return cls(fan_in_uniform(rng, (c_out, c_in, k, k), dtype), zeros((c_out,), dtype))


@dataclass
class Dense:
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, rng, n_out: int, n_in: int, dtype=np.float32) -> "Dense":
        return cls(fan_in_uniform(rng, (n_out, n_in), dtype), zeros((n_out,), dtype))


def named_tensors(obj, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
    if obj is None:
        return
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            if f.metadata.get("skip"):
                continue
            name = f"{prefix}.{f.name}" if prefix else f.name
            yield from named_tensors(getattr(obj, f.name), name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj, 1):
            yield from named_tensors(item, f"{prefix}{i}")


def state_dict(obj, prefix: str = "", trainable_only: bool = False) -> Dict[str, np.ndarray]:
    return {name: t.data for name, t in named_tensors(obj, prefix) if t.requires_grad or not trainable_only}


def load_state(obj, arrays: Mapping[str, np.ndarray], prefix: str = "", trainable_only: bool = False) -> None:
    """Copy ``arrays`` into the tensors of ``obj`` in place, checking names and shapes."""
    own = {n: t for n, t in named_tensors(obj, prefix) if t.requires_grad or not trainable_only}
    missing = sorted(set(own) - set(arrays))
    extra = sorted(set(arrays) - set(own))
    if missing or extra:
        raise KeyError(f"parameter name mismatch; missing={missing[:5]} unexpected={extra[:5]}")
    for name, t in own.items():
        arr = np.asarray(arrays[name])
        if arr.shape != t.shape:
            raise ValueError(f"{name}: shape {arr.shape} does not match {t.shape}")
        t.data = arr.astype(t.dtype)


def cast(obj, dtype) -> None:
    """Convert every tensor of ``obj`` to ``dtype`` in place."""
    for _, t in named_tensors(obj):
        t.data = t.data.astype(dtype)
        t.grad = None
