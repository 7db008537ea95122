"""Cross-modal fusion blocks: layer-wise attention, trident spatial attention
and the quality-weighted adaptive attention fusion.

All blocks take single-sample ``C x H x W`` feature maps. Attention maps
broadcast against features: channel attention is ``C x 1 x 1``, spatial
attention ``1 x H x W``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Union

import numpy as np

from . import tensor as T
from .params import Conv, Dense
from .tensor import ShapeError, Tensor
from .tensor.init import constant

N_STAGES = 5
TSA_DILATIONS = (1, 3, 5)
SA_KERNEL = 7
NORM_EPS = 1e-8


# -- parameter containers ---------------------------------------------------

@dataclass
class LwaParams:
    """1x1 projections per modality and the C -> C/r -> 5 confidence MLP."""
    proj_r: Conv
    proj_d: Conv
    mlp_hidden: Dense
    mlp_out: Dense

    @classmethod
    def init(cls, rng, channels: int, reduction: int = 4, dtype=np.float32) -> "LwaParams":
        hidden = max(1, channels // reduction)
        return cls(
            proj_r=Conv.init(rng, channels, channels, 1, dtype),
            proj_d=Conv.init(rng, channels, channels, 1, dtype),
            mlp_hidden=Dense.init(rng, hidden, channels, dtype),
            mlp_out=Dense.init(rng, N_STAGES, hidden, dtype),
        )


@dataclass
class TsaParams:
    """Three dilated 3x3 branches over the pooled 2-channel map, fused 3 -> 1."""
    branch: List[Conv]
    fuse: Conv

    @classmethod
    def init(cls, rng, dtype=np.float32) -> "TsaParams":
        return cls(branch=[Conv.init(rng, 1, 2, 3, dtype) for _ in TSA_DILATIONS],
                   fuse=Conv.init(rng, 1, len(TSA_DILATIONS), 1, dtype))


@dataclass
class SaParams:
    """Single-convolution spatial attention (the ablation baseline)."""
    conv: Conv

    @classmethod
    def init(cls, rng, kernel: int = SA_KERNEL, dtype=np.float32) -> "SaParams":
        return cls(conv=Conv.init(rng, 1, 2, kernel, dtype))


@dataclass
class CaParams:
    """Shared C -> C/r -> C MLP applied to average- and max-pooled descriptors."""
    hidden: Dense
    out: Dense

    @classmethod
    def init(cls, rng, channels: int, reduction: int = 4, dtype=np.float32) -> "CaParams":
        hidden = max(1, channels // reduction)
        return cls(hidden=Dense.init(rng, hidden, channels, dtype),
                   out=Dense.init(rng, channels, hidden, dtype))


SpatialParams = Union[TsaParams, SaParams]


@dataclass
class FusionStageParams:
    alpha: Tensor
    beta: Tensor
    ca_r: Optional[CaParams] = None
    ca_d: Optional[CaParams] = None
    tsa_r: Optional[TsaParams] = None
    tsa_d: Optional[TsaParams] = None
    sa_r: Optional[SaParams] = None
    sa_d: Optional[SaParams] = None
    merge: Optional[Conv] = None

    @classmethod
    def init(cls, rng, channels: int, prev_channels: Optional[int] = None, attention: str = "ca+tsa",
             learn_ab: bool = True, reduction: int = 4, dtype=np.float32) -> "FusionStageParams":
        """``attention`` is one of ``none``, ``ca``, ``ca+tsa``, ``ca+sa``.

        Learnable alpha/beta start at 0.5; fixed ones are 1 so the block
        reduces to the plain sum of its active branches.
        """
        if attention not in ("none", "ca", "ca+tsa", "ca+sa"):
            raise ValueError(f"unknown attention mode {attention!r}")
        ab = 0.5 if learn_ab else 1.0
        stage = cls(alpha=constant((1,), ab, dtype), beta=constant((1,), ab, dtype))
        stage.alpha.requires_grad = stage.beta.requires_grad = learn_ab
        if attention != "none":
            stage.ca_r = CaParams.init(rng, channels, reduction, dtype)
            stage.ca_d = CaParams.init(rng, channels, reduction, dtype)
        if attention == "ca+tsa":
            stage.tsa_r, stage.tsa_d = TsaParams.init(rng, dtype), TsaParams.init(rng, dtype)
        elif attention == "ca+sa":
            stage.sa_r, stage.sa_d = SaParams.init(rng, dtype=dtype), SaParams.init(rng, dtype=dtype)
        else:
            stage.beta.data[...] = 0.0
        if prev_channels is not None:
            stage.merge = Conv.init(rng, channels, prev_channels + channels, 3, dtype)
        return stage

    @property
    def spatial(self):
        if self.tsa_r is not None:
            return self.tsa_r, self.tsa_d
        if self.sa_r is not None:
            return self.sa_r, self.sa_d
        return None

    @property
    def attention(self) -> str:
        if self.ca_r is None:
            return "none"
        if self.tsa_r is not None:
            return "ca+tsa"
        if self.sa_r is not None:
            return "ca+sa"
        return "ca"


@dataclass
class FusionParams:
    stage: List[FusionStageParams] = field(default_factory=list)


# -- layer-wise attention ---------------------------------------------------

def _mlp(x: Tensor, hidden: Dense, out: Dense) -> Tensor:
    return T.linear(T.relu(T.linear(x, hidden.weight, hidden.bias)), out.weight, out.bias)


def lwa_similarity(R1: Tensor, D1: Tensor, p: LwaParams):
    """Return the C x C softmax similarity and the attended map with its residual shortcut."""
    if R1.shape != D1.shape:
        raise ShapeError(f"LWA needs matching modalities, got {R1.shape} and {D1.shape}")
    C = R1.shape[0]
    r = T.reshape(T.conv2d(R1, p.proj_r.kernel, p.proj_r.bias), (C, -1))
    d = T.reshape(T.conv2d(D1, p.proj_d.kernel, p.proj_d.bias), (C, -1))
    sim = T.softmax(T.matmul(r, T.transpose(d)) * (1.0 / math.sqrt(C)), axis=-1)
    early = r + d
    attended = T.matmul(sim, early) + early
    return sim, attended


def lwa_forward(R1: Tensor, D1: Tensor, p: LwaParams) -> Tensor:
    """Five depth-confidence weights in (0, 1), one per encoder stage."""
    _, attended = lwa_similarity(R1, D1, p)
    pooled = T.mean(attended, axis=1)
    return T.sigmoid(_mlp(pooled, p.mlp_hidden, p.mlp_out))


# -- spatial attention ------------------------------------------------------

def pooled_channels(f: Tensor) -> Tensor:
    """2 x H x W stack of channel-average and channel-max maps."""
    return T.concat([T.channel_avg_pool(f), T.channel_max_pool(f)], axis=0)


def vanilla_sa(f: Tensor, p: SaParams) -> Tensor:
    k = p.conv.kernel.shape[-1]
    return T.sigmoid(T.conv2d(pooled_channels(f), p.conv.kernel, p.conv.bias, padding=k // 2))


def tsa_logits(f: Tensor, p: TsaParams) -> Tensor:
    """Pre-sigmoid trident response, 1 x H x W."""
    squeezed = pooled_channels(f)
    branches = [T.conv2d(squeezed, conv.kernel, conv.bias, padding=d, dilation=d)
                for conv, d in zip(p.branch, TSA_DILATIONS)]
    return T.conv2d(T.concat(branches, axis=0), p.fuse.kernel, p.fuse.bias)


def tsa_forward(f: Tensor, p: TsaParams) -> Tensor:
    return T.sigmoid(tsa_logits(f, p))


def spatial_attention(f: Tensor, p: SpatialParams) -> Tensor:
    return tsa_forward(f, p) if isinstance(p, TsaParams) else vanilla_sa(f, p)


# -- channel attention and cross-reference fusion ---------------------------

def channel_attention(f: Tensor, p: CaParams) -> Tensor:
    """Per-channel weights in (0, 1), shape C x 1 x 1."""
    avg = _mlp(T.global_avg_pool(f), p.hidden, p.out)
    peak = _mlp(T.global_max_pool(f), p.hidden, p.out)
    return T.reshape(T.sigmoid(avg + peak), (f.shape[0], 1, 1))


def shared_fuse(a_r: Tensor, a_d: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Min-max normalised elementwise maximum of two attention maps.

    A constant map normalises to zero.
    """
    m = T.maximum(a_r, a_d)
    lo = T.amin(m)
    return (m - lo) / (T.amax(m) - lo + eps)


def qcrm(R: Tensor, D: Tensor, lam, att_r: Tensor, att_d: Tensor) -> Tensor:
    """``A_f * A_r * R + lam * A_f * A_d * D`` for broadcastable attention maps."""
    shared = shared_fuse(att_r, att_d)
    return shared * att_r * R + lam * (shared * att_d * D)


def qcrm_ca(R: Tensor, D: Tensor, lam, ca_r: CaParams, ca_d: CaParams) -> Tensor:
    _check_pair(R, D)
    return qcrm(R, D, lam, channel_attention(R, ca_r), channel_attention(D, ca_d))


def qcrm_tsa(R: Tensor, D: Tensor, lam, sp_r: SpatialParams, sp_d: SpatialParams) -> Tensor:
    """Spatial counterpart of :func:`qcrm_ca`; also accepts vanilla SA parameters."""
    _check_pair(R, D)
    return qcrm(R, D, lam, spatial_attention(R, sp_r), spatial_attention(D, sp_d))


def crm_concat(R: Tensor, D: Tensor, ca_r: CaParams, ca_d: CaParams) -> Tensor:
    """Concatenating cross-reference module, 2C x H x W."""
    _check_pair(R, D)
    a_r, a_d = channel_attention(R, ca_r), channel_attention(D, ca_d)
    shared = shared_fuse(a_r, a_d)
    return T.concat([shared * a_r * R, shared * a_d * D], axis=0)


def af_fuse(R: Tensor, D: Tensor, lam, stage: FusionStageParams,
            f_prev: Optional[Tensor] = None) -> Tensor:
    """Adaptive attention fusion of one encoder stage, merged with the previous level."""
    _check_pair(R, D)
    if stage.ca_r is None:
        fused = R + lam * D
    else:
        fused = stage.alpha * qcrm_ca(R, D, lam, stage.ca_r, stage.ca_d)
        spatial = stage.spatial
        if spatial is not None:
            fused = fused + stage.beta * qcrm_tsa(R, D, lam, *spatial)
    if f_prev is None:
        return fused
    if stage.merge is None:
        raise ValueError("stage has no merge convolution but a previous level was given")
    pooled = T.spatial_max_pool(f_prev, 2, 2)
    if pooled.shape[1:] != fused.shape[1:]:
        raise ShapeError(f"pooled previous level {pooled.shape} does not match stage output {fused.shape}")
    return T.conv2d(T.concat([pooled, fused], axis=0), stage.merge.kernel, stage.merge.bias, padding=1)


def _check_pair(R: Tensor, D: Tensor) -> None:
    if R.shape != D.shape:
        raise ShapeError(f"RGB and depth features differ: {R.shape} vs {D.shape}")
