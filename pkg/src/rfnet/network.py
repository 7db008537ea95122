"""Dual-stream encoder, fusion-skip decoder and the saliency losses."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .fusion import N_STAGES, FusionParams, FusionStageParams, LwaParams, af_fuse, lwa_forward
from .params import Conv, load_state, named_tensors, state_dict
from .tensor import ShapeError, Tensor
from .tensor.init import make_rng

DEFAULT_CHANNEL_PLAN = (16, 32, 64, 128, 256)
DOWNSAMPLE = 2 ** N_STAGES
IOU_EPS = 1.0

# Table-3 style ablation rows: (attention, learnable alpha/beta, layer-wise attention)
VARIANTS: Dict[str, Tuple[str, bool, bool]] = {
    "baseline": ("none", False, False),
    "ca": ("ca", False, False),
    "ca_tsa": ("ca+tsa", False, False),
    "ca_sa": ("ca+sa", False, False),
    "ab": ("ca+tsa", True, False),
    "full": ("ca+tsa", True, True),
}


@dataclass
class ModelConfig:
    channel_plan: Tuple[int, ...] = DEFAULT_CHANNEL_PLAN
    variant: str = "full"
    reduction: int = 4
    decoder_width: Optional[int] = None

    def __post_init__(self):
        self.channel_plan = tuple(int(c) for c in self.channel_plan)
        if len(self.channel_plan) != N_STAGES:
            raise ValueError(f"channel_plan needs {N_STAGES} entries, got {self.channel_plan}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")

    @property
    def width(self) -> int:
        return self.decoder_width or self.channel_plan[0]


@dataclass
class Encoder:
    stage: List[Conv]


@dataclass
class Decoder:
    lateral: List[Conv]
    head: Conv


@dataclass
class RFNetModel:
    encoder_rgb: Encoder
    encoder_depth: Encoder
    lwa: Optional[LwaParams]
    fusion: FusionParams
    decoder: Decoder
    config: ModelConfig = field(metadata={"skip": True}, default_factory=ModelConfig)

    @classmethod
    def init(cls, config: ModelConfig = None, seed: int = 0, dtype=np.float32) -> "RFNetModel":
        config = config or ModelConfig()
        rng = make_rng(seed)
        plan = config.channel_plan
        attention, learn_ab, use_lwa = VARIANTS[config.variant]

        def encoder(c_in):
            chans = (c_in,) + plan
            return Encoder([Conv.init(rng, chans[i + 1], chans[i], 3, dtype) for i in range(N_STAGES)])

        enc_rgb, enc_depth = encoder(3), encoder(1)
        lwa = LwaParams.init(rng, plan[0], config.reduction, dtype) if use_lwa else None
        stages = [FusionStageParams.init(rng, plan[i], plan[i - 1] if i else None, attention,
                                         learn_ab, config.reduction, dtype) for i in range(N_STAGES)]
        decoder = Decoder(lateral=[Conv.init(rng, config.width, c, 3, dtype) for c in plan],
                          head=Conv.init(rng, 1, config.width, 1, dtype))
        return cls(enc_rgb, enc_depth, lwa, FusionParams(stages), decoder, config)

    def named_parameters(self):
        return named_tensors(self)

    def parameters(self) -> List[Tensor]:
        """Trainable tensors in checkpoint order."""
        return [t for _, t in named_tensors(self) if t.requires_grad]

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Trainable tensors only; fixed alpha/beta follow from the variant."""
        return state_dict(self, trainable_only=True)

    def load_state_dict(self, arrays) -> None:
        load_state(self, arrays, trainable_only=True)

    def zero_grad(self) -> None:
        for _, t in named_tensors(self):
            t.grad = None

    @classmethod
    def from_state_dict(cls, arrays: Dict[str, np.ndarray], dtype=np.float32) -> "RFNetModel":
        """Rebuild architecture from parameter names and shapes, then load values."""
        plan = tuple(int(arrays[f"encoder_rgb.stage{i}.kernel"].shape[0]) for i in range(1, N_STAGES + 1))
        width = int(arrays["decoder.head.kernel"].shape[1])
        if "fusion.stage1.tsa_r.fuse.kernel" in arrays:
            attention = "ca+tsa"
        elif "fusion.stage1.sa_r.conv.kernel" in arrays:
            attention = "ca+sa"
        elif "fusion.stage1.ca_r.hidden.weight" in arrays:
            attention = "ca"
        else:
            attention = "none"
        use_lwa = "lwa.proj_r.kernel" in arrays
        learn_ab = "fusion.stage1.alpha" in arrays
        match = [name for name, spec in VARIANTS.items() if spec == (attention, learn_ab, use_lwa)]
        if not match:
            raise ValueError(f"no model variant has attention={attention}, learnable alpha/beta={learn_ab}, "
                             f"layer-wise attention={use_lwa}")
        variant = match[0]
        if "fusion.stage1.ca_r.hidden.weight" in arrays:
            reduction = max(1, plan[0] // arrays["fusion.stage1.ca_r.hidden.weight"].shape[0])
        elif use_lwa:
            reduction = max(1, plan[0] // arrays["lwa.mlp_hidden.weight"].shape[0])
        else:
            reduction = 4
        model = cls.init(ModelConfig(plan, variant, reduction, width), seed=0, dtype=dtype)
        model.load_state_dict(arrays)
        return model


class Diagnostics(NamedTuple):
    alpha: np.ndarray
    beta: np.ndarray
    fused_shapes: List[Tuple[int, ...]]
    fused: Optional[List[Tensor]]


class ForwardResult(NamedTuple):
    logits: Tensor
    lambdas: Tensor
    diagnostics: Diagnostics


def check_input(rgb: Tensor, depth: Tensor) -> None:
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ShapeError(f"rgb must be 3 x H x W, got {rgb.shape}")
    if depth.ndim != 3 or depth.shape[0] != 1:
        raise ShapeError(f"depth must be 1 x H x W, got {depth.shape}")
    if rgb.shape[1:] != depth.shape[1:]:
        raise ShapeError(f"rgb {rgb.shape} and depth {depth.shape} differ in resolution")
    H, W = rgb.shape[1:]
    if H % DOWNSAMPLE or W % DOWNSAMPLE:
        raise ShapeError(f"resolution {H}x{W} is not divisible by {DOWNSAMPLE}")


def encode(x: Tensor, enc: Encoder) -> List[Tensor]:
    feats = []
    for conv in enc.stage:
        x = T.spatial_max_pool(T.relu(T.conv2d(x, conv.kernel, conv.bias, padding=1)), 2, 2)
        feats.append(x)
    return feats


def decode(fused: Sequence[Tensor], dec: Decoder, out_hw: Tuple[int, int]) -> Tensor:
    top = None
    for feat, conv in zip(reversed(fused), reversed(dec.lateral)):
        lat = T.relu(T.conv2d(feat, conv.kernel, conv.bias, padding=1))
        top = lat if top is None else lat + T.upsample_bilinear(top, *lat.shape[1:])
    logits = T.conv2d(top, dec.head.kernel, dec.head.bias)
    return T.upsample_bilinear(logits, *out_hw)


def forward(rgb, depth, model: RFNetModel, keep_features: bool = False) -> ForwardResult:
    """Saliency logits (1 x H x W) plus the five depth-confidence weights."""
    dtype = model.decoder.head.kernel.dtype
    rgb = rgb if isinstance(rgb, Tensor) else Tensor(np.asarray(rgb, dtype=dtype))
    depth = depth if isinstance(depth, Tensor) else Tensor(np.asarray(depth, dtype=dtype))
    check_input(rgb, depth)
    R = encode(rgb, model.encoder_rgb)
    D = encode(depth, model.encoder_depth)
    if model.lwa is not None:
        lambdas = lwa_forward(R[0], D[0], model.lwa)
    else:
        lambdas = Tensor(np.ones(N_STAGES, dtype=dtype))
    fused, prev = [], None
    for i, stage in enumerate(model.fusion.stage):
        lam = T.getitem(lambdas, i) if model.lwa is not None else 1.0
        prev = af_fuse(R[i], D[i], lam, stage, prev)
        fused.append(prev)
    logits = decode(fused, model.decoder, rgb.shape[1:])
    diag = Diagnostics(
        alpha=np.array([s.alpha.data[0] for s in model.fusion.stage]),
        beta=np.array([s.beta.data[0] for s in model.fusion.stage]),
        fused_shapes=[f.shape for f in fused],
        fused=fused if keep_features else None,
    )
    return ForwardResult(logits, lambdas, diag)


def bce_loss(logits: Tensor, gt) -> Tensor:
    return T.bce_with_logits(logits, gt)


def iou_loss(logits: Tensor, gt, eps: float = IOU_EPS) -> Tensor:
    g = gt if isinstance(gt, Tensor) else Tensor(np.asarray(gt, dtype=logits.dtype))
    p = T.sigmoid(logits)
    inter = T.tsum(p * g)
    union = T.tsum(p) + float(g.data.sum()) - inter
    return 1.0 - (inter + eps) / (union + eps)
