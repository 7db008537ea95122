"""Gradient verification suites behind ``rfnet grad-check``.

Each case builds float64 inputs for one seed, then compares backprop against
central differences. Shapes are drawn at random with C <= 8 and H, W <= 8.
"""

from __future__ import annotations

from typing import Callable, Dict, Iterator, List, Tuple

import numpy as np

from . import fusion as F
from . import tensor as T
from .network import ModelConfig, RFNetModel, bce_loss, forward, iou_loss
from .params import named_tensors
from .tensor import GradCheckReport, Tensor, grad_check
from .tensor.init import make_rng

OP_TOL = 1e-4
MODULE_TOL = 1e-4
MODEL_TOL = 1e-3
EPSILON = 1e-5
MODULE_MAX_ENTRIES = 96

Case = Callable[[np.random.Generator], Tuple[Callable, List[Tensor]]]


def _rand(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def _chw(rng, c_max=8, hw_min=3, hw_max=8):
    return int(rng.integers(1, c_max + 1)), int(rng.integers(hw_min, hw_max + 1)), int(rng.integers(hw_min, hw_max + 1))


def _params(obj) -> List[Tensor]:
    return [t for _, t in named_tensors(obj) if t.requires_grad]


def jitter(obj, rng, scale: float = 0.3):
    """Perturb every parameter so checks run away from the ties that zero biases create."""
    for _, t in named_tensors(obj):
        if t.requires_grad:
            t.data = t.data + scale * rng.standard_normal(t.shape)
    return obj


# -- op cases ----------------------------------------------------------------

def _op_conv(rng):
    C, H, W = _chw(rng)
    K, k = int(rng.integers(1, 4)), int(rng.choice([1, 3]))
    d = int(rng.integers(1, 3))
    stride = int(rng.integers(1, 3))
    x, w, b = _rand(rng, C, H, W), _rand(rng, K, C, k, k), _rand(rng, K)
    return (lambda x, w, b: T.conv2d(x, w, b, stride=stride, padding=d * (k // 2), dilation=d)), [x, w, b]


def _op_matmul(rng):
    m, k, n = (int(v) for v in rng.integers(1, 7, size=3))
    return T.matmul, [_rand(rng, m, k), _rand(rng, k, n)]


def _op_softmax(rng):
    axis = int(rng.integers(0, 2))
    return (lambda x: T.softmax(x, axis=axis)), [_rand(rng, 4, 5, scale=3.0)]


def _op_sigmoid(rng):
    return T.sigmoid, [_rand(rng, *_chw(rng), scale=3.0)]


def _op_relu(rng):
    return T.relu, [_rand(rng, *_chw(rng))]


def _op_mul_broadcast(rng):
    C, H, W = _chw(rng)
    return T.mul, [_rand(rng, C, H, W), _rand(rng, C, 1, 1)]


def _op_add_broadcast(rng):
    C, H, W = _chw(rng)
    return T.add, [_rand(rng, C, H, W), _rand(rng, 1, H, W)]


def _op_div(rng):
    C, H, W = _chw(rng)
    den = Tensor(rng.uniform(0.5, 2.0, (C, H, W)), requires_grad=True)
    return T.div, [_rand(rng, C, H, W), den]


def _op_concat(rng):
    _, H, W = _chw(rng)
    return (lambda a, b, c: T.concat([a, b, c], axis=0)), [_rand(rng, 1, H, W), _rand(rng, 2, H, W), _rand(rng, 1, H, W)]


def _op_gap(rng):
    return T.global_avg_pool, [_rand(rng, *_chw(rng))]


def _op_gmp(rng):
    return T.global_max_pool, [_rand(rng, *_chw(rng))]


def _op_cap(rng):
    return T.channel_avg_pool, [_rand(rng, *_chw(rng))]


def _op_cmp(rng):
    return T.channel_max_pool, [_rand(rng, *_chw(rng))]


def _op_maxpool(rng):
    C, H, W = _chw(rng, hw_min=2)
    return (lambda x: T.spatial_max_pool(x, 2, 2)), [_rand(rng, C, H, W)]


def _op_upsample(rng):
    C, H, W = _chw(rng, hw_min=1, hw_max=4)
    oh, ow = int(rng.integers(H, 9)), int(rng.integers(W, 9))
    return (lambda x: T.upsample_bilinear(x, oh, ow)), [_rand(rng, C, H, W)]


def _op_maximum(rng):
    shape = _chw(rng)
    return T.maximum, [_rand(rng, *shape), _rand(rng, *shape)]


def _op_minmax(rng):
    return (lambda x: T.amax(x) - T.amin(x)), [_rand(rng, *_chw(rng))]


def _op_getitem(rng):
    i = int(rng.integers(0, 5))
    return (lambda x: x[i] * x), [_rand(rng, 5)]


def _op_bce(rng):
    C, H, W = _chw(rng, c_max=1)
    gt = (rng.random((1, H, W)) > 0.5).astype(np.float64)
    return (lambda z: bce_loss(z, gt)), [_rand(rng, 1, H, W, scale=3.0)]


def _op_iou(rng):
    _, H, W = _chw(rng, c_max=1)
    gt = (rng.random((1, H, W)) > 0.5).astype(np.float64)
    return (lambda z: iou_loss(z, gt)), [_rand(rng, 1, H, W, scale=3.0)]


OP_CASES: Dict[str, Case] = {
    "conv2d": _op_conv, "matmul": _op_matmul, "softmax": _op_softmax, "sigmoid": _op_sigmoid,
    "relu": _op_relu, "mul_broadcast": _op_mul_broadcast, "add_broadcast": _op_add_broadcast,
    "div": _op_div, "concat": _op_concat, "global_avg_pool": _op_gap, "global_max_pool": _op_gmp,
    "channel_avg_pool": _op_cap, "channel_max_pool": _op_cmp, "spatial_max_pool": _op_maxpool,
    "upsample_bilinear": _op_upsample, "maximum": _op_maximum, "amax_amin": _op_minmax,
    "getitem": _op_getitem, "bce_loss": _op_bce, "iou_loss": _op_iou,
}


# -- module cases ---------------------------------------------------------------

def _closure(fn, inputs):
    return (lambda *_: fn()), inputs


def _mod_lwa(rng):
    C, H, W = _chw(rng, c_max=8)
    C = max(C, 2)
    R, D = _rand(rng, C, H, W), _rand(rng, C, H, W)
    p = jitter(F.LwaParams.init(rng, C, dtype=np.float64), rng)
    return _closure(lambda: F.lwa_forward(R, D, p), [R, D] + _params(p))


def _mod_sa(rng):
    f = _rand(rng, *_chw(rng))
    p = jitter(F.SaParams.init(rng, dtype=np.float64), rng)
    return _closure(lambda: F.vanilla_sa(f, p), [f] + _params(p))


def _mod_tsa(rng):
    f = _rand(rng, *_chw(rng))
    p = jitter(F.TsaParams.init(rng, dtype=np.float64), rng)
    return _closure(lambda: F.tsa_forward(f, p), [f] + _params(p))


def _mod_ca(rng):
    f = _rand(rng, *_chw(rng))
    p = jitter(F.CaParams.init(rng, f.shape[0], dtype=np.float64), rng)
    return _closure(lambda: F.channel_attention(f, p), [f] + _params(p))


def _mod_shared_fuse(rng):
    shape = _chw(rng)
    while True:
        a = rng.uniform(0.05, 0.95, shape)
        b = rng.uniform(0.05, 0.95, shape)
        m = np.sort(np.maximum(a, b), axis=None)
        # keep the elementwise max and the extreme values clear of ties
        if np.abs(a - b).min() > 1e-3 and m.size > 2 and min(m[1] - m[0], m[-1] - m[-2]) > 1e-3:
            break
    return F.shared_fuse, [Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)]


def _fusion_inputs(rng):
    C, H, W = _chw(rng)
    C = max(C, 2)
    R, D = _rand(rng, C, H, W), _rand(rng, C, H, W)
    lam = Tensor(rng.uniform(0.1, 0.9), requires_grad=True)
    return R, D, lam


def _mod_qcrm_ca(rng):
    R, D, lam = _fusion_inputs(rng)
    pr, pd = (jitter(F.CaParams.init(rng, R.shape[0], dtype=np.float64), rng) for _ in range(2))
    return _closure(lambda: F.qcrm_ca(R, D, lam, pr, pd), [R, D, lam] + _params(pr) + _params(pd))


def _mod_qcrm_tsa(rng):
    R, D, lam = _fusion_inputs(rng)
    pr, pd = (jitter(F.TsaParams.init(rng, dtype=np.float64), rng) for _ in range(2))
    return _closure(lambda: F.qcrm_tsa(R, D, lam, pr, pd), [R, D, lam] + _params(pr) + _params(pd))


def _mod_crm_concat(rng):
    R, D, _ = _fusion_inputs(rng)
    pr, pd = (jitter(F.CaParams.init(rng, R.shape[0], dtype=np.float64), rng) for _ in range(2))
    return _closure(lambda: F.crm_concat(R, D, pr, pd), [R, D] + _params(pr) + _params(pd))


def _mod_af(rng):
    C = int(rng.integers(2, 9))
    H, W = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    R, D = _rand(rng, C, H, W), _rand(rng, C, H, W)
    lam = Tensor(rng.uniform(0.1, 0.9), requires_grad=True)
    c_prev = int(rng.integers(1, 9))
    f_prev = _rand(rng, c_prev, 2 * H, 2 * W)
    stage = jitter(F.FusionStageParams.init(rng, C, c_prev, "ca+tsa", learn_ab=True, dtype=np.float64), rng)
    return _closure(lambda: F.af_fuse(R, D, lam, stage, f_prev), [R, D, lam, f_prev] + _params(stage))


def _mod_af_stage1(rng):
    R, D, lam = _fusion_inputs(rng)
    stage = jitter(F.FusionStageParams.init(rng, R.shape[0], None, "ca+tsa", learn_ab=True, dtype=np.float64), rng)
    return _closure(lambda: F.af_fuse(R, D, lam, stage), [R, D, lam] + _params(stage))


MODULE_CASES: Dict[str, Case] = {
    "lwa": _mod_lwa, "vanilla_sa": _mod_sa, "tsa": _mod_tsa, "channel_attention": _mod_ca,
    "shared_fuse": _mod_shared_fuse, "qcrm_ca": _mod_qcrm_ca, "qcrm_tsa": _mod_qcrm_tsa,
    "crm_concat": _mod_crm_concat, "af_fuse": _mod_af, "af_fuse_stage1": _mod_af_stage1,
}


# -- model case ----------------------------------------------------------------------

def model_case(seed: int, size: int = 32, channel_plan=(4, 8, 8, 8, 8), variant: str = "full"):
    """End-to-end BCE + IoU loss of a micro model, with its parameters as inputs."""
    rng = make_rng(seed)
    model = jitter(RFNetModel.init(ModelConfig(channel_plan, variant), seed=seed, dtype=np.float64), rng, 0.1)
    rgb = Tensor(rng.random((3, size, size)))
    depth = Tensor(rng.random((1, size, size)))
    gt = (rng.random((1, size, size)) > 0.6).astype(np.float64)

    def loss():
        logits = forward(rgb, depth, model).logits
        return bce_loss(logits, gt) + iou_loss(logits, gt)

    return (lambda *_: loss()), model.parameters()


# -- drivers --------------------------------------------------------------------------

def run_cases(cases: Dict[str, Case], seeds, tolerance: float, max_entries=None) -> Iterator[GradCheckReport]:
    for name, case in cases.items():
        worst = None
        for seed in seeds:
            fn, inputs = case(make_rng(seed))
            rep = grad_check(fn, inputs, epsilon=EPSILON, tolerance=tolerance, name=name,
                             max_entries=max_entries, seed=seed)
            if worst is None or rep.max_rel_error > worst.max_rel_error:
                worst = rep
        worst.name = f"{name} (worst of {len(seeds)} seeds)"
        yield worst


def run_scope(scope: str, seed: int = 0, n_seeds: int = 10) -> List[GradCheckReport]:
    seeds = [seed + i for i in range(n_seeds)]
    if scope == "op":
        return list(run_cases(OP_CASES, seeds, OP_TOL))
    if scope == "module":
        return list(run_cases(MODULE_CASES, seeds, MODULE_TOL, MODULE_MAX_ENTRIES))
    if scope == "model":
        fn, inputs = model_case(seed)
        return [grad_check(fn, inputs, epsilon=EPSILON, tolerance=MODEL_TOL, name="model (32x32 micro)",
                           max_entries=4, seed=seed)]
    if scope == "all":
        return run_scope("op", seed, n_seeds) + run_scope("module", seed, n_seeds) + run_scope("model", seed)
    raise ValueError(f"unknown grad-check scope {scope!r}")
