"""Synthetic RGB-D scenes, depth degradation and dataset file I/O.

Scenes place 1-3 rectangles or ellipses in front of a tilted background
plane; the salient mask is the union of object supports and objects are
always nearer than the background. Degradation models the two failure modes
of consumer depth: measurement noise and misalignment with the RGB frame.
"""

from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .tensor.init import make_rng

MANIFEST_FIELDS = ["id", "noise_sigma", "hole_rate", "shift_dx", "shift_dy", "quant_levels"]
MIN_FG_FRACTION = 0.02
MAX_FG_FRACTION = 0.40


@dataclass(frozen=True)
class ObjectSpec:
    kind: str  # "rectangle" or "ellipse"
    cy: float
    cx: float
    h: float
    w: float


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    size: Tuple[int, int] = (64, 64)
    n_objects: Optional[int] = None
    shape: str = "mixed"
    fg_band: Tuple[float, float] = (0.2, 0.5)
    bg_band: Tuple[float, float] = (0.6, 1.0)
    texture: float = 0.05
    objects: Optional[Tuple[ObjectSpec, ...]] = None

    def __post_init__(self):
        if self.fg_band[1] > self.bg_band[0]:
            raise ValueError("foreground depth band must lie in front of the background band")
        if self.n_objects is not None and not 1 <= self.n_objects <= 3:
            raise ValueError("n_objects must be between 1 and 3")
        if self.shape not in ("rectangle", "ellipse", "mixed"):
            raise ValueError(f"unknown shape family {self.shape!r}")


@dataclass(frozen=True)
class DegradationConfig:
    noise_sigma: float = 0.0
    hole_rate: float = 0.0
    quant_levels: int = 0
    shift: Tuple[int, int] = (0, 0)  # (dx, dy) in pixels
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0.0 <= self.hole_rate <= 1.0:
            raise ValueError("hole_rate must be in [0, 1]")
        if self.quant_levels < 0 or self.quant_levels == 1:
            raise ValueError("quant_levels must be 0 (off) or >= 2")

    @property
    def is_clean(self) -> bool:
        return (self.noise_sigma == 0 and self.hole_rate == 0 and self.quant_levels == 0
                and tuple(self.shift) == (0, 0))


@dataclass
class SamplePair:
    rgb: np.ndarray    # 3 x H x W, [0, 1]
    depth: np.ndarray  # 1 x H x W, [0, 1]
    gt: np.ndarray     # 1 x H x W, {0, 1}
    scene: Optional[SceneSpec] = None
    degradation: DegradationConfig = field(default_factory=DegradationConfig)


# -- scene synthesis ------------------------------------------------------------

def _support(obj: ObjectSpec, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    if obj.kind == "rectangle":
        return ((yy >= obj.cy - obj.h / 2) & (yy < obj.cy + obj.h / 2)
                & (xx >= obj.cx - obj.w / 2) & (xx < obj.cx + obj.w / 2))
    if obj.kind == "ellipse":
        return ((yy + 0.5 - obj.cy) / (obj.h / 2)) ** 2 + ((xx + 0.5 - obj.cx) / (obj.w / 2)) ** 2 <= 1.0
    raise ValueError(f"unknown object kind {obj.kind!r}")


def _random_objects(spec: SceneSpec, rng: np.random.Generator) -> Tuple[ObjectSpec, ...]:
    H, W = spec.size
    n = spec.n_objects or int(rng.integers(1, 4))
    objs = []
    for _ in range(n):
        kind = spec.shape if spec.shape != "mixed" else ("rectangle", "ellipse")[int(rng.integers(2))]
        h = rng.uniform(0.15, 0.5) * H
        w = rng.uniform(0.15, 0.5) * W
        cy = rng.uniform(h / 2, H - h / 2)
        cx = rng.uniform(w / 2, W - w / 2)
        objs.append(ObjectSpec(kind, float(cy), float(cx), float(h), float(w)))
    return tuple(objs)


def gen_scene(spec: SceneSpec) -> SamplePair:
    """Render a clean RGB-D pair; identical specs give bitwise-identical samples."""
    rng = make_rng(spec.seed)
    H, W = spec.size
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    for _ in range(1000):
        objects = spec.objects if spec.objects is not None else _random_objects(spec, rng)
        supports = [_support(o, yy, xx) for o in objects]
        gt = np.logical_or.reduce(supports)
        frac = gt.mean()
        if spec.objects is not None or MIN_FG_FRACTION <= frac <= MAX_FG_FRACTION:
            break
    else:
        raise RuntimeError("could not place objects within the foreground area limits")
    if not gt.any():
        raise ValueError("scene has an empty salient mask")

    bg_lo, bg_hi = spec.bg_band
    gy, gx = rng.uniform(-1, 1, size=2)
    ramp = gy * (yy / max(H - 1, 1) - 0.5) + gx * (xx / max(W - 1, 1) - 0.5)
    ramp = (ramp - ramp.min()) / (np.ptp(ramp) + 1e-12)
    depth = bg_lo + (bg_hi - bg_lo) * (0.1 + 0.8 * ramp)

    bg_color = rng.uniform(0.1, 0.9, size=3)
    shade = rng.uniform(-0.15, 0.15, size=3)
    rgb = bg_color[:, None, None] + shade[:, None, None] * ramp[None]

    fg_lo, fg_hi = spec.fg_band
    for obj, sup in zip(objects, supports):
        near = rng.uniform(fg_lo, fg_hi - 0.05 * (fg_hi - fg_lo))
        depth[sup] = near
        rgb[:, sup] = rng.uniform(0.0, 1.0, size=3)[:, None]
    rgb = rgb + spec.texture * rng.standard_normal(rgb.shape)

    return SamplePair(
        rgb=np.clip(rgb, 0.0, 1.0).astype(np.float32),
        depth=depth[None].astype(np.float32),
        gt=gt[None].astype(np.float32),
        scene=replace(spec, objects=tuple(objects)),
    )


# -- depth degradation ----------------------------------------------------------

def shift_map(depth: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Translate by (dx, dy) pixels, replicating the edge into uncovered area."""
    H, W = depth.shape[-2:]
    rows = np.clip(np.arange(H) - dy, 0, H - 1)
    cols = np.clip(np.arange(W) - dx, 0, W - 1)
    return depth[..., rows[:, None], cols[None, :]]


def degrade(depth: np.ndarray, cfg: DegradationConfig) -> np.ndarray:
    """Shift, quantise, add Gaussian noise, punch holes, then clip to [0, 1]."""
    out = np.array(depth, dtype=np.float64)
    rng = make_rng(cfg.seed)
    dx, dy = cfg.shift
    if dx or dy:
        out = shift_map(out, int(dx), int(dy))
    if cfg.quant_levels:
        steps = cfg.quant_levels - 1
        out = np.round(out * steps) / steps
    if cfg.noise_sigma > 0:
        out = out + cfg.noise_sigma * rng.standard_normal(out.shape)
    if cfg.hole_rate > 0:
        out = np.where(rng.random(out.shape) < cfg.hole_rate, 0.0, out)
    return np.clip(out, 0.0, 1.0).astype(np.asarray(depth).dtype)


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0] >> 1)


def make_dataset(n: int, spec_template: SceneSpec = SceneSpec(), quality_mix=None) -> List[SamplePair]:
    """``n`` scenes derived from ``spec_template.seed``.

    ``quality_mix`` is ``None`` (all clean) or ``(fraction, DegradationConfig)``:
    exactly ``round(n * fraction)`` samples, chosen by seed, are degraded with
    the given config (each with its own noise seed).
    """
    base = spec_template.seed
    degraded = set()
    cfg = None
    if quality_mix is not None:
        frac, cfg = quality_mix
        k = int(round(n * float(frac)))
        degraded = set(make_rng(derive_seed(base, 7)).permutation(n)[:k].tolist())
    samples = []
    for i in range(n):
        sample = gen_scene(replace(spec_template, seed=derive_seed(base, i)))
        if i in degraded:
            sample_cfg = replace(cfg, seed=derive_seed(base, i, 1))
            sample.depth = degrade(sample.depth, sample_cfg)
            sample.degradation = sample_cfg
        samples.append(sample)
    return samples


# -- file I/O ----------------------------------------------------------------

def _to_uint8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_map(saliency: np.ndarray, path) -> None:
    """Write a single-channel map in [0, 1] as 8-bit binary PGM (P5)."""
    arr = np.asarray(saliency)
    if arr.ndim == 3:
        arr = arr[0]
    Image.fromarray(_to_uint8(arr), mode="L").save(path, format="PPM")


def save_rgb(rgb: np.ndarray, path) -> None:
    """Write a 3 x H x W image in [0, 1] as 8-bit binary PPM (P6)."""
    Image.fromarray(_to_uint8(np.moveaxis(np.asarray(rgb), 0, -1)), mode="RGB").save(path, format="PPM")


def load_map(path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L"), dtype=np.float32) / 255.0)[None]


def load_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.moveaxis(np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0, -1, 0).copy()


def load_pair(rgb_path, depth_path, gt_path) -> SamplePair:
    rgb, depth, gt = load_rgb(rgb_path), load_map(depth_path), load_map(gt_path)
    if not (rgb.shape[1:] == depth.shape[1:] == gt.shape[1:]):
        raise ValueError(f"size mismatch: rgb {rgb.shape}, depth {depth.shape}, gt {gt.shape}")
    return SamplePair(rgb, depth, (gt > 0.5).astype(np.float32))


def save_dataset(samples: Sequence[SamplePair], root) -> None:
    root = Path(root)
    for sub in ("rgb", "depth", "gt"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    with open(root / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        for i, s in enumerate(samples):
            sid = f"{i:04d}"
            save_rgb(s.rgb, root / "rgb" / f"{sid}.ppm")
            save_map(s.depth, root / "depth" / f"{sid}.pgm")
            save_map(s.gt, root / "gt" / f"{sid}.pgm")
            d = s.degradation
            writer.writerow([sid, d.noise_sigma, d.hole_rate, d.shift[0], d.shift[1], d.quant_levels])


def load_dataset(root) -> List[SamplePair]:
    """Read a directory written by :func:`save_dataset`, in manifest order."""
    root = Path(root)
    manifest = root / "manifest.csv"
    if not manifest.is_file():
        raise FileNotFoundError(f"no manifest.csv in {root}")
    samples = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            sid = row["id"]
            s = load_pair(root / "rgb" / f"{sid}.ppm", root / "depth" / f"{sid}.pgm", root / "gt" / f"{sid}.pgm")
            s.degradation = DegradationConfig(
                noise_sigma=float(row["noise_sigma"]), hole_rate=float(row["hole_rate"]),
                quant_levels=int(row["quant_levels"]),
                shift=(int(row["shift_dx"]), int(row["shift_dy"])))
            samples.append(s)
    if not samples:
        raise ValueError(f"dataset at {root} is empty")
    return samples


def sample_ids(root) -> List[str]:
    with open(os.path.join(root, "manifest.csv"), newline="") as fh:
        return [row["id"] for row in csv.DictReader(fh)]
