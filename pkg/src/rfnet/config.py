"""Flat ``key = value`` run configuration with typed keys per subcommand."""

from __future__ import annotations

from pathlib import Path
from typing import Callable, Dict, Iterable, Optional

from .network import DEFAULT_CHANNEL_PLAN, DOWNSAMPLE, VARIANTS


class ConfigError(ValueError):
    """Malformed or unknown configuration; reported as a usage error."""


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str):
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _str_list(text: str):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _str(text: str) -> str:
    return text.strip()


SCHEMA: Dict[str, Callable[[str], object]] = {
    "seed": int, "out_dir": _str,
    # training
    "epochs": int, "lr": float, "lr_decay_every": int, "batch": int, "resolution": int,
    "channel_plan": _int_list, "data_dir": _str, "variant": _str, "augment": _bool, "reduction": int,
    # synthetic data
    "n": int, "degraded_fraction": float, "noise_sigma": float, "hole_rate": float,
    "quant_levels": int, "shift_dx": int, "shift_dy": int,
    # evaluation
    "checkpoint": _str, "test_dir": _str, "n_test": int, "test_degraded_fraction": float,
    # ablation and verification
    "variants": _str_list, "seeds": _int_list, "scope": _str, "n_seeds": int,
}

DEFAULTS = {
    "seed": 0, "epochs": 20, "lr": 1e-4, "lr_decay_every": 15, "batch": 4, "resolution": 64,
    "channel_plan": DEFAULT_CHANNEL_PLAN, "variant": "full", "augment": True, "reduction": 4,
    "n": 200, "degraded_fraction": 0.0, "noise_sigma": 0.2, "hole_rate": 0.0, "quant_levels": 0,
    "shift_dx": 4, "shift_dy": 0, "n_test": 50, "test_degraded_fraction": 1.0,
    "variants": ("baseline", "ca", "ca_tsa", "ca_sa", "ab", "full"), "seeds": (0,),
    "scope": "all", "n_seeds": 10,
}

_DATA = {"n", "resolution", "degraded_fraction", "noise_sigma", "hole_rate", "quant_levels",
         "shift_dx", "shift_dy"}
_TRAIN = {"epochs", "lr", "lr_decay_every", "batch", "channel_plan", "data_dir", "variant",
          "augment", "reduction"} | _DATA

ALLOWED = {
    "gen-data": {"seed", "out_dir"} | _DATA,
    "train": {"seed", "out_dir"} | _TRAIN,
    "eval": {"seed", "out_dir", "checkpoint", "data_dir", "resolution"},
    "grad-check": {"seed", "out_dir", "scope", "n_seeds"},
    "ablate": {"seed", "out_dir", "variants", "seeds", "test_dir", "n_test",
               "test_degraded_fraction"} | _TRAIN,
    "lambda-report": {"seed", "out_dir", "checkpoint", "data_dir", "resolution"},
}

# keys that stay unset unless given (eval and lambda-report only resize on request)
NO_DEFAULT = {"eval": {"resolution"}, "lambda-report": {"resolution"}}


def parse_value(key: str, text: str):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return SCHEMA[key](text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from None


def parse_lines(lines: Iterable[str], source: str = "<config>") -> Dict[str, object]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    for no, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{no}: expected key = value, got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{no}: missing key")
        out[key] = parse_value(key, value)
    return out


def load_config(path) -> Dict[str, object]:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        return parse_lines(fh, source=str(path))


def parse_overrides(items: Iterable[str]) -> Dict[str, object]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, _, value = item.partition("=")
        out[key.strip()] = parse_value(key.strip(), value)
    return out


def resolve(subcommand: str, file_values: Optional[dict] = None, overrides: Optional[dict] = None,
            seed: Optional[int] = None, out_dir: Optional[str] = None) -> Dict[str, object]:
    """Merge defaults, file, overrides and flags (later wins) and validate."""
    allowed = ALLOWED[subcommand]
    given = dict(file_values or {})
    given.update(overrides or {})
    if seed is not None:
        given["seed"] = seed
    if out_dir is not None:
        given["out_dir"] = out_dir
    extra = sorted(set(given) - allowed)
    if extra:
        raise ConfigError(f"key(s) not accepted by {subcommand}: {', '.join(extra)}")
    skip = NO_DEFAULT.get(subcommand, set())
    cfg = {k: v for k, v in DEFAULTS.items() if k in allowed and k not in skip}
    cfg.update(given)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    for key in ("epochs", "batch", "n", "n_test", "n_seeds", "reduction"):
        if key in cfg:
            need(cfg[key] >= 1, f"{key} must be >= 1")
    if "lr" in cfg:
        need(cfg["lr"] > 0, "lr must be > 0")
    if "resolution" in cfg:
        need(cfg["resolution"] >= DOWNSAMPLE and cfg["resolution"] % DOWNSAMPLE == 0,
             f"resolution must be a positive multiple of {DOWNSAMPLE}")
    if "channel_plan" in cfg:
        plan = cfg["channel_plan"]
        need(len(plan) == 5 and all(c >= 1 for c in plan), "channel_plan needs 5 positive integers")
    if "variant" in cfg:
        need(cfg["variant"] in VARIANTS, f"unknown variant {cfg['variant']!r}")
    for v in cfg.get("variants", ()):
        need(v in VARIANTS, f"unknown variant {v!r}")
    if "seeds" in cfg:
        need(len(cfg["seeds"]) >= 1, "seeds must list at least one seed")
    for key in ("degraded_fraction", "test_degraded_fraction", "hole_rate"):
        if key in cfg:
            need(0.0 <= cfg[key] <= 1.0, f"{key} must be in [0, 1]")
    if "noise_sigma" in cfg:
        need(cfg["noise_sigma"] >= 0, "noise_sigma must be >= 0")
    if "quant_levels" in cfg:
        need(cfg["quant_levels"] == 0 or cfg["quant_levels"] >= 2, "quant_levels must be 0 or >= 2")
    if "scope" in cfg:
        need(cfg["scope"] in ("op", "module", "model", "all"), "scope must be op, module, model or all")


def to_json(cfg: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(cfg.items())}
