"""``rfnet`` command-line entry point.

Usage: ``rfnet <subcommand> [--config FILE] [--seed N] [--out DIR] [key=value ...]``

Exit codes: 0 success, 1 usage error, 2 verification failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from . import __version__, datagen, metrics
from .config import ALLOWED, ConfigError, load_config, parse_overrides, resolve, to_json
from .datagen import DegradationConfig, SceneSpec, derive_seed
from .fusion import N_STAGES
from .network import ModelConfig, RFNetModel
from .tensor.checkpoint import CheckpointError, load_file, save_file
from .training import TrainConfig, predict, predict_with_lambdas, resize_sample, train, write_epoch_log

logger = logging.getLogger("rfnet")

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_IO = 0, 1, 2, 3
DEFAULT_OUT = "out"
TEST_SEED_OFFSET = 5000

LAMBDA_FIELDS = (["sample_id", "group"]
                 + [f"lambda{i}" for i in range(1, N_STAGES + 1)]
                 + [f"alpha{i}" for i in range(1, N_STAGES + 1)]
                 + [f"beta{i}" for i in range(1, N_STAGES + 1)]
                 + ["noise_sigma", "hole_rate", "shift_dx", "shift_dy", "quant_levels"])
ABLATION_FIELDS = ["variant", "seed", "mae", "f", "s", "e"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rfnet", description="Depth-robust RGB-D saliency: data, training, evaluation.")
    parser.add_argument("--version", action="version", version=f"rfnet {__version__}")
    parser.add_argument("subcommand", choices=sorted(ALLOWED))
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="output directory")
    parser.add_argument("overrides", nargs="*", metavar="key=value")
    return parser


# -- shared helpers --------------------------------------------------------------

def source_digest() -> str:
    """SHA-256 over the package sources, identifying the code that produced a run."""
    h = hashlib.sha256()
    root = Path(__file__).resolve().parent
    for path in sorted(root.rglob("*.py")):
        h.update(path.relative_to(root).as_posix().encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def write_run_record(out_dir: Path, subcommand: str, cfg: dict) -> None:
    record = {"subcommand": subcommand, "config": to_json(cfg), "version": __version__,
              "source_sha256": source_digest()}
    with open(out_dir / "run.json", "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


def degradation_from(cfg: dict) -> DegradationConfig:
    return DegradationConfig(noise_sigma=cfg["noise_sigma"], hole_rate=cfg["hole_rate"],
                             quant_levels=cfg["quant_levels"], shift=(cfg["shift_dx"], cfg["shift_dy"]))


def synth(cfg: dict, n: int, seed: int, degraded_fraction: float):
    res = cfg["resolution"]
    mix = (degraded_fraction, degradation_from(cfg)) if degraded_fraction > 0 else None
    return datagen.make_dataset(n, SceneSpec(seed=seed, size=(res, res)), mix)


def load_data(root, resolution: Optional[int] = None):
    try:
        samples = datagen.load_dataset(root)
        ids = datagen.sample_ids(root)
    except (KeyError, ValueError) as exc:
        raise OSError(f"cannot read dataset {root}: {exc}") from None
    if resolution is not None:
        samples = [resize_sample(s, resolution, resolution) for s in samples]
    return samples, ids


def load_model(path) -> RFNetModel:
    arrays = load_file(path)
    try:
        return RFNetModel.from_state_dict(arrays)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path} does not hold a compatible model: {exc}") from None


def train_config(cfg: dict, seed: int, variant: Optional[str] = None) -> TrainConfig:
    return TrainConfig(seed=seed, epochs=cfg["epochs"], lr=cfg["lr"], lr_decay_every=cfg["lr_decay_every"],
                       batch=cfg["batch"], channel_plan=tuple(cfg["channel_plan"]),
                       variant=variant or cfg["variant"], augment=cfg["augment"])


def training_data(cfg: dict):
    if cfg.get("data_dir"):
        return load_data(cfg["data_dir"], cfg["resolution"])[0]
    return synth(cfg, cfg["n"], cfg["seed"], cfg["degraded_fraction"])


def fit(cfg: dict, data, seed: int, variant: Optional[str] = None):
    tc = train_config(cfg, seed, variant)
    model = RFNetModel.init(ModelConfig(tc.channel_plan, tc.variant, cfg["reduction"]), seed=seed)
    return train(data, tc, model=model)


# -- subcommands -------------------------------------------------------------------

def cmd_gen_data(cfg: dict, out: Path) -> int:
    samples = synth(cfg, cfg["n"], cfg["seed"], cfg["degraded_fraction"])
    datagen.save_dataset(samples, out)
    logger.info("wrote %d samples to %s", len(samples), out)
    return EXIT_OK


def cmd_train(cfg: dict, out: Path) -> int:
    data = training_data(cfg)
    model, history = fit(cfg, data, cfg["seed"])
    save_file(model.state_dict(), out / "model.rfnt")
    write_epoch_log(out / "epochs.csv", history)
    logger.info("final loss %.4f; checkpoint in %s", history[-1].loss, out / "model.rfnt")
    return EXIT_OK


def cmd_eval(cfg: dict, out: Path) -> int:
    model = load_model(_require(cfg, "checkpoint"))
    samples, ids = load_data(_require(cfg, "data_dir"), cfg.get("resolution"))
    maps_dir = out / "maps"
    maps_dir.mkdir(parents=True, exist_ok=True)
    preds = []
    for sid, s in zip(ids, samples):
        p = predict(s.rgb, s.depth, model)
        datagen.save_map(p, maps_dir / f"{sid}.pgm")
        preds.append(p)
    per_sample, report = metrics.evaluate_maps(preds, [s.gt for s in samples], ids)
    metrics.write_report(out / "metrics.csv", per_sample, report)
    print(f"mae={report.mae:.4f} f={report.f_measure:.4f} s={report.s_measure:.4f} "
          f"e={report.e_measure:.4f} n={report.count}")
    return EXIT_OK


def cmd_grad_check(cfg: dict, out: Path) -> int:
    from .verify import run_scope

    reports = run_scope(cfg["scope"], seed=cfg["seed"], n_seeds=cfg["n_seeds"])
    with open(out / "gradcheck.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "max_rel_error", "tolerance", "n_checked", "passed"])
        for rep in reports:
            print(rep.line())
            writer.writerow([rep.name, repr(rep.max_rel_error), repr(rep.tolerance), rep.n_checked,
                             int(rep.passed)])
    failed = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} gradient checks passed")
    if failed:
        print(f"rfnet: verification failed: {len(failed)} gradient check(s) failed", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_ablate(cfg: dict, out: Path) -> int:
    data = training_data(cfg)
    if cfg.get("test_dir"):
        test = load_data(cfg["test_dir"], cfg["resolution"])[0]
    else:
        test = synth(cfg, cfg["n_test"], derive_seed(cfg["seed"], TEST_SEED_OFFSET),
                     cfg["test_degraded_fraction"])
    gts = [s.gt for s in test]
    rows = []
    for variant in cfg["variants"]:
        for seed in cfg["seeds"]:
            model, _ = fit(cfg, data, seed, variant)
            preds = [predict(s.rgb, s.depth, model) for s in test]
            _, rep = metrics.evaluate_maps(preds, gts)
            rows.append((variant, seed, rep))
            logger.info("%s seed %d: mae %.4f", variant, seed, rep.mae)
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ABLATION_FIELDS)
        for variant, seed, rep in rows:
            writer.writerow([variant, seed] + [repr(v) for v in rep.as_row()[1:]])
        for variant in cfg["variants"]:
            reps = [r for v, _, r in rows if v == variant]
            means = [math.fsum(r.as_row()[k] for r in reps) / len(reps) for k in range(1, 5)]
            writer.writerow([variant, "mean"] + [repr(v) for v in means])
    return EXIT_OK


def severity_group(d: DegradationConfig) -> str:
    if d.is_clean:
        return "clean"
    return (f"noise{d.noise_sigma:g}_holes{d.hole_rate:g}_shift{d.shift[0]}x{d.shift[1]}"
            f"_quant{d.quant_levels}")


def lambda_rows(model: RFNetModel, samples, ids) -> List[list]:
    """Per-sample rows followed by one mean row per degradation group."""
    alpha = [float(s.alpha.data[0]) for s in model.fusion.stage]
    beta = [float(s.beta.data[0]) for s in model.fusion.stage]
    rows, groups = [], {}
    for sid, s in zip(ids, samples):
        _, lam = predict_with_lambdas(s.rgb, s.depth, model)
        d = s.degradation
        g = severity_group(d)
        values = [float(v) for v in lam] + alpha + beta + [d.noise_sigma, d.hole_rate, d.shift[0], d.shift[1],
                                                          d.quant_levels]
        rows.append([sid, g] + values)
        groups.setdefault(g, []).append(values)
    for g in sorted(groups):
        cols = zip(*groups[g])
        rows.append(["mean", g] + [math.fsum(c) / len(groups[g]) for c in cols])
    return rows


def cmd_lambda_report(cfg: dict, out: Path) -> int:
    model = load_model(_require(cfg, "checkpoint"))
    samples, ids = load_data(_require(cfg, "data_dir"), cfg.get("resolution"))
    with open(out / "lambda_report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LAMBDA_FIELDS)
        for row in lambda_rows(model, samples, ids):
            writer.writerow(row[:2] + [repr(v) if isinstance(v, float) else v for v in row[2:]])
    return EXIT_OK


def _require(cfg: dict, key: str):
    if not cfg.get(key):
        raise ConfigError(f"{key} is required")
    return cfg[key]


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "grad-check": cmd_grad_check,
    "ablate": cmd_ablate, "lambda-report": cmd_lambda_report,
}


def thread_count() -> int:
    raw = os.environ.get("RFNET_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"RFNET_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"RFNET_THREADS must be a positive integer, got {raw!r}")
    return n


def run(argv: Sequence[str]) -> int:
    args = build_parser().parse_intermixed_args(list(argv))
    file_values = load_config(args.config) if args.config else {}
    cfg = resolve(args.subcommand, file_values, parse_overrides(args.overrides), args.seed, args.out)
    threads = thread_count()
    out = Path(cfg.get("out_dir") or DEFAULT_OUT)
    out.mkdir(parents=True, exist_ok=True)
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=threads):
        code = COMMANDS[args.subcommand](cfg, out)
    write_run_record(out, args.subcommand, cfg)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    argv = sys.argv[1:] if argv is None else argv
    try:
        return run(argv)
    except (UsageError, ConfigError) as exc:
        print(f"rfnet: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, CheckpointError) as exc:
        print(f"rfnet: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
