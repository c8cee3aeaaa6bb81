"""``gliopipe`` command line: synthesize / preprocess / train / evaluate / export-plots.

Exit codes
    0  success
    2  configuration or usage error (bad JSON, unknown key, profile mismatch)
    3  I/O or data-format error (missing file, malformed GVOL/CSV/manifest)
    4  numeric failure (non-finite loss or gradient)
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .autodiff import CheckpointError, NonFiniteError
from .boost import StumpEnsemble
from .config import ConfigError, RunConfig, parse_run_config
from .models import build_model
from .plots import export_plots
from .preprocess import crop_labels, preprocess_pipeline
from .train import (
    CHECKPOINT_NAME,
    CONFIG_NAME,
    ENSEMBLE_NAME,
    boost_evaluate,
    evaluate,
    extract_features,
    prepare_dataset,
    run_training,
    write_per_case,
)
from .volcore import GvolError, LabelMask, load_case, load_cohort, save_cohort, save_mask, save_volume, synthetic_cohort

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("gliopipe")


class DataError(Exception):
    """Input data could not be read or parsed (exit code 3)."""


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------

def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, pairs) -> dict:
    """``pairs`` are "section.key=value" (or "key=value" for top-level keys);
    values are parsed as JSON when possible."""
    data = json.loads(json.dumps(data))
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.split(".")
        if len(parts) > 2 or not all(parts):
            raise ConfigError(f"override key {key!r} must be 'key' or 'section.key'")
        target = data
        if len(parts) == 2:
            target = data.setdefault(parts[0], {})
            if not isinstance(target, dict):
                raise ConfigError(f"[{parts[0]}] is not a section")
        target[parts[-1]] = _parse_value(value)
    return data


def _read_config_file(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None


def resolve_config(args, task=None) -> RunConfig:
    data = _read_config_file(getattr(args, "config", None))
    pairs = list(getattr(args, "set", None) or [])
    if task is not None:
        if "task" in data and data["task"] != task:
            log.info("--task %s overrides config task %s", task, data["task"])
        pairs.append(f"task={json.dumps(task)}")
    for flag, key in (("epochs", "train.epochs"), ("lr", "train.lr"), ("batch_size", "train.batch_size"),
                      ("seed", "seed")):
        v = getattr(args, flag, None)
        if v is not None:
            pairs.append(f"{key}={json.dumps(v)}")
    run = parse_run_config(apply_overrides(data, pairs))
    log.info("resolved config:\n%s", run.to_json().rstrip())
    return run


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synthesize(args):
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    seed = int(os.environ["GLIOPIPE_SEED"]) if os.environ.get("GLIOPIPE_SEED") else args.seed
    log.info("resolved config: %s", json.dumps({"n": args.n, "dims": list(args.dims), "seed": seed}))
    try:
        cases = synthetic_cohort(args.n, seed, tuple(args.dims))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    save_cohort(cases, args.out)
    log.info("wrote %d case(s) to %s", len(cases), args.out)
    return EXIT_OK


def cmd_preprocess(args):
    run = resolve_config(args)
    case = load_case(args.case, run.modalities)
    fused = preprocess_pipeline([case.modalities[m] for m in run.modalities], run.preprocess)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_volume(fused, out / "fused.gvol")
    save_mask(LabelMask(crop_labels(case.mask.labels, run.preprocess), case.mask.class_names), out / "mask.gvol")
    log.info("wrote fused volume %s to %s", fused.dims, out)
    return EXIT_OK


def cmd_train(args):
    run = resolve_config(args, task=args.task)
    cases = load_cohort(args.data, run.modalities)
    data = prepare_dataset(cases, run, run.task)
    result = run_training(run.task, data, run, out_dir=args.out)
    last = [r for r in result.records if r.split == "val"][-1]
    summary = result.summary or {k: v for k, v in last.as_dict().items() if v is not None}
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _load_checkpoint_dir(path):
    ckpt = Path(path)
    cfg_path = ckpt / CONFIG_NAME
    if not cfg_path.is_file():
        raise FileNotFoundError(f"no {CONFIG_NAME} in checkpoint directory {ckpt}")
    data = json.loads(cfg_path.read_text(encoding="utf-8"))
    data.pop("split", None)
    run = parse_run_config(data, env={})
    return ckpt, run


def cmd_evaluate(args):
    ckpt, run = _load_checkpoint_dir(args.checkpoint)
    task = args.task or run.task
    if task != run.task:
        raise ConfigError(f"checkpoint was trained for {run.task!r}, not {task!r}")
    log.info("resolved config:\n%s", run.to_json().rstrip())
    model = build_model(task, run.model)
    try:
        model.load(ckpt / CHECKPOINT_NAME)
    except ValueError as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise ConfigError(f"checkpoint does not match its profile: {exc}") from None
    data = prepare_dataset(load_cohort(args.data, run.modalities), run, task)
    ens = StumpEnsemble.from_text((ckpt / ENSEMBLE_NAME).read_text(encoding="utf-8")) if task == "classify" else None
    out = Path(args.out or ckpt / "eval")
    out.mkdir(parents=True, exist_ok=True)
    try:
        if task == "classify":
            z = extract_features(model, data, run.train.batch_size)
            if z.shape[1] != ens.n_features:
                raise ValueError(f"feature length {z.shape[1]} != ensemble's {ens.n_features}")
            cm, scores, rows = boost_evaluate(ens, z, data.grades, data.case_ids)
            (out / "confusion.csv").write_text(cm.to_csv(), encoding="utf-8")
            aggregate = {**scores, "n_cases": len(data)}
        else:
            rec, rows = evaluate(model, data, run.train, task, epoch=0)
            aggregate = {k: v for k, v in rec.as_dict().items() if v is not None and k not in ("epoch", "split")}
            aggregate["n_cases"] = len(data)
    except (FloatingPointError, OSError):
        raise
    except ValueError as exc:
        raise ConfigError(f"data incompatible with the checkpoint profile: {exc}") from None
    write_per_case(out / "per_case.csv", rows)
    (out / "aggregate.json").write_text(json.dumps(aggregate, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(aggregate, sort_keys=True))
    return EXIT_OK


def cmd_export_plots(args):
    try:
        export_plots(args.metrics, args.out)
    except ValueError as exc:
        raise DataError(f"{args.metrics}: {exc}") from None
    log.info("wrote %s", args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="gliopipe", description=__doc__.split("\n")[0],
                                 epilog="exit codes: 0 ok, 2 config, 3 I/O, 4 numeric")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key, e.g. train.lr=0.1 (repeatable)")
        p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("synthesize", help="write a synthetic cohort")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--dims", type=int, nargs=3, default=(32, 32, 32), metavar=("NX", "NY", "NZ"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("preprocess", help="fuse and enhance one case")
    p.add_argument("--case", required=True, help="case directory")
    p.add_argument("--out", required=True)
    with_config(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train one framework on a cohort")
    p.add_argument("--task", choices=("localize", "segment", "classify"), required=True)
    p.add_argument("--data", required=True, help="cohort directory with manifest.csv")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    with_config(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a trained run on a cohort")
    p.add_argument("--checkpoint", required=True, help="run directory written by 'train'")
    p.add_argument("--data", required=True)
    p.add_argument("--task", choices=("localize", "segment", "classify"))
    p.add_argument("--out", help="output directory (default: <checkpoint>/eval)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-plots", help="render metrics.csv as SVG curves")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_plots)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (OSError, GvolError, CheckpointError, DataError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except (FloatingPointError, NonFiniteError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
