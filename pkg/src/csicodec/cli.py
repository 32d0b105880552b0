"""Command-line entry point for dataset generation, training and evaluation.

Configuration precedence: JSON file with flat dotted keys, overridden by
command-line flags, overridden by the WFCF_SEED environment variable. Every
run prints its fully resolved configuration to stderr.

Exit codes: 0 success, 2 user/config error, 3 I/O error, 4 numerical
divergence.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import metrics as met
from . import training as tr
from .channel import DatasetManifest, generate_dataset, load_dataset
from .errors import (CodecError, DivergedLoss, InvalidConfig, IoError)
from .localization import compare_stages
from .model import (FeedbackCodec, ModelConfig, SIZE_PRESETS, load_checkpoint,
                    save_checkpoint)

log = logging.getLogger("csicodec")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4


def _load_config_file(path):
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read config file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise InvalidConfig("config file must hold a JSON object of dotted keys")
    return cfg


def _resolve(file_cfg, key, flag_value, default):
    if flag_value is not None:
        return flag_value
    if key in file_cfg:
        return file_cfg[key]
    return default


def _resolve_seed(file_cfg, flag_value, default=0):
    seed = _resolve(file_cfg, "seed", flag_value, default)
    env = os.environ.get("WFCF_SEED")
    if env is not None:
        try:
            seed = int(env)
        except ValueError as exc:
            raise InvalidConfig(f"WFCF_SEED must be an integer, got {env!r}") from exc
    return int(seed)


def _print_resolved(resolved):
    print("resolved config: " + json.dumps(resolved, sort_keys=True), file=sys.stderr)


def _parse_bit_span(text):
    lo, _, hi = text.partition(":")
    try:
        lo_i, hi_i = int(lo), int(hi)
    except ValueError as exc:
        raise InvalidConfig(f"bad bit span {text!r}; expected lo:hi") from exc
    if lo_i > hi_i:
        raise InvalidConfig(f"bad bit span {text!r}; lo > hi")
    return list(range(lo_i, hi_i + 1))


def _require_file(path, kind):
    if not os.path.isfile(path):
        raise InvalidConfig(f"{kind} not found: {path}")


def _load_datasets(manifest_paths):
    datasets = []
    for path in manifest_paths:
        _require_file(path, "dataset manifest")
        manifest = DatasetManifest.load(path)
        data_path = manifest.file_path
        if not os.path.isabs(data_path):
            data_path = os.path.join(os.path.dirname(os.path.abspath(path)), data_path)
        datasets.append(load_dataset(data_path, manifest))
    return datasets


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen(args):
    _require_file(args.manifest, "manifest")
    manifest = DatasetManifest.load(args.manifest)
    resolved = {"manifest": args.manifest, "dry_run": args.dry_run,
                "sample_count": manifest.sample_count,
                "file_path": manifest.file_path, "seed": manifest.scenario.seed}
    _print_resolved(resolved)
    if args.dry_run:
        print(f"manifest ok: {manifest.dataset_id}, {manifest.sample_count} samples")
        return EXIT_OK
    written = generate_dataset(manifest)
    print(f"wrote {written} samples to {manifest.file_path}")
    return EXIT_OK


def cmd_pretrain(args):
    file_cfg = _load_config_file(args.config)
    size = _resolve(file_cfg, "model.size", args.size, "small")
    if size not in SIZE_PRESETS:
        raise InvalidConfig(f"unknown model size {size!r}; options: {sorted(SIZE_PRESETS)}")
    profile = _resolve(file_cfg, "pretrain.profile", args.profile, "desk")
    seed = _resolve_seed(file_cfg, args.seed)
    manifests = args.datasets or file_cfg.get("pretrain.datasets")
    if not manifests:
        raise InvalidConfig("no datasets given (use --datasets or pretrain.datasets)")
    if profile == "desk":
        cfg = tr.desk_profile(seed=seed)
    elif profile == "paper":
        cfg = tr.PretrainConfig(seed=seed)
    else:
        raise InvalidConfig(f"unknown profile {profile!r}; options: desk, paper")
    epochs = int(_resolve(file_cfg, "pretrain.epochs", args.epochs, cfg.epochs))
    batch = int(_resolve(file_cfg, "pretrain.batch_size", args.batch_size, cfg.batch_size))
    from dataclasses import replace
    cfg = replace(cfg, epochs=epochs, batch_size=batch, lr_period=epochs or 1)
    resolved = {"model.size": size, "pretrain.profile": profile, "seed": seed,
                "pretrain.epochs": epochs, "pretrain.batch_size": batch,
                "pretrain.datasets": list(manifests), "threads": args.threads,
                "out": args.out, "log": args.log}
    _print_resolved(resolved)
    datasets = _load_datasets(manifests)
    model = FeedbackCodec(SIZE_PRESETS[size](), seed=seed)
    tlog = tr.pretrain(datasets, model, cfg, log_csv=args.log,
                       checkpoint_path=args.out)
    if args.out:
        digest = hashlib.sha256(open(args.out, "rb").read()).hexdigest()
        print(f"checkpoint {args.out} sha256 {digest}")
    if tlog.rows:
        print(f"final val NMSE {tlog.rows[-1]['nmse_val_db']} dB "
              f"over {len(tlog.rows)} logged rows")
    return EXIT_OK


def _budget_from_flags(args):
    return met.LinkBudget(uplink_rate_bps_per_hz=args.uplink_rate,
                          bandwidth_hz=args.bandwidth,
                          coherence_time_s=args.coherence_time,
                          noise_power=args.noise_power,
                          power_budget=args.power)


def cmd_eval(args):
    _require_file(args.checkpoint, "checkpoint")
    model = load_checkpoint(args.checkpoint)
    datasets = _load_datasets([args.dataset])
    ds = datasets[0]
    users = args.users or ds.user_count
    if users > ds.user_count:
        raise InvalidConfig(f"--users {users} exceeds dataset user count {ds.user_count}")
    bits = _parse_bit_span(args.sweep_bits) if args.sweep_bits else [args.bits]
    budget = _budget_from_flags(args)
    resolved = {"checkpoint": args.checkpoint, "dataset": args.dataset,
                "bits": bits, "users": users, "samples": args.samples}
    _print_resolved(resolved)
    records = met.bit_sweep(model, ds, bits, budget, users=users,
                            max_samples=args.samples)
    header = f"{'b':>3} {'NMSE(dB)':>10} {'SE':>10} {'eta':>8} {'ESE':>10}"
    print(header)
    rows = []
    for b, rec in zip(bits, records):
        print(f"{b:>3} {rec.nmse_db:>10.3f} {rec.se_bits:>10.3f} "
              f"{rec.eta:>8.4f} {rec.ese_bits:>10.3f}")
        rows.append({"dataset_id": ds.dataset_id, "model_id": args.checkpoint,
                     "b": b, "K": users, "nmse_db": rec.nmse_db,
                     "se": rec.se_bits, "eta": rec.eta, "ese": rec.ese_bits,
                     "samples": args.samples})
    if args.out:
        import csv as _csv
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            writer = _csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
    return EXIT_OK


def cmd_localize(args):
    _require_file(args.checkpoint, "checkpoint")
    model = load_checkpoint(args.checkpoint)
    ds = _load_datasets([args.dataset])[0]
    if float(np.ptp(ds.positions)) == 0.0:
        raise InvalidConfig("dataset has no usable positions")
    heads = (1, 3) if args.head == "both" else (int(args.head),)
    resolved = {"checkpoint": args.checkpoint, "dataset": args.dataset,
                "heads": list(heads), "bits": args.bits, "samples": args.samples}
    _print_resolved(resolved)
    rows = compare_stages(model, ds, head_depths=heads, bits=args.bits,
                          max_samples=args.samples, epochs=args.epochs)
    print(f"{'stage':>12} {'head':>5} {'error(m)':>10} {'dim':>6} {'n':>6}")
    for row in rows:
        print(f"{row['stage']:>12} {row['head_layers']:>5} "
              f"{row['mean_error_m']:>10.3f} {row['feature_dim']:>6} {row['samples']:>6}")
    if args.out:
        import csv as _csv
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            writer = _csv.DictWriter(
                fh, fieldnames=["stage", "head_layers", "mean_error_m", "samples",
                                "feature_dim"])
            writer.writeheader()
            writer.writerows(rows)
    return EXIT_OK


def cmd_inspect(args):
    _require_file(args.checkpoint, "checkpoint")
    model = load_checkpoint(args.checkpoint)
    total, activated = model.count_parameters()
    cfg = model.cfg
    print(f"config: enc {cfg.enc_depth}x{cfg.enc_width}/{cfg.enc_heads}h, "
          f"dec {cfg.dec_depth}x{cfg.dec_width}/{cfg.dec_heads}h, "
          f"experts {cfg.n_shared}-{cfg.top_k}-{cfg.n_routed}, "
          f"patch {cfg.patch}, CR {cfg.compression_ratio:.5f}")
    print(f"total parameters:     {total:>10,} ({total / 1e6:.2f} M)")
    print(f"activated parameters: {activated:>10,} ({activated / 1e6:.2f} M)")
    print(f"activated/total:      {activated / total:>10.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="csicodec",
        description="Multi-user CSI feedback codec: generate, train, evaluate")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker cap; 1 keeps runs fully deterministic")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a dataset from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("pretrain", help="multi-dataset self-supervised pre-training")
    p.add_argument("--config", help="JSON config file with flat dotted keys")
    p.add_argument("--datasets", nargs="+", help="dataset manifest paths")
    p.add_argument("--size", choices=sorted(SIZE_PRESETS))
    p.add_argument("--profile", choices=["desk", "paper"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="checkpoint output path")
    p.add_argument("--log", help="training log CSV path")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval", help="NMSE/SE/ESE evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="dataset manifest path")
    p.add_argument("--bits", type=int, default=5)
    p.add_argument("--sweep-bits", help="inclusive span lo:hi, e.g. 3:7")
    p.add_argument("--users", type=int)
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--uplink-rate", type=float, default=2.0)
    p.add_argument("--bandwidth", type=float, default=1e5)
    p.add_argument("--coherence-time", type=float, default=5e-3)
    p.add_argument("--noise-power", type=float, default=0.1)
    p.add_argument("--power", type=float, default=1.0)
    p.add_argument("--out", help="metrics CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("localize", help="stage-comparison localization study")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--head", choices=["1", "3", "both"], default="both")
    p.add_argument("--bits", type=int, default=5)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--samples", type=int)
    p.add_argument("--out", help="results CSV path")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("inspect", help="parameter report for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergedLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except IoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (InvalidConfig, CodecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
