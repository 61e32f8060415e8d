"""Command-line entry point.

Subcommands: synth-data (scene generation), train, enhance (WAV in/out),
evaluate (metric reports), selfcheck.  Options come from an optional
JSON config file; every config key has a matching kebab-case flag that
overrides it.  Exit codes: 0 ok, 2 configuration error, 3 I/O error,
4 non-finite loss, 5 checkpoint mismatch.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .mfmvdr import FilterOrder
from .models import CheckpointMismatchError, create_model, load_model
from .oracle import oracle_filter_params
from .scenes import (AudioBuffer, build_dataset, load_wav, save_wav,
                     synth_source_library)
from .stft import StftConfig, analyze, synthesize
from .training import DataError, NanLossError, TrainConfig, read_manifest, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_CHECKPOINT = 5


class ConfigError(RuntimeError):
    pass


DEFAULT_CONFIG = {
    "seed": 0,
    "stft": {"sample_rate_hz": 16000, "frame_len": 128, "frame_shift": 32},
    "filter": {"n_frames": 5},
    "tcn": {"stacks": 2, "layers_per_stack": 6, "kernel_size": 3,
            "budget": 200000},
    "train": {"lr_init": 3e-4, "plateau_patience_epochs": 3,
              "lr_halving_factor": 0.5, "clip_norm": 5.0, "batch_size": 8,
              "max_epochs": 150, "early_stop_patience": 10,
              "weight_decay": 1e-2, "beta_msae": 0.4},
    "data": {"count": 16, "snr_min": 0.0, "snr_max": 15.0, "duration_s": 2.0},
}


def load_config(path):
    """Merge a JSON config over the defaults; unknown keys are rejected."""
    config = json.loads(json.dumps(DEFAULT_CONFIG))  # deep copy
    if path is None:
        return config
    try:
        with open(path) as fh:
            user = json.load(fh)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e

    def merge(base, override, crumb):
        for key, value in override.items():
            if key not in base:
                raise ConfigError(f"unknown config key: {crumb}{key}")
            if isinstance(base[key], dict):
                if not isinstance(value, dict):
                    raise ConfigError(f"config key {crumb}{key} must be a section")
                merge(base[key], value, f"{crumb}{key}.")
            else:
                base[key] = value

    merge(config, user, "")
    return config


def _apply_overrides(config, args, mapping):
    for flag, (section, key) in mapping.items():
        value = getattr(args, flag, None)
        if value is not None:
            if section is None:
                config[key] = value
            else:
                config[section][key] = value


def _stft_config(config):
    try:
        return StftConfig(**config["stft"])
    except ValueError as e:
        raise ConfigError(str(e)) from e


def cmd_synth_data(args):
    config = load_config(args.config)
    _apply_overrides(config, args, {
        "seed": (None, "seed"), "count": ("data", "count"),
        "snr_min": ("data", "snr_min"), "snr_max": ("data", "snr_max"),
        "duration_s": ("data", "duration_s"),
    })
    data = config["data"]
    if data["snr_min"] > data["snr_max"]:
        raise ConfigError(f"snr-min {data['snr_min']} exceeds snr-max {data['snr_max']}")
    if data["count"] < 0:
        raise ConfigError("count must be >= 0")
    sources = Path(args.sources)
    if args.synth_sources and not (sources / "speech").exists():
        synth_source_library(sources, seed=config["seed"])
    manifest = build_dataset(data["count"], (data["snr_min"], data["snr_max"]),
                             config["seed"], sources, args.out,
                             duration_s=data["duration_s"])
    print(manifest)
    return EXIT_OK


def cmd_train(args):
    config = load_config(args.config)
    _apply_overrides(config, args, {
        "seed": (None, "seed"), "n_frames": ("filter", "n_frames"),
        "budget": ("tcn", "budget"), "lr_init": ("train", "lr_init"),
        "batch_size": ("train", "batch_size"), "max_epochs": ("train", "max_epochs"),
        "frame_len": ("stft", "frame_len"), "frame_shift": ("stft", "frame_shift"),
    })
    stft_config = _stft_config(config)
    try:
        train_config = TrainConfig(seed=config["seed"], **config["train"])
        order = FilterOrder(config["filter"]["n_frames"])
    except ValueError as e:
        raise ConfigError(str(e)) from e

    if args.resume:
        model = load_model(args.out)
        if model.name != args.model:
            raise CheckpointMismatchError(
                f"checkpoint at {args.out} holds model {model.name!r}, "
                f"cannot resume as {args.model!r}")
    else:
        model = create_model(args.model, stft_config, order,
                             config["tcn"]["budget"], config["seed"],
                             stacks=config["tcn"]["stacks"],
                             layers_per_stack=config["tcn"]["layers_per_stack"])
    reports = train(model, args.train_manifest, args.val_manifest, train_config,
                    args.out, resume=args.resume,
                    progress=lambda r: print(r.to_json()))
    best = min(r.val_loss for r in reports)
    print(f"done: {len(reports)} epochs, best validation loss {best:.6f}, "
          f"checkpoint at {args.out}")
    return EXIT_OK


def _enhance_wav_pair(model, in_left, in_right):
    buf_l = load_wav(in_left)
    buf_r = load_wav(in_right)
    if buf_l.num_channels != 1 or buf_r.num_channels != 1:
        raise ValueError("enhance expects mono left/right inputs")
    spec_l = analyze(buf_l.samples.astype(np.float64), model.stft_config)
    spec_r = analyze(buf_r.samples.astype(np.float64), model.stft_config)
    est_l, est_r = model.enhance(spec_l, spec_r)
    out = []
    for est, length in ((est_l, len(buf_l.samples)), (est_r, len(buf_r.samples))):
        y = synthesize(est)
        padded = np.zeros(length, dtype=np.float64)
        padded[: min(length, len(y))] = y[: length]
        out.append(padded)
    return out[0], out[1]


def cmd_enhance(args):
    model = load_model(args.checkpoint)
    if args.n_frames is not None and args.n_frames != model.order.n_frames:
        raise CheckpointMismatchError(
            f"checkpoint was trained with N={model.order.n_frames}, "
            f"flag requests N={args.n_frames}")
    if args.frame_len is not None and args.frame_len != model.stft_config.frame_len:
        raise CheckpointMismatchError(
            f"checkpoint expects frame_len={model.stft_config.frame_len}, "
            f"flag requests {args.frame_len}")
    out_l, out_r = _enhance_wav_pair(model, args.in_left, args.in_right)
    save_wav(args.out_left, AudioBuffer(out_l.astype(np.float32)))
    save_wav(args.out_right, AudioBuffer(out_r.astype(np.float32)))
    print(f"wrote {args.out_left} and {args.out_right}")
    return EXIT_OK


def _make_enhancer(args, config):
    if args.identity:
        def enhancer(rec):
            return (load_wav(rec["noisy_l"]).samples.astype(np.float64),
                    load_wav(rec["noisy_r"]).samples.astype(np.float64))
        return enhancer

    if args.oracle:
        stft_config = _stft_config(config)
        order = FilterOrder(config["filter"]["n_frames"])

        def enhancer(rec):
            from .mfmvdr import enhance_utterance
            specs = {}
            for key in ("noisy_l", "noisy_r", "clean_l", "clean_r",
                        "noise_l", "noise_r"):
                specs[key] = analyze(load_wav(rec[key]).samples.astype(np.float64),
                                     stft_config)
            params = oracle_filter_params(specs["clean_l"], specs["clean_r"],
                                          specs["noise_l"], specs["noise_r"], order)
            est_l, est_r = enhance_utterance(specs["noisy_l"], specs["noisy_r"],
                                             params, order)
            n = len(load_wav(rec["noisy_l"]).samples)
            out = []
            for est in (est_l, est_r):
                y = synthesize(est)
                padded = np.zeros(n)
                padded[: min(n, len(y))] = y[:n]
                out.append(padded)
            return out[0], out[1]
        return enhancer

    model = load_model(args.checkpoint)

    def enhancer(rec):
        return _enhance_wav_pair(model, rec["noisy_l"], rec["noisy_r"])
    return enhancer


def cmd_evaluate(args):
    from .metrics import evaluate_system

    config = load_config(args.config)
    _apply_overrides(config, args, {
        "n_frames": ("filter", "n_frames"), "frame_len": ("stft", "frame_len"),
        "frame_shift": ("stft", "frame_shift"),
    })
    records = read_manifest(args.manifest)
    enhancer = _make_enhancer(args, config)
    report = evaluate_system(records, enhancer)
    if args.report:
        report.write_jsonl(args.report)
    print(report.format_table())
    if report.failures:
        for utt, err in report.failures.items():
            print(f"failure {utt}: {err}", file=sys.stderr)
    return EXIT_OK


def cmd_selfcheck(args):
    from . import selfcheck
    ok = selfcheck.run(args.suite)
    return EXIT_OK if ok else 1


def build_parser():
    parser = argparse.ArgumentParser(
        prog="bmfmvdr",
        description="Binaural multi-frame MVDR speech enhancement toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic binaural dataset")
    p.add_argument("--config")
    p.add_argument("--count", type=int)
    p.add_argument("--snr-min", dest="snr_min", type=float)
    p.add_argument("--snr-max", dest="snr_max", type=float)
    p.add_argument("--duration-s", dest="duration_s", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--sources", required=True, help="source bank directory")
    p.add_argument("--synth-sources", action="store_true",
                   help="synthesize a source bank if the directory is empty")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("train", help="train a model end to end")
    p.add_argument("--config")
    p.add_argument("--model", choices=("bmfmvdr", "b1", "b2"), default="bmfmvdr")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--val-manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-frames", dest="n_frames", type=int)
    p.add_argument("--budget", type=int)
    p.add_argument("--lr-init", dest="lr_init", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--frame-len", dest="frame_len", type=int)
    p.add_argument("--frame-shift", dest="frame_shift", type=int)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("enhance", help="enhance a WAV pair with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in-left", required=True)
    p.add_argument("--in-right", required=True)
    p.add_argument("--out-left", required=True)
    p.add_argument("--out-right", required=True)
    p.add_argument("--n-frames", dest="n_frames", type=int)
    p.add_argument("--frame-len", dest="frame_len", type=int)
    p.set_defaults(fn=cmd_enhance)

    p = sub.add_parser("evaluate", help="score an enhancer over a manifest")
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--checkpoint")
    group.add_argument("--oracle", action="store_true")
    group.add_argument("--identity", action="store_true")
    p.add_argument("--report")
    p.add_argument("--n-frames", dest="n_frames", type=int)
    p.add_argument("--frame-len", dest="frame_len", type=int)
    p.add_argument("--frame-shift", dest="frame_shift", type=int)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("selfcheck", help="run built-in verification suites")
    p.add_argument("--suite", choices=("gradcheck", "invariants", "all"),
                   default="all")
    p.set_defaults(fn=cmd_selfcheck)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NanLossError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointMismatchError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_IO
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
