"""Command-line entry point.

Every subcommand takes ``--config FILE`` (JSON object) plus the common flags;
flags override config values, which override built-in defaults. Exit codes:
0 success, 1 usage error, 2 data error, 3 check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data
from .ablation import run_ablation
from .evaluation import evaluate_rmse, export_attention, fusion_profile
from .gradcheck import gradcheck
from .spn import SpnConfig, Variant, forward
from .train import TrainConfig, load_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3

DEFAULTS = {
    "seed": 0,
    "variant": "SPN",
    "epochs": 270,
    "batch": 64,
    "lr": 1e-4,
    "n": 3,
    "m": 2,
    "units": 12,
    "val_fraction": 0.1,
    "fusion_lr_scale": 1.0,
    # synth
    "days": 20,
    "intervals_per_day": 48,
    "height": 8,
    "width": 8,
    "holidays": 4,
    # gradcheck
    "grid": 4,
    "tolerance": 1e-5,
    "coords": 8,
    # ablate
    "variants": "SPN,SRNN,SCNN,PRNN",
    "seeds": "0,1,2",
}

# gradcheck runs on a deliberately small model unless told otherwise
COMMAND_DEFAULTS = {"gradcheck": {"n": 2, "m": 2, "units": 1}}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of option values")
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--variant", help=f"one of {', '.join(v.value for v in Variant)}")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out", help="output directory (or file for fusion-profile)")
    p.add_argument("--checkpoint", help="checkpoint directory written by train")
    p.add_argument("--n", type=int, help="sequential length")
    p.add_argument("--m", type=int, help="periodic length")
    p.add_argument("--units", type=int, help="residual units in the flow extractor")
    p.add_argument("--fusion-lr-scale", type=float, help="lr multiplier for the fusion layers")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crowdflow", description="Attentive crowd-flow forecasting")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    _common(p)
    for flag, typ in (("--days", int), ("--intervals-per-day", int), ("--height", int), ("--width", int),
                      ("--holidays", int), ("--test-days", int), ("--amplitude", float), ("--rho", float),
                      ("--noise", float), ("--rain-effect", float), ("--peak-amplitude", float)):
        p.add_argument(flag, type=typ)

    p = sub.add_parser("train", help="train one variant")
    _common(p)

    p = sub.add_parser("eval", help="test-split RMSE of a checkpoint")
    _common(p)
    p.add_argument("--clamp", action="store_true", help="floor denormalized predictions at zero")

    p = sub.add_parser("predict", help="forecast one interval")
    _common(p)
    p.add_argument("--target", type=int, help="global interval index (default: first test target)")

    p = sub.add_parser("gradcheck", help="backward vs finite differences")
    _common(p)
    p.add_argument("--grid", type=int)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--coords", type=int, help="entries checked per large tensor")

    p = sub.add_parser("ablate", help="train a variant list and compare test RMSE")
    _common(p)
    p.add_argument("--variants")
    p.add_argument("--seeds")

    p = sub.add_parser("export-attention", help="write ACFM attention maps for one sample")
    _common(p)
    p.add_argument("--target", type=int)

    p = sub.add_parser("fusion-profile", help="mean fusion weight per time-of-day slot")
    _common(p)
    return parser


def _options(args: argparse.Namespace) -> dict:
    """Built-in defaults, then the config file, then explicit flags."""
    opts = {**DEFAULTS, **COMMAND_DEFAULTS.get(args.command, {})}
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        opts.update({k.replace("-", "_"): v for k, v in loaded.items()})
    opts.update({k: v for k, v in vars(args).items() if v is not None and k != "config"})
    return opts


def _need(opts: dict, key: str):
    if opts.get(key) in (None, ""):
        raise UsageError(f"--{key.replace('_', '-')} is required")
    return opts[key]


def _variant(opts: dict) -> Variant:
    try:
        return Variant.parse(str(opts["variant"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _train_config(opts: dict) -> TrainConfig:
    return TrainConfig(
        n=int(opts["n"]), m=int(opts["m"]), n_units=int(opts["units"]), epochs=int(opts["epochs"]),
        batch_size=int(opts["batch"]), lr=float(opts["lr"]), val_fraction=float(opts["val_fraction"]),
        fusion_lr_scale=float(opts["fusion_lr_scale"]),
    )


def _load(opts: dict) -> data.Dataset:
    return data.load_dataset(_need(opts, "dataset"))


def _checkpoint(opts: dict):
    path = opts.get("checkpoint") or (Path(_need(opts, "out")) / "final")
    if not (Path(path) / "checkpoint.json").exists():
        raise UsageError(f"no checkpoint at {path}")
    return load_checkpoint(path)


def _test_samples(ds: data.Dataset, config: SpnConfig, val_fraction: float = 0.1):
    return data.split_samples(data.build_samples(ds, config), ds.manifest, val_fraction)[2]


def _pick(samples, target):
    if not samples:
        raise data.DatasetError("no test samples with full history")
    if target is None:
        return samples[0]
    for s in samples:
        if s.target == target:
            return s
    raise UsageError(f"interval {target} is not a test target with full history")


def cmd_synth(opts: dict) -> int:
    out = _need(opts, "out")
    fields = {
        "days": "days", "intervals_per_day": "intervals_per_day", "h": "height", "w": "width",
        "n_holiday": "holidays", "test_days": "test_days", "amplitude": "amplitude", "rho": "rho",
        "noise_sigma": "noise", "rain_effect": "rain_effect", "peak_amplitude": "peak_amplitude",
    }
    kwargs = {f: opts[k] for f, k in fields.items() if opts.get(k) is not None}
    ds = data.synthesize(data.SynthConfig(**kwargs), int(opts["seed"]))
    data.save_dataset(ds, out)
    print(f"wrote {ds.manifest.record_count} intervals of {ds.manifest.h}x{ds.manifest.w} flows to {out}")
    return EXIT_OK


def cmd_train(opts: dict) -> int:
    ds, variant = _load(opts), _variant(opts)
    out = Path(_need(opts, "out"))
    _, report = train(ds, _train_config(opts), variant, int(opts["seed"]), out_dir=out)
    val = f", best val RMSE {min(report.val_rmse):.4f} @ epoch {report.best_epoch + 1}" if report.val_rmse else ""
    print(f"{variant.value}: final train loss {report.epoch_losses[-1]:.6f}{val}; checkpoints in {out}")
    return EXIT_OK


def cmd_eval(opts: dict) -> int:
    ds = _load(opts)
    params, variant, config = _checkpoint(opts)
    test = _test_samples(ds, config)
    if not test:
        raise data.DatasetError("no test samples with full history")
    rmse = evaluate_rmse(params, variant, test, ds, clamp=bool(opts.get("clamp")))
    print(f"{variant.value} test RMSE {rmse:.6f} over {len(test)} samples")
    return EXIT_OK


def cmd_predict(opts: dict) -> int:
    ds = _load(opts)
    params, variant, config = _checkpoint(opts)
    sample = _pick(_test_samples(ds, config), opts.get("target"))
    pred, _ = forward(data.make_batch(ds, [sample]), variant, params)
    flows = ds.denormalize(pred.data[0])
    out = Path(_need(opts, "out"))
    out.mkdir(parents=True, exist_ok=True)
    (out / "forecast.bin").write_bytes(np.ascontiguousarray(flows, dtype="<f8").tobytes())
    lines = [f"# forecast for interval {sample.target} (day {sample.day}, slot {sample.interval}), {variant.value}"]
    for ch, name in enumerate(("inflow", "outflow")):
        lines.append(f"# {name}")
        lines.extend(" ".join(f"{v:.4f}" for v in row) for row in flows[ch])
    (out / "forecast.txt").write_text("\n".join(lines) + "\n")
    print(f"forecast for interval {sample.target} written to {out}")
    return EXIT_OK


def cmd_gradcheck(opts: dict) -> int:
    variant = _variant(opts)
    g = int(opts["grid"])
    ext_length = data.external_length(int(opts["holidays"]))
    config = SpnConfig(g, g, int(opts["n"]), int(opts["m"]), int(opts["units"]), int(opts["intervals_per_day"]), ext_length)
    try:
        report = gradcheck(config, variant, int(opts["seed"]), coords_per_tensor=int(opts["coords"]),
                           tolerance=float(opts["tolerance"]))
    except RuntimeError as exc:
        print(f"gradcheck {variant.value}: {exc}", file=sys.stderr)
        return EXIT_CHECK
    print(report.format())
    return EXIT_OK if report.passed else EXIT_CHECK


def cmd_ablate(opts: dict) -> int:
    ds = _load(opts)
    variants = [Variant.parse(v) for v in str(opts["variants"]).split(",")]
    seeds = [int(s) for s in str(opts["seeds"]).split(",")]
    out = Path(_need(opts, "out"))
    result = run_ablation(ds, _train_config(opts), variants, seeds, out_dir=out)
    print("variant,median_test_rmse,published_taxibj_rmse")
    for name, med, pub in result.table():
        print(f"{name},{med:.6f},{'' if pub is None else pub}")
    return EXIT_OK


def cmd_export_attention(opts: dict) -> int:
    ds = _load(opts)
    params, variant, config = _checkpoint(opts)
    if not variant.attention or variant.is_cnn:
        raise UsageError(f"{variant.value} has no attention maps")
    sample = _pick(_test_samples(ds, config), opts.get("target"))
    _, trace = forward(data.make_batch(ds, [sample]), variant, params)
    out = Path(_need(opts, "out"))
    written = []
    target = ds.flows[sample.target]
    for name, branch, idx in (("seq", trace.seq, sample.seq), ("per", trace.per, sample.per)):
        if branch is not None:
            written += export_attention(branch, out, prefix=f"{name}_attention", inputs=ds.flows[list(idx)], target=target)
    print(f"wrote {len(written)} files for interval {sample.target} to {out}")
    return EXIT_OK


def cmd_fusion_profile(opts: dict) -> int:
    ds = _load(opts)
    params, variant, config = _checkpoint(opts)
    if variant is not Variant.SPN:
        raise UsageError(f"fusion weights exist only for SPN checkpoints, got {variant.value}")
    out = Path(_need(opts, "out"))
    if out.suffix != ".csv":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "fusion_profile.csv"
    rows = fusion_profile(params, _test_samples(ds, config), ds, out_path=out)
    print(f"{len(rows)} slots written to {out}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "export-attention": cmd_export_attention,
    "fusion-profile": cmd_fusion_profile,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](_options(args))
    except UsageError as exc:
        print(f"crowdflow {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (data.DatasetError, FileNotFoundError) as exc:
        print(f"crowdflow {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
