"""Command-line front end.

Subcommands: gen-data, train-source, adapt, ablate, diagnose. Reports go to
stdout, diagnostics and errors to stderr, and every failure exits nonzero.
Run records are JSON, written append-only (run_0001.json, run_0002.json, ...);
reruns never overwrite an existing record. Records are byte-reproducible for
a fixed seed once the wall-clock field is stripped (see
canonical_record_bytes).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import __version__
from .adapt import AdaptConfig, run_method
from .data import ShiftSpec, gen_synthetic_shift, load_csv, load_csv_domains, write_csv, DomainDataset
from .diagnostics import kernel_comparison_sweep, verify_bn_gradient
from .errors import ConfigError, DataError, MarginAdaptError
from .model import (
    LinearClassifier,
    MlpEncoder,
    CHECKPOINT_VERSION,
    clone_for_adaptation,
    load_checkpoint,
    save_checkpoint,
)
from .numeric import NormLayerState
from .train import TrainConfig, train_source_erm

RESULTS_SCHEMA_VERSION = 1
OUT_ENV_VAR = "MARGINADAPT_OUT"
NONDETERMINISTIC_KEYS = ("wall_clock_seconds",)

# the component grid cmd_ablate sweeps: endpoints, each single component,
# and the two natural pairs (refresh mechanically requires the bank)
ABLATION_GRID = [
    ("none", dict(enable_lm=False, enable_le=False, enable_li=False,
                  enable_bank=False, enable_refresh=False)),
    ("lm", dict(enable_lm=True, enable_le=False, enable_li=False,
                enable_bank=False, enable_refresh=False)),
    ("le", dict(enable_lm=False, enable_le=True, enable_li=False,
                enable_bank=False, enable_refresh=False)),
    ("bank", dict(enable_lm=False, enable_le=False, enable_li=False,
                  enable_bank=True, enable_refresh=False)),
    ("refresh", dict(enable_lm=False, enable_le=False, enable_li=False,
                     enable_bank=True, enable_refresh=True)),
    ("lm+le", dict(enable_lm=True, enable_le=True, enable_li=False,
                   enable_bank=False, enable_refresh=False)),
    ("le+refresh", dict(enable_lm=False, enable_le=True, enable_li=False,
                        enable_bank=True, enable_refresh=True)),
    ("all", dict(enable_lm=True, enable_le=True, enable_li=False,
                 enable_bank=True, enable_refresh=True)),
]

_BOOL_TRUE = {"true", "1", "yes", "on"}
_BOOL_FALSE = {"false", "0", "no", "off"}

_KEY_TYPES = {
    # adaptation
    "sigma": float, "lambda_weight": float, "top_k": int,
    "capacity_per_class": int, "lr": float, "batch_size": int,
    "steps": "optional_int", "seed": int, "method": str,
    "enable_lm": bool, "enable_le": bool, "enable_li": bool,
    "enable_bank": bool, "enable_refresh": bool,
    # source training
    "weight_decay": float, "epochs": int, "holdout_fraction": float,
    # model architecture
    "hidden_dims": str, "feature_dim": int, "use_norm": bool,
    # data generation
    "num_classes": int, "input_dim": int, "class_separation": float,
    "within_class_std": float, "shift_kind": str, "angle_deg": float,
    "translation_std": float, "samples_per_domain": int,
    "num_source_domains": int, "source_angle_max_deg": float,
}


def parse_config_file(path) -> dict:
    """Flat key=value file; '#' starts a comment. Keys must be known config
    fields; values are converted to the field's type."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}: line {lineno}: expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in _KEY_TYPES:
                raise ConfigError(f"{path}: line {lineno}: unknown key {key!r}")
            out[key] = _convert(key, value, f"{path}: line {lineno}")
    return out


def _convert(key, value, where):
    kind = _KEY_TYPES[key]
    try:
        if kind == "optional_int":
            return None if value.lower() == "none" else int(value)
        if kind is bool:
            low = value.lower()
            if low in _BOOL_TRUE:
                return True
            if low in _BOOL_FALSE:
                return False
            raise ValueError(f"not a boolean: {value!r}")
        return kind(value)
    except ValueError as e:
        raise ConfigError(f"{where}: bad value for {key}: {e}") from None


def _pick(table: dict, names) -> dict:
    return {k: v for k, v in table.items() if k in names}


def canonical_record_bytes(record: dict) -> bytes:
    """Serialized record with volatile (timing) fields removed; two runs of
    the same seed must agree on these bytes exactly."""
    trimmed = {k: v for k, v in record.items() if k not in NONDETERMINISTIC_KEYS}
    return json.dumps(trimmed, sort_keys=True, separators=(",", ":")).encode()


def write_run_record(out_dir, record: dict) -> str:
    """Append-only writer: picks the next free run_NNNN.json."""
    os.makedirs(out_dir, exist_ok=True)
    n = 1
    while True:
        path = os.path.join(out_dir, f"run_{n:04d}.json")
        try:
            with open(path, "x") as fh:
                json.dump(record, fh, sort_keys=True, indent=1)
                fh.write("\n")
            return path
        except FileExistsError:
            n += 1


def _out_dir(args) -> str:
    if args.out is not None:
        return args.out
    return os.environ.get(OUT_ENV_VAR, "marginadapt_out")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    file_cfg = parse_config_file(args.config) if args.config else {}
    spec_fields = (
        "num_classes input_dim class_separation within_class_std shift_kind "
        "angle_deg translation_std samples_per_domain num_source_domains "
        "source_angle_max_deg seed"
    ).split()
    values = _pick(file_cfg, spec_fields)
    for name in spec_fields:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    spec = replace(ShiftSpec(), **values).validate()
    sources, target = gen_synthetic_shift(spec)
    out = _out_dir(args)
    os.makedirs(out, exist_ok=True)
    paths = []
    for k, ds in enumerate(sources):
        paths.append(write_csv(ds, os.path.join(out, f"source_{k}.csv")))
    paths.append(write_csv(target, os.path.join(out, "target.csv")))
    sidecar = os.path.join(out, "shift_spec.json")
    with open(sidecar, "w") as fh:
        json.dump({"schema_version": RESULTS_SCHEMA_VERSION, "spec": spec.to_dict()},
                  fh, sort_keys=True, indent=1)
        fh.write("\n")
    paths.append(sidecar)
    print(f"task: {spec.num_classes} classes, dim {spec.input_dim}, "
          f"shift {spec.shift_kind} ({spec.angle_deg} deg)")
    for p in paths:
        print(f"wrote {p}")
    return 0


def _load_sources(data_dir, num_classes=None):
    names = sorted(
        f for f in os.listdir(data_dir)
        if f.startswith("source_") and f.endswith(".csv")
    )
    if not names:
        raise DataError(f"{data_dir}: no source_*.csv files")
    out = []
    for name in names:
        domains = load_csv_domains(os.path.join(data_dir, name), num_classes=num_classes)
        out.extend(domains[d] for d in sorted(domains))
    return out


def _sidecar_num_classes(data_dir):
    path = os.path.join(data_dir, "shift_spec.json")
    if not os.path.exists(path):
        return None
    with open(path) as fh:
        doc = json.load(fh)
    return doc.get("spec", {}).get("num_classes")


def cmd_train_source(args) -> int:
    file_cfg = parse_config_file(args.config) if args.config else {}
    train_fields = "lr weight_decay batch_size epochs holdout_fraction seed".split()
    values = _pick(file_cfg, train_fields)
    for name in train_fields:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    cfg = replace(TrainConfig(), **values).validate()

    num_classes = _sidecar_num_classes(args.data)
    sources = _load_sources(args.data, num_classes=num_classes)
    num_classes = sources[0].num_classes
    input_dim = sources[0].features.shape[1]

    hidden = args.hidden_dims if args.hidden_dims is not None else file_cfg.get("hidden_dims", "64,64")
    feature_dim = args.feature_dim if args.feature_dim is not None else file_cfg.get("feature_dim", 32)
    use_norm = args.use_norm or bool(file_cfg.get("use_norm", False))
    dims = [input_dim] + [int(h) for h in str(hidden).split(",") if h] + [int(feature_dim)]

    encoder = MlpEncoder.create(dims, use_norm=use_norm, seed=cfg.seed)
    classifier = LinearClassifier.create(int(feature_dim), num_classes, seed=cfg.seed + 1)
    _log(f"training on {sum(d.n for d in sources)} rows across {len(sources)} domains")
    report = train_source_erm(encoder, classifier, sources, cfg)

    out = _out_dir(args)
    os.makedirs(out, exist_ok=True)
    path = args.checkpoint or os.path.join(out, "checkpoint.json")
    save_checkpoint(path, encoder, classifier, seed=cfg.seed)
    print(f"holdout accuracy: {report.val_accuracy:.4f} (best epoch {report.best_epoch})")
    print(f"wrote {path}")
    return 0


def _adapt_config(args) -> AdaptConfig:
    file_cfg = parse_config_file(args.config) if args.config else {}
    fields = (
        "sigma lambda_weight top_k capacity_per_class lr batch_size steps "
        "seed method enable_lm enable_le enable_li enable_bank enable_refresh"
    ).split()
    values = _pick(file_cfg, fields)
    for name in fields:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    return replace(AdaptConfig(), **values).validate()


def _load_adapt_inputs(args):
    encoder, classifier, meta = load_checkpoint(args.checkpoint)
    target = load_csv(args.target, num_classes=classifier.num_classes)
    source_eval = None
    if args.source_data:
        sources = _load_sources(args.source_data, num_classes=classifier.num_classes)
        source_eval = DomainDataset(
            features=np.vstack([d.features for d in sources]),
            labels=np.concatenate([d.labels for d in sources]),
            num_classes=classifier.num_classes,
            domain_id="source_pool",
        )
    return encoder, classifier, meta, target, source_eval


def _run_record(kind, cfg, args, curve, reports, started):
    return {
        "schema_version": RESULTS_SCHEMA_VERSION,
        "kind": kind,
        "method": cfg.method,
        "config": cfg.to_dict(),
        "data": {
            "checkpoint": args.checkpoint,
            "target": args.target,
            "source_data": getattr(args, "source_data", None),
        },
        "curve": curve.to_dict(),
        "loss_trace": {
            "l_m": [r.l_m for r in reports],
            "l_e": [r.l_e for r in reports],
            "l_i": [r.l_i for r in reports],
            "total": [r.total for r in reports],
        },
        "versions": {
            "package": __version__,
            "results_schema": RESULTS_SCHEMA_VERSION,
            "checkpoint_format": CHECKPOINT_VERSION,
        },
        "wall_clock_seconds": time.perf_counter() - started,
    }


def cmd_adapt(args) -> int:
    cfg = _adapt_config(args)
    encoder, classifier, _, target, source_eval = _load_adapt_inputs(args)
    pair = clone_for_adaptation(encoder, classifier)
    started = time.perf_counter()
    pair, curve, reports = run_method(pair, target, cfg, source_eval=source_eval)
    record = _run_record("adapt", cfg, args, curve, reports, started)
    path = write_run_record(_out_dir(args), record)
    print(f"method {cfg.method}: final target accuracy {curve.final_accuracy:.4f} "
          f"over {len(curve.cumulative)} batches")
    if curve.source_before is not None:
        print(f"source accuracy: {curve.source_before:.4f} -> {curve.source_after:.4f}")
    print(f"wrote {path}")
    return 0


def cmd_ablate(args) -> int:
    base = _adapt_config(args)
    if base.method != "unidg":
        raise ConfigError("ablate sweeps the combined method; do not set method")
    encoder, classifier, _, target, source_eval = _load_adapt_inputs(args)
    trials = args.trials
    rows = []
    started = time.perf_counter()
    for name, switches in ABLATION_GRID:
        finals, drops = [], []
        for trial in range(trials):
            cfg = replace(base, seed=base.seed + trial, **switches)
            pair = clone_for_adaptation(encoder.copy(), classifier.copy())
            _, curve, _ = run_method(pair, target, cfg, source_eval=source_eval)
            finals.append(curve.final_accuracy)
            if curve.source_before is not None:
                drops.append(curve.source_before - curve.source_after)
        rows.append({
            "variant": name,
            "switches": switches,
            "mean_final_accuracy": float(np.mean(finals)),
            "final_accuracies": finals,
            "mean_source_drop": float(np.mean(drops)) if drops else None,
        })
    baseline = rows[0]["mean_final_accuracy"]
    print(f"{'variant':<12} {'accuracy':>9} {'gain':>8}")
    for row in rows:
        gain = row["mean_final_accuracy"] - baseline
        print(f"{row['variant']:<12} {row['mean_final_accuracy']:>9.4f} {gain:>+8.4f}")
    record = {
        "schema_version": RESULTS_SCHEMA_VERSION,
        "kind": "ablation",
        "config": base.to_dict(),
        "trials": trials,
        "data": {"checkpoint": args.checkpoint, "target": args.target,
                 "source_data": args.source_data},
        "rows": rows,
        "versions": {"package": __version__,
                     "results_schema": RESULTS_SCHEMA_VERSION,
                     "checkpoint_format": CHECKPOINT_VERSION},
        "wall_clock_seconds": time.perf_counter() - started,
    }
    path = write_run_record(_out_dir(args), record)
    print(f"wrote {path}")
    return 0


def cmd_diagnose(args) -> int:
    if args.seed is None:
        args.seed = 0
    rng = np.random.default_rng(args.seed)
    if args.checkpoint:
        encoder, _, _ = load_checkpoint(args.checkpoint)
    else:
        hidden = [int(h) for h in args.hidden_dims.split(",") if h]
        dims = [args.input_dim] + hidden + [args.feature_dim]
        encoder = MlpEncoder.create(dims, use_norm=args.use_norm, seed=args.seed)
    started = time.perf_counter()

    dim = encoder.input_dim
    state = NormLayerState.create(dim)
    state.gamma[...] = rng.uniform(0.5, 1.5, size=dim)
    state.beta[...] = rng.uniform(-0.5, 0.5, size=dim)
    batch = rng.standard_normal((args.batch_rows, dim))
    bn_error = verify_bn_gradient(batch, state, trials=args.trials, seed=args.seed)
    print(f"norm backward vs finite differences: max relative error {bn_error:.3e}")

    samples_a = rng.standard_normal((max(args.trials, 4), dim))
    samples_b = rng.standard_normal((max(args.trials, 4), dim))
    sweep = kernel_comparison_sweep(
        encoder, samples_a, samples_b, trials=args.trials, seed=args.seed + 1
    )
    for subset, st in sweep.stats.items():
        if st["count"]:
            print(f"kernel[{subset}]: cosine mean {st['cosine_mean']:+.4f} "
                  f"range [{st['cosine_min']:+.4f}, {st['cosine_max']:+.4f}] "
                  f"over {st['count']} pairs ({sweep.skipped[subset]} degenerate skipped)")
        else:
            print(f"kernel[{subset}]: all {sweep.trials} pairs degenerate")
    record = {
        "schema_version": RESULTS_SCHEMA_VERSION,
        "kind": "diagnostics",
        "seed": args.seed,
        "bn_max_relative_error": bn_error,
        "kernel_sweep": sweep.to_dict(),
        "versions": {"package": __version__,
                     "results_schema": RESULTS_SCHEMA_VERSION,
                     "checkpoint_format": CHECKPOINT_VERSION},
        "wall_clock_seconds": time.perf_counter() - started,
    }
    path = write_run_record(_out_dir(args), record)
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="marginadapt",
        description="Margin-constrained test-time adaptation at desk scale",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV_VAR} or ./marginadapt_out)")
        p.add_argument("--config", help="key=value config file; flags win")
        p.add_argument("--seed", type=int, default=None)

    g = sub.add_parser("gen-data", help="generate a synthetic shift task")
    add_common(g)
    g.add_argument("--num-classes", type=int, dest="num_classes")
    g.add_argument("--input-dim", type=int, dest="input_dim")
    g.add_argument("--class-separation", type=float, dest="class_separation")
    g.add_argument("--within-class-std", type=float, dest="within_class_std")
    g.add_argument("--shift-kind", dest="shift_kind",
                   choices=["rotation", "mean_translation", "affine"])
    g.add_argument("--angle-deg", type=float, dest="angle_deg")
    g.add_argument("--translation-std", type=float, dest="translation_std")
    g.add_argument("--samples-per-domain", type=int, dest="samples_per_domain")
    g.add_argument("--num-source-domains", type=int, dest="num_source_domains")
    g.add_argument("--source-angle-max-deg", type=float, dest="source_angle_max_deg")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-source", help="train the source model")
    add_common(t)
    t.add_argument("--data", required=True, help="directory with source_*.csv")
    t.add_argument("--checkpoint", help="checkpoint path (default <out>/checkpoint.json)")
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--weight-decay", type=float, dest="weight_decay", default=None)
    t.add_argument("--batch-size", type=int, dest="batch_size", default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--holdout-fraction", type=float, dest="holdout_fraction", default=None)
    t.add_argument("--hidden-dims", dest="hidden_dims", default=None,
                   help="comma-separated hidden sizes, e.g. 64,64")
    t.add_argument("--feature-dim", type=int, dest="feature_dim", default=None)
    t.add_argument("--use-norm", action="store_true", dest="use_norm")
    t.set_defaults(func=cmd_train_source)

    def add_adapt_flags(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--target", required=True, help="target-domain csv")
        p.add_argument("--source-data", dest="source_data",
                       help="source csv directory for preservation metrics")
        p.add_argument("--sigma", type=float, default=None)
        p.add_argument("--lambda-weight", "--lambda", type=float,
                       dest="lambda_weight", default=None)
        p.add_argument("--top-k", type=int, dest="top_k", default=None)
        p.add_argument("--capacity-per-class", type=int, dest="capacity_per_class",
                       default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--batch-size", type=int, dest="batch_size", default=None)
        p.add_argument("--steps", type=int, default=None)

    a = sub.add_parser("adapt", help="adapt to a target stream")
    add_common(a)
    add_adapt_flags(a)
    a.add_argument("--method", choices=["none", "entropy_norm", "pseudo_label", "unidg"],
                   default=None)
    for switch in ("lm", "le", "li", "bank", "refresh"):
        group = a.add_mutually_exclusive_group()
        group.add_argument(f"--{switch}", dest=f"enable_{switch}",
                           action="store_true", default=None)
        group.add_argument(f"--no-{switch}", dest=f"enable_{switch}",
                           action="store_false", default=None)
    a.set_defaults(func=cmd_adapt)

    b = sub.add_parser("ablate", help="component grid over the combined method")
    add_common(b)
    add_adapt_flags(b)
    b.add_argument("--trials", type=int, default=1, help="seeds per grid row")
    b.set_defaults(func=cmd_ablate)

    d = sub.add_parser("diagnose", help="gradient and kernel diagnostics")
    add_common(d)
    d.add_argument("--checkpoint", help="use this model; default fresh random")
    d.add_argument("--input-dim", type=int, dest="input_dim", default=16)
    d.add_argument("--hidden-dims", dest="hidden_dims", default="64,64")
    d.add_argument("--feature-dim", type=int, dest="feature_dim", default=32)
    d.add_argument("--use-norm", action="store_true", dest="use_norm")
    d.add_argument("--trials", type=int, default=10)
    d.add_argument("--batch-rows", type=int, dest="batch_rows", default=8)
    d.set_defaults(func=cmd_diagnose)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (MarginAdaptError, OSError) as e:
        _log(f"error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
