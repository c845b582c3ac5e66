"""Command-line front door: train, eval, bench, export-images.

Config files are line-oriented `key = value` with `#` comments; unknown
keys are fatal so hyperparameter typos cannot pass silently. Data sources
use a compact spec grammar:

    synthetic:<blobs|moons|circles>:n=<N>,k=<K>,noise=<F>
    idx:<images>,<labels>[;test=<images>,<labels>]

Exit codes: 0 success, 1 runtime abort (non-finite loss), 2 usage/config
errors.
"""

import os
import sys

if "numpy" not in sys.modules:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, "1")

import argparse
import dataclasses
import json
import math

import numpy as np

from .bench import run_bench
from .data import (CoresetFileError, gen_synthetic, load_coreset, load_idx,
                   normalize, normalize_with, save_coreset)
from .trainer import TrainAbort, TrainConfig, evaluate_coreset, train

EXIT_OK = 0
EXIT_ABORT = 1
EXIT_USAGE = 2


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

_BOOL_KEYS = ("noise_aug", "learn_labels")
_INT_KEYS = ("steps", "batch_size", "ipc", "pool_size", "pool_period",
             "seed_data", "seed_pool", "seed_noise", "seed_init",
             "log_interval")
_FLOAT_KEYS = ("rho", "gamma", "beta_s", "beta_d", "coreset_lr", "pool_lr",
               "noise_sigma")
_STR_KEYS = ("init",)
_ALL_KEYS = _BOOL_KEYS + _INT_KEYS + _FLOAT_KEYS + _STR_KEYS + ("hidden",)


def _parse_value(key, raw):
    try:
        if key in _BOOL_KEYS:
            if raw not in ("true", "false"):
                raise ValueError("expected true/false")
            return raw == "true"
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
        if key == "hidden":
            return tuple(int(w) for w in raw.split(",") if w)
        return raw
    except ValueError as err:
        raise ConfigError(f"bad value for {key!r}: {raw!r} ({err})") from err


def parse_config(path):
    """Read a config file into a TrainConfig; missing keys take defaults."""
    overrides = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    for lineno, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in text.split("=", 1))
        if key not in _ALL_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}; valid "
                              f"keys: {', '.join(sorted(_ALL_KEYS))}")
        field = "init_mode" if key == "init" else key
        overrides[field] = _parse_value(key, raw)
    try:
        return TrainConfig(**overrides)
    except ValueError as err:
        raise ConfigError(str(err)) from err


def write_config(config, path):
    """Write every field explicitly, in the parseable key = value format."""
    with open(path, "w") as fh:
        for field in dataclasses.fields(config):
            value = getattr(config, field.name)
            key = "init" if field.name == "init_mode" else field.name
            if key == "hidden":
                value = ",".join(str(w) for w in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            fh.write(f"{key} = {value}\n")


# ---------------------------------------------------------------------------
# data specs
# ---------------------------------------------------------------------------

def load_data(spec, seed):
    """Returns (train, test) datasets, both normalized with train stats."""
    if spec.startswith("synthetic:"):
        try:
            _, kind, params = spec.split(":", 2)
            fields = dict(item.split("=", 1) for item in params.split(","))
            n = int(fields.pop("n"))
            k = int(fields.pop("k"))
            noise = float(fields.pop("noise"))
        except (ValueError, KeyError) as err:
            raise ConfigError(f"bad synthetic spec {spec!r}: {err}") from err
        if fields:
            raise ConfigError(f"unknown synthetic fields {sorted(fields)}")
        train_ds = gen_synthetic(kind, n, k, noise,
                                 seed=np.random.SeedSequence([seed, 0]))
        test_ds = gen_synthetic(kind, n, k, noise,
                                seed=np.random.SeedSequence([seed, 1]))
    elif spec.startswith("idx:"):
        body = spec[4:]
        test_part = None
        if ";test=" in body:
            body, test_part = body.split(";test=", 1)
        try:
            images, labels = body.split(",")
        except ValueError as err:
            raise ConfigError(f"bad idx spec {spec!r}") from err
        train_ds = load_idx(images, labels)
        test_ds = None
        if test_part is not None:
            try:
                test_images, test_labels = test_part.split(",")
            except ValueError as err:
                raise ConfigError(f"bad idx test spec {spec!r}") from err
            test_ds = load_idx(test_images, test_labels)
    else:
        raise ConfigError(f"unknown data spec {spec!r} (synthetic:... or idx:...)")

    train_ds = normalize(train_ds)
    if test_ds is not None:
        test_ds = normalize_with(test_ds, train_ds.mean, train_ds.std)
    return train_ds, test_ds


def _apply_seed_override(config, seed):
    if seed is None:
        return config
    return dataclasses.replace(config, seed_data=seed, seed_pool=seed + 1,
                               seed_noise=seed + 2, seed_init=seed + 3)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args):
    config = parse_config(args.config)
    config = _apply_seed_override(config, args.seed)
    train_ds, _ = load_data(args.data, config.seed_data)
    config = config.resolve_beta_s(train_ds.k)

    os.makedirs(args.out, exist_ok=True)
    write_config(config, os.path.join(args.out, "resolved-config.txt"))
    metrics_path = os.path.join(args.out, "metrics.jsonl")
    with open(metrics_path, "w") as metrics_file:
        def sink(record):
            metrics_file.write(json.dumps(record) + "\n")
            metrics_file.flush()

        try:
            coreset = train(config, train_ds, sink=sink)
        except TrainAbort as err:
            print(f"train aborted: {err}", file=sys.stderr)
            return EXIT_ABORT
    save_coreset(coreset, os.path.join(args.out, "coreset.vbpc"))
    return EXIT_OK


def cmd_eval(args):
    coreset = load_coreset(args.coreset)
    _, test_ds = load_data(args.data, args.seed)
    if test_ds is None:
        raise ConfigError("eval needs a test split (synthetic specs provide "
                          "one; idx specs need ;test=...)")
    if test_ds.d != coreset.images.shape[1]:
        raise ConfigError(f"dimension mismatch: coreset d={coreset.images.shape[1]}, "
                          f"data d={test_ds.d}")
    widths = (test_ds.d, *args.hidden)
    result = evaluate_coreset(coreset, test_ds.X, test_ds.labels, widths,
                              tprime=args.tprime, seed=args.seed)
    blob = json.dumps(result)
    print(blob)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "eval.json"), "w") as fh:
        fh.write(blob + "\n")
    return EXIT_OK


def cmd_bench(args):
    try:
        result = run_bench(h=args.h, nhat=args.nhat, mode=args.mode,
                           reps=args.reps)
    except ValueError as err:
        raise ConfigError(str(err)) from err
    blob = json.dumps({key: result[key] for key in
                       ("mode", "h", "nhat", "peak_f64", "ms_per_100")})
    print(blob)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "bench.json"), "w") as fh:
        fh.write(blob + "\n")
    return EXIT_OK


def _denormalize(values, mean, std):
    return values * std + mean if mean is not None else values


def cmd_export_images(args):
    coreset = load_coreset(args.coreset)
    nhat, d = coreset.images.shape
    mean = std = None
    if args.data:
        train_ds, _ = load_data(args.data, args.seed)
        if train_ds.d != d:
            raise ConfigError(f"dimension mismatch: coreset d={d}, data "
                              f"d={train_ds.d}")
        mean, std = train_ds.mean, train_ds.std
    os.makedirs(args.out, exist_ok=True)
    classes = coreset.labels.argmax(axis=1)

    if d == 2:
        points = _denormalize(coreset.images, mean, std)
        path = os.path.join(args.out, "coreset.csv")
        with open(path, "w") as fh:
            fh.write("x,y,label\n")
            for (x, y), cls in zip(points, classes):
                fh.write(f"{float(x)!r},{float(y)!r},{cls}\n")
        return EXIT_OK

    side = math.isqrt(d)
    if side * side != d:
        raise ConfigError(f"cannot export d={d}: not a square image or 2-d points")
    pixels = np.clip(_denormalize(coreset.images, mean, std), 0.0, 1.0)
    counters = {}
    for row, cls in zip(pixels, classes):
        idx = counters.get(cls, 0)
        counters[cls] = idx + 1
        payload = np.round(255.0 * row).astype(np.uint8).tobytes()
        name = f"coreset_{cls}_{idx}.pgm"
        with open(os.path.join(args.out, name), "wb") as fh:
            fh.write(f"P5\n{side} {side}\n255\n".encode("ascii") + payload)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument surface
# ---------------------------------------------------------------------------

def _hidden_widths(raw):
    return tuple(int(w) for w in raw.split(",") if w)


def build_parser():
    parser = argparse.ArgumentParser(prog="vbpc")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="learn a pseudo-coreset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(run=cmd_train)

    p = sub.add_parser("eval", help="variational inference + model averaging")
    p.add_argument("--coreset", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tprime", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hidden", type=_hidden_widths, default=(64, 64))
    p.add_argument("--out", default=".")
    p.set_defaults(run=cmd_eval)

    p = sub.add_parser("bench", help="naive vs efficient loss evaluation")
    p.add_argument("--h", type=int, required=True)
    p.add_argument("--nhat", type=int, required=True)
    p.add_argument("--mode", choices=("naive", "efficient"), required=True)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--out", default=".")
    p.set_defaults(run=cmd_bench)

    p = sub.add_parser("export-images", help="write coreset rows as PGM/CSV")
    p.add_argument("--coreset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(run=cmd_export_images)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return EXIT_USAGE if err.code else EXIT_OK
    try:
        return args.run(args)
    except (ConfigError, CoresetFileError, OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
