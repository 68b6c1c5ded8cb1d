"""Command-line entry point: ``bgnn <command> [options]``.

Commands
  gen-data     write a synthetic Gaussian-blob dataset as CSV
  train        meta-train on a dataset; writes metrics.jsonl, checkpoint.json
               and config.txt (the effective configuration) to --out-dir
  eval         evaluate a checkpoint, or a reference predictor, on a dataset
  gradcheck    full-model gradient check against central differences
  export-plot  flatten a metrics log into a tidy CSV (iter, split, metric, value)

Training options may come from a ``key=value`` config file (``--config``);
command-line flags override file values. Without ``--seed`` the seed falls back
to the BGNN_SEED environment variable, then to 0.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .episode import load_dataset, make_synthetic_dataset, save_dataset
from .errors import BGNNError, ConfigError, ParseError
from .model import ModelParams
from .training import (
    TrainConfig,
    evaluate,
    meta_train,
    model_grad_check,
    prototype_predictor,
    random_predictor,
)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
CONFIG_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig))
_CHOICES = {"unlabeled": ("semi", "drop"), "augment": ("none", "rotate")}
_FIELD_TYPES = {f.name: type(f.default) for f in dataclasses.fields(TrainConfig)}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Raise instead of exiting so ``run`` controls the exit code."""

    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------


def _coerce(key, raw):
    kind = _FIELD_TYPES[key]
    if kind is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return kind(raw.strip())


def parse_config_text(text):
    """Parse ``key=value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        try:
            out[key] = _coerce(key, value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    return out


def load_config_file(path):
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def format_config(cfg):
    return "".join(f"{k}={getattr(cfg, k)}\n" for k in CONFIG_KEYS)


def _env_seed():
    raw = os.environ.get("BGNN_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"BGNN_SEED must be an integer, got {raw!r}") from None


def resolve_config(args, base=None):
    """File values, then flag overrides, then the seed fallback chain."""
    values = dict(base or {})
    if getattr(args, "config", None):
        values.update(load_config_file(args.config))
    for key in CONFIG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    if "seed" not in values:
        env = _env_seed()
        if env is not None:
            values["seed"] = env
    return TrainConfig(**values)


def _add_config_flags(p, skip=()):
    g = p.add_argument_group("training configuration (override --config values)")
    for f in dataclasses.fields(TrainConfig):
        if f.name in skip:
            continue
        flag = "--" + f.name.replace("_", "-")
        kind = _FIELD_TYPES[f.name]
        if kind is bool:
            g.add_argument(flag, dest=f.name, type=_bool_arg, default=None, metavar="BOOL",
                           help=f"default {f.default}")
        elif f.name in _CHOICES:
            g.add_argument(flag, dest=f.name, choices=_CHOICES[f.name], default=None, help=f"default {f.default}")
        else:
            g.add_argument(flag, dest=f.name, type=kind, default=None, help=f"default {f.default}")


def _bool_arg(raw):
    try:
        return _coerce("no_history", raw)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser():
    p = _Parser(prog="bgnn", description=__doc__.split("\n\n")[0],
                formatter_class=argparse.RawDescriptionHelpFormatter, epilog=__doc__.split("\n\n", 1)[1])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--classes", type=int, required=True)
    g.add_argument("--dim", type=int, required=True)
    g.add_argument("--spread", type=float, default=0.3)
    g.add_argument("--per-class", type=int, required=True)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="meta-train a model")
    t.add_argument("--data", required=True, help="training CSV")
    t.add_argument("--val-data", help="validation CSV (default: --data)")
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--out-dir", required=True)
    _add_config_flags(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", help="checkpoint.json written by train")
    e.add_argument("--predictor", choices=("model", "prototype", "random"), default="model")
    e.add_argument("--episodes", type=int, default=1000)
    e.add_argument("--config", help="key=value config file (overrides the checkpoint's)")
    e.add_argument("--out", help="write the report as JSON here")
    _add_config_flags(e)

    c = sub.add_parser("gradcheck", help="full-model gradient check")
    c.add_argument("--dim", type=int, default=8)
    c.add_argument("--layers", type=int, default=2)
    c.add_argument("--hidden-states", type=int, default=2)
    c.add_argument("--ways", type=int, default=2)
    c.add_argument("--shots", type=int, default=1)
    c.add_argument("--queries", type=int, default=2)
    c.add_argument("--seed", type=int, default=None)
    c.add_argument("--eps", type=float, default=None)
    c.add_argument("--tol", type=float, default=1e-4)

    x = sub.add_parser("export-plot", help="metrics.jsonl -> tidy CSV")
    x.add_argument("--metrics", required=True)
    x.add_argument("--out", required=True)
    return p


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _seed(args):
    if args.seed is not None:
        return args.seed
    env = _env_seed()
    return 0 if env is None else env


def cmd_gen_data(args, out):
    ds = make_synthetic_dataset(args.classes, args.dim, args.spread, args.per_class, dc.RngStream(_seed(args)))
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} items ({args.classes} classes, dim {args.dim}) to {args.out}", file=out)


def _write_records(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def cmd_train(args, out):
    cfg = resolve_config(args)
    ds = load_dataset(args.data)
    val = load_dataset(args.val_data) if args.val_data else ds
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(format_config(cfg), encoding="utf-8")
    params, records = meta_train(cfg, ds, val_ds=val)
    _write_records(records, out_dir / "metrics.jsonl")
    params.save(out_dir / "checkpoint.json", train_config=dataclasses.asdict(cfg))
    last = next((r for r in reversed(records) if r["split"] == "val"), None)
    msg = f"trained {cfg.iterations} iterations"
    if last:
        msg += f"; last val acc {last['acc']:.4f} +/- {last['ci']:.4f}"
    print(f"{msg}; outputs in {out_dir}", file=out)


def cmd_eval(args, out):
    base, params = {}, None
    if args.predictor == "model":
        if not args.checkpoint:
            raise UsageError("eval --predictor model requires --checkpoint")
        params, saved = ModelParams.load_with_config(args.checkpoint)
        base = {k: v for k, v in (saved or {}).items() if k in CONFIG_KEYS}
    cfg = resolve_config(args, base)
    ds = load_dataset(args.data)
    predictor = {"model": None, "prototype": prototype_predictor, "random": random_predictor}[args.predictor]
    rep = evaluate(params, ds, args.episodes, cfg, predictor=predictor)
    print(f"accuracy {rep.accuracy:.4f} +/- {rep.ci95:.4f} over {rep.episodes} episodes", file=out)
    if args.out:
        Path(args.out).write_text(json.dumps(rep.as_dict(), indent=2) + "\n", encoding="utf-8")


def cmd_gradcheck(args, out):
    cfg = TrainConfig(
        dim=args.dim, layers=args.layers, hidden_states=args.hidden_states, ways=args.ways,
        shots=args.shots, queries=args.queries, seed=_seed(args), batch_size=1, rho=0.5, dropout=0.0,
    )
    kw = {} if args.eps is None else {"eps": args.eps}
    rep = model_grad_check(cfg, tol=args.tol, **kw)
    print(rep, file=out)
    return EXIT_OK if rep.passed else EXIT_RUNTIME


METRIC_FIELDS = ("loss_E", "loss_B", "acc", "ci")


def export_plot(metrics_path, out_path):
    """Write one CSV row per (record, numeric metric); returns the row count."""
    rows = []
    with open(metrics_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                it, split = int(rec["iter"]), str(rec["split"])
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(f"malformed metrics record: {exc}", lineno) from None
            for name in METRIC_FIELDS:
                v = rec.get(name)
                if v is not None:
                    rows.append((it, split, name, repr(float(v))))
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("iter", "split", "metric", "value"))
        w.writerows(rows)
    return len(rows)


def cmd_export_plot(args, out):
    n = export_plot(args.metrics, args.out)
    print(f"wrote {n} rows to {args.out}", file=out)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "export-plot": cmd_export_plot,
}


def run(argv=None, out=None, err=None):
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verbose:
            logging.basicConfig(level=logging.INFO, stream=err, format="%(message)s")
        code = COMMANDS[args.command](args, out)
        return EXIT_OK if code is None else code
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (None, 0) else EXIT_USAGE
    except UsageError as exc:
        print(exc, file=err)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"{parser.prog}: config error: {exc}", file=err)
        return EXIT_USAGE
    except (BGNNError, OSError, np.linalg.LinAlgError) as exc:
        print(f"{parser.prog}: error: {exc}", file=err)
        return EXIT_RUNTIME


def main():
    sys.exit(run())
