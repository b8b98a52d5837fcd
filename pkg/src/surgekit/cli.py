"""``surgekit`` command line: ingest, train, evaluate, compare, cache.

Exit codes: 0 success (possibly with warnings), 2 usage or configuration
error, 3 data error, 4 runtime failure or fatal divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

from . import experiment as ex
from .errors import ConfigError, DataError, DimensionError, SurgekitError, TrainingDiverged, TransportError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4

# CLI flag -> config key, for flags whose names differ
_RENAMES = {"batch": "batch_size", "lr": "learning_rate"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="flat JSON config file (schema_version 1)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--quiet", action="store_true", help="suppress progress output")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="surgekit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("ingest", parents=[common], help="write a validated dataset directory")
    p.add_argument("--source", choices=["synthetic", "files", "noaa"])
    p.add_argument("--n-windows", type=int)
    p.add_argument("--years", type=float, help="synthetic span in years (overrides --n-windows)")
    p.add_argument("--steps", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--start", help="synthetic start time, ISO-8601 UTC")
    p.add_argument("--grid", help="atmospheric grid container")
    p.add_argument("--gauge", help="observed level CSV")
    p.add_argument("--harmonic", help="harmonic tide CSV")
    p.add_argument("--station")
    p.add_argument("--begin", help="NOAA range start, ISO-8601 UTC")
    p.add_argument("--end", help="NOAA range end, ISO-8601 UTC")
    p.add_argument("--cache-dir")

    p = sub.add_parser("train", parents=[common], help="repeated-holdout training for one architecture")
    p.add_argument("--data", help="dataset directory from `ingest`")
    p.add_argument("--arch", help="cnn-lstm, lstm or 3d-cnn")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--repeats", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--train-end")
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.add_argument("--dropout", type=float)
    p.add_argument("--lstm-units", type=int)

    p = sub.add_parser("evaluate", parents=[common], help="metrics and plots for a checkpoint or predictions file")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--predictions", help="CSV with timestamp, measured_m, predicted_m")
    p.add_argument("--data", help="dataset directory (with --checkpoint)")
    p.add_argument("--partition", default="test", choices=["train", "val", "test"])
    p.add_argument("--start", help="case-study window start, ISO-8601 UTC")
    p.add_argument("--end", help="case-study window end, ISO-8601 UTC")

    p = sub.add_parser("compare", parents=[common], help="Table-1 style comparison of run directories")
    p.add_argument("runs", nargs="*")
    p.add_argument("--start")
    p.add_argument("--end")

    p = sub.add_parser("cache", parents=[common], help="list, clear or verify the response cache")
    p.add_argument("op", choices=["list", "clear", "verify"])
    p.add_argument("--cache-dir")
    return parser


def _resolve(args, keys) -> ex.ExperimentConfig:
    """Defaults < config file < explicit flags."""
    base = ex.ExperimentConfig.load(args.config).to_dict() if args.config else ex.ExperimentConfig().to_dict()
    explicit = set()
    for name in keys:
        value = getattr(args, name, None)
        if value is not None:
            base[_RENAMES.get(name, name)] = value
            explicit.add(_RENAMES.get(name, name))
    cfg = ex.ExperimentConfig.from_dict(base)
    cfg._explicit = explicit | (set(json.loads(Path(args.config).read_text())) if args.config else set())
    return cfg


def _cmd_ingest(args, log) -> int:
    cfg = _resolve(args, ["seed", "out", "source", "n_windows", "years", "steps", "stride", "start", "grid",
                          "gauge", "harmonic", "station", "begin", "end"])
    if not cfg.out:
        raise ConfigError("ingest needs --out")
    client = None
    if cfg.source == "noaa":
        from .noaa import NoaaClient

        client = NoaaClient(cache_dir=args.cache_dir)
    summary = ex.ingest(cfg, cfg.out, client=client)
    print(ex.format_coverage(summary))
    return EXIT_OK


def _cmd_train(args, log) -> int:
    cfg = _resolve(args, ["seed", "out", "data", "arch", "epochs", "batch", "lr", "repeats", "steps", "stride",
                          "train_end", "dtype", "dropout", "lstm_units"])
    if not cfg.out:
        raise ConfigError("train needs --out")
    if cfg.data:
        meta_path = Path(cfg.data) / ex.META_FILE
        if meta_path.exists():
            meta = json.loads(meta_path.read_text())
            for key in ("steps", "stride"):
                if key not in cfg._explicit and key in meta:
                    setattr(cfg, key, int(meta[key]))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        report = ex.train_run(cfg, cfg.out, log=log)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    print(ex.format_table([report]), end="")
    return EXIT_OK


def _cmd_evaluate(args, log) -> int:
    if args.predictions:
        result = ex.evaluate_predictions(args.predictions, args.start, args.end, args.out)
    else:
        if not args.data:
            raise ConfigError("evaluate --checkpoint needs --data")
        result = ex.evaluate_checkpoint(args.checkpoint, args.data, args.partition, args.start, args.end, args.out)
    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_compare(args, log) -> int:
    print(ex.compare_runs(args.runs, args.out, args.start, args.end), end="")
    return EXIT_OK


def _cmd_cache(args, log) -> int:
    from .noaa import cache_management, default_cache_dir

    directory = args.cache_dir or default_cache_dir()
    result = cache_management(directory, args.op)
    if args.op == "list":
        for e in result:
            q = e["query"]
            print(f"{e['fingerprint'][:16]}  {q['station']} {q['product']} {q['begin']}..{q['end']}  {e['fetched_at']}")
        print(f"{len(result)} entries in {directory}")
    elif args.op == "clear":
        print(f"removed {result} entries from {directory}")
    else:
        bad = [r for r in result if not r["ok"]]
        for r in bad:
            print(f"INVALID {r['fingerprint']}: {r['reason']}")
        print(f"{len(result) - len(bad)}/{len(result)} entries valid")
        return EXIT_OK if not bad else EXIT_DATA
    return EXIT_OK


COMMANDS = {"ingest": _cmd_ingest, "train": _cmd_train, "evaluate": _cmd_evaluate,
            "compare": _cmd_compare, "cache": _cmd_cache}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        log = None if args.quiet else (lambda msg: print(msg, file=sys.stderr))
        return COMMANDS[args.command](args, log)
    except (ConfigError, DimensionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, TransportError, SurgekitError, OSError) as exc:
        print(f"fatal: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
