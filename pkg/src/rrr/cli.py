"""Command-line entry point: ``rrr run | compare | visualize``."""
from __future__ import annotations

import argparse
import logging
import sys

import yaml
from pydantic import ValidationError

from .errors import ConfigError, MasksUnavailableError

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("rrr")


def _format_validation(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<config>"
        lines.append(f"  {loc}: {e['msg']}")
    return "\n".join(lines)


def cmd_run(args) -> int:
    from .config import load_config
    from .experiment import TaskFailure, run_experiment

    try:
        cfg = load_config(args.config)
    except ValidationError as err:
        print(f"config error in {args.config}:\n{_format_validation(err)}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, yaml.YAMLError, OSError) as err:
        print(f"config error in {args.config}: {err}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = run_experiment(cfg, out_dir=args.output_dir)
    except MasksUnavailableError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except TaskFailure as err:
        print(f"run failed at task {err.task}: {err.__cause__!r}", file=sys.stderr)
        return EXIT_RUNTIME
    s = result.summary
    print(f"{result.out_dir}: ACC={s['ACC']:.4f} BWT={s['BWT']:+.4f}"
          + (f" PG-ACC={s['PG-ACC']:.4f} PG-BWT={s['PG-BWT']:+.4f}" if "PG-ACC" in s else ""))
    return EXIT_OK


def cmd_compare(args) -> int:
    from .experiment import compare

    try:
        path = compare(args.dirs, args.out)
    except (ValueError, FileNotFoundError) as err:
        print(f"compare failed: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    print(path.read_text(), end="")
    return EXIT_OK


def _parse_sample(text: str) -> tuple[int, int]:
    try:
        t, i = text.split(":")
        return int(t), int(i)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected TASK:INDEX, got {text!r}") from None


def _parse_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated task numbers, got {text!r}") from None


def cmd_visualize(args) -> int:
    from .experiment import visualize

    try:
        png, records = visualize(args.run_dir, args.sample, args.checkpoints)
    except (FileNotFoundError, IndexError, ValueError) as err:
        print(f"visualize failed: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    for r in records:
        print(f"task {r['checkpoint']}: predicted {r['prediction']} (label {r['label']}) -> {r['annotation']}")
    print(png)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rrr", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train and evaluate one task sequence")
    r.add_argument("config")
    r.add_argument("--output-dir", default=None, help="override the config's output_dir")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="compare mean-accuracy curves of runs")
    c.add_argument("dirs", nargs="+", help="run directories, or directories of seed runs")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_compare)

    v = sub.add_parser("visualize", help="saliency progression of one test sample")
    v.add_argument("run_dir")
    v.add_argument("--sample", type=_parse_sample, required=True, help="TASK:INDEX into that task's test set")
    v.add_argument("--checkpoints", type=_parse_list, required=True, help="e.g. 1,3,5")
    v.set_defaults(func=cmd_visualize)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
