# ==============================================================================
# Command-line entry point: train | register | eval | bench | ablate | report |
# partition-export. Sets up logging, merges the run config (defaults, YAML
# file, flags) and maps failures to exit codes: 0 ok, 1 usage/config error,
# 2 runtime error.
# ==============================================================================

import sys
import logging
import argparse

from app import main
from app.config import CONFIG_FIELDS, get_static_config, load_run_config
from app.services.errors import ConfigError, RegionRegError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(threadName)s - %(module)s - %(message)s'


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors raise instead of exiting with status 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_config_flags(parser):
    group = parser.add_argument_group("run config (overrides the --config file)")
    group.add_argument("--config", help="YAML run config file (default: none)")
    group.add_argument("--log-level", help="logging level (default: REGIONREG_LOG_LEVEL or INFO)")
    for key, (kind, default, text) in CONFIG_FIELDS.items():
        flag = "--" + key.replace("_", "-")
        shown = (",".join(default) or "none") if kind is list else default
        if kind is bool:
            group.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction, default=None,
                               help=f"{text} (default: {shown})")
        else:
            group.add_argument(flag, dest=key, type=str if kind is list else kind, default=None,
                               help=f"{text} (default: {shown})")


def build_parser():
    parser = Parser(prog="run.py", description="Unsupervised region-aware point-cloud registration")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = commands.add_parser("train", help="train on synthetic pairs; writes model.ckpt and loss_trace.csv")
    _add_config_flags(p)

    p = commands.add_parser("register", help="print the 7-parameter transform (qw qx qy qz tx ty tz)")
    p.add_argument("--source", required=True, help="source cloud (.xyz or .ply)")
    p.add_argument("--target", required=True, help="target cloud (.xyz or .ply)")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--output", help="write the aligned source cloud here (default: none)")
    _add_config_flags(p)

    for name, text in (("eval", "evaluate on held-out pairs; writes report.csv"),
                       ("bench", "model and ICP rows per noise section; writes bench.csv")):
        p = commands.add_parser(name, help=text)
        p.add_argument("--checkpoint", help="trained checkpoint (default: none)")
        p.add_argument("--train", action="store_true", help="train in place instead of loading a checkpoint")
        if name == "eval":
            p.add_argument("--noise", action="append", choices=["clean", "di", "pd", "do"],
                           help="noise sections to evaluate, repeatable (default: all)")
        else:
            p.add_argument("--export-samples", type=int, default=0,
                           help="write source/target/aligned PLY files for the first K pairs (default: 0)")
        _add_config_flags(p)

    p = commands.add_parser("ablate", help="train and evaluate ModelA, ModelB and ModelC; writes ablation.csv")
    _add_config_flags(p)

    p = commands.add_parser("partition-export", help="PLY with a per-point region label")
    p.add_argument("--source", required=True, help="cloud to partition")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--output", required=True, help="output .ply path")
    _add_config_flags(p)

    p = commands.add_parser("report", help="print a saved report (.csv or .txt) as a table")
    p.add_argument("--input", required=True, help="report written by eval, bench or ablate")
    _add_config_flags(p)
    return parser


def dispatch(args, config):
    if args.command == "train":
        main.train(config)
    elif args.command == "register":
        main.register(config, args.source, args.target, args.checkpoint, args.output)
    elif args.command == "eval":
        main.evaluate(config, args.checkpoint, args.train, args.noise)
    elif args.command == "bench":
        main.bench(config, args.checkpoint, args.train, args.export_samples)
    elif args.command == "ablate":
        main.ablate(config)
    elif args.command == "report":
        main.show_report(args.input)
    else:
        main.partition_export(config, args.source, args.checkpoint, args.output)


def cli(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE

    static_config = get_static_config()
    level = (args.log_level or static_config['REGIONREG_LOG_LEVEL']).upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=LOG_FORMAT)

    try:
        overrides = {key: getattr(args, key) for key in CONFIG_FIELDS}
        config = load_run_config(args.config, overrides, static_config)
        logging.info(f"Starting '{args.command}' with seed {config['seed']} and {config['threads']} thread(s)")
        dispatch(args, config)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (RegionRegError, OSError) as e:
        logging.error(f"'{args.command}' failed: {e}", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(cli())
