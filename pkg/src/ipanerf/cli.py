"""Command-line entry point: ``ipanerf {train-clean,attack,evaluate,render,ablate}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import (ConfigError, DatasetFormatError, IncompleteRunError, IPANeRFError, StageError,
                     TrainingDivergenceError)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_INPUTS = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    # the verb-level copies default to SUPPRESS so they never clobber flags given before the verb
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=d(None),
                        help="config JSON file or profile name (desk, paper); default: desk")
    parser.add_argument("--set", dest="verb_overrides" if suppress else "overrides", action="append",
                        default=d([]), metavar="KEY=VALUE",
                        help="override a dotted config key, e.g. schedule.epsilon=16 (repeatable)")
    parser.add_argument("--run-dir", default=d(None), help="run directory (overrides run_dir in the config)")
    parser.add_argument("--seed", type=int, default=d(None), help="global seed (overrides seed in the config)")
    parser.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)

    parser = _Parser(prog="ipanerf", description=__doc__)
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train-clean", parents=[common], help="train the unpoisoned baseline")
    p = sub.add_parser("attack", parents=[common], help="run the illusory poisoning attack")
    p.add_argument("--clean-checkpoint", help="clean model (default: RUN_DIR/clean/model.ckpt)")
    sub.add_parser("evaluate", parents=[common], help="score a finished attack run")
    p = sub.add_parser("render", parents=[common], help="render one view to PNG")
    p.add_argument("--checkpoint", help="model checkpoint (default: RUN_DIR/checkpoints/victim.ckpt)")
    p.add_argument("--pose", required=True, help="train:I | test:I | val:I | sph:RADIUS,THETA_DEG,PHI_DEG")
    p.add_argument("--output", required=True, help="output PNG path")
    p = sub.add_parser("ablate", parents=[common], help="sweep epsilon or constraint angles")
    p.add_argument("--sweep", required=True, help="sweep JSON file or builtin name (epsilon, single_angles, combined_angles)")
    return parser


def _run(args) -> int:
    from . import runner
    from .config import load_config

    if args.command == "evaluate":
        run_dir = Path(args.run_dir) if args.run_dir else Path(load_config(args.config, args.overrides, args.seed)["run_dir"])
        print(runner.cmd_evaluate(run_dir).to_table(), end="")
        return EXIT_OK
    if args.command == "render" and args.run_dir and not args.config and (Path(args.run_dir) / "config.json").is_file():
        doc = runner.load_run_experiment(args.run_dir).doc
        from .config import apply_overrides, validate
        doc = validate(apply_overrides(doc, args.overrides), check_paths=False)
    else:
        doc = load_config(args.config, args.overrides, args.seed, args.run_dir)
    if args.command == "train-clean":
        print(runner.cmd_train_clean(doc))
    elif args.command == "attack":
        print(runner.cmd_attack(doc, args.clean_checkpoint))
    elif args.command == "render":
        ckpt = args.checkpoint or Path(doc["run_dir"]) / runner.VICTIM_CKPT
        print(runner.cmd_render(ckpt, args.pose, args.output, doc))
    elif args.command == "ablate":
        print(runner.cmd_ablate(doc, args.sweep), end="")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.overrides = args.overrides + getattr(args, "verb_overrides", [])
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except ConfigError as e:
        print(f"ipanerf: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (IncompleteRunError, DatasetFormatError) as e:
        print(f"ipanerf: missing inputs: {e}", file=sys.stderr)
        return EXIT_INPUTS
    except (TrainingDivergenceError, StageError, IPANeRFError, RuntimeError) as e:
        print(f"ipanerf: runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
