# app/main.py
"""
Command-line entry point: ``python -m app.main <subcommand> ...``
"""
import argparse
import logging
import sys
from typing import List, Optional

from app.controller import ExperimentController

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Reports usage problems through an exception instead of exiting with status 2."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="triqdef", description="Multi-bit patch-defense lab.")
    parser.add_argument("--seed", type=int, default=None, help="override [run] seed")
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    parser.add_argument("--no-progress", action="store_true", help="disable progress bars")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("config")
    p.add_argument("--out")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--stop-after-epoch", type=int, default=None)

    p = sub.add_parser("craft-pool", help="craft a seen/unseen evaluation pool")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.add_argument("--ckpt", help="model to craft on (default: [attack] surrogate_checkpoint)")

    p = sub.add_parser("eval-clean", help="clean accuracy per bit-width")
    p.add_argument("ckpt")
    p.add_argument("--bits", help="comma-separated bit-widths")
    p.add_argument("--out")

    p = sub.add_parser("transfer", help="patch transfer matrix")
    p.add_argument("ckpt")
    p.add_argument("--pool", required=True)
    p.add_argument("--bits")
    p.add_argument("--untargeted", action="store_true")
    p.add_argument("--out")

    p = sub.add_parser("align", help="cross-bit feature and gradient alignment")
    p.add_argument("ckpt")
    p.add_argument("--patch", help="TQPATCH1 file applied to the inputs")
    p.add_argument("--bits")
    p.add_argument("--out")

    for name, text in (("ablate", "full / w/o FDP / w/o GPDP runs"), ("sweep", "loss-weight grid")):
        p = sub.add_parser(name, help=text)
        p.add_argument("config")
        p.add_argument("--out")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return 1

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT, stream=sys.stderr)
    log = logging.getLogger("triqdef")
    controller = ExperimentController(
        seed=args.seed,
        progress=False if args.no_progress else None,
        status_callback=log.info,
    )
    return controller.dispatch(args.command, args)


if __name__ == "__main__":
    sys.exit(main())
