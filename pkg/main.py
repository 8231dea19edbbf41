"""
Main entry point for the alignment lab
"""

import argparse
import sys


def build_parser():
    from src.cli import COMMANDS

    parser = argparse.ArgumentParser(
        prog="alignment-lab",
        description="Simulated lens active alignment with domain-adaptive misalignment regression",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="experiment JSON file")
    parser.add_argument("--seed", type=int, default=None, help="overrides global_seed")
    parser.add_argument("--out", default=None, help="overrides output_dir")
    parser.add_argument("--preset", default=None, help="restrict train/eval/report to one pipeline preset")
    parser.add_argument("--determinism", choices=("strict", "fast"), default=None)
    return parser


def launch_app(argv=None):
    """Parse arguments, resolve the config and run the command; returns the exit status"""
    from src.cli import dispatch
    from src.core.config_manager import ConfigManager
    from src.core.errors import LabError

    args = build_parser().parse_args(argv)
    overrides = {"global_seed": args.seed, "output_dir": args.out, "determinism": args.determinism}
    try:
        config = ConfigManager(args.config).load(overrides=overrides)
    except LabError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return dispatch(args.command, config, preset=args.preset)


if __name__ == "__main__":
    sys.exit(launch_app())
