#!/usr/bin/env python3
"""
Entry point for the mound counter.
"""

import argparse
import sys

from .cli import EXIT_VALIDATION, MoundCounterCLI
from .config import configure_logging
from .errors import ValidationError


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    # Parse just the global options first
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument('--config-file', help='Specify an alternative configuration file')
    global_args, remaining_argv = parser.parse_known_args(argv)

    try:
        configure_logging()
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        sys.exit(EXIT_VALIDATION)

    app = MoundCounterCLI(config_path=global_args.config_file)
    sys.exit(app.run(remaining_argv))


if __name__ == "__main__":
    main()
