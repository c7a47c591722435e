#!/usr/bin/env python3
"""
ReelNet - forget-free multi-video neural representation
Entry point for the command line.
"""

import argparse
import logging
import os
import sys
from typing import List, Optional

from reelnet.config import ENV_PREFIX, LOG_FORMAT

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    from reelnet.commands import register_all

    parser = argparse.ArgumentParser(description='ReelNet - encode videos into one network, session by session')
    parser.add_argument('--debug', '-d', action='store_true', help='Enable debug logging')
    subparsers = parser.add_subparsers(dest='command', metavar='COMMAND')
    subparsers.required = True
    register_all(subparsers)
    return parser


def debug_requested(args: argparse.Namespace) -> bool:
    """Command line flag first, then REELNET_DEBUG."""
    if args.debug:
        return True
    env_debug = os.environ.get(ENV_PREFIX + 'DEBUG')
    if env_debug is None:
        return False
    if env_debug.lower() in ('1', 'true', 'yes', 'on'):
        return True
    if env_debug.lower() not in ('0', 'false', 'no', 'off', ''):
        logger.warning("Invalid %sDEBUG environment variable '%s', ignoring", ENV_PREFIX, env_debug)
    return False


def format_error(error: Exception, default_code: str = 'io_error') -> str:
    code = getattr(error, 'code', default_code)
    message = str(error).replace('\\', '\\\\').replace('"', '\\"').replace('\n', ' ')
    return f'error code={code} message="{message}"'


def main(argv: Optional[List[str]] = None) -> int:
    from reelnet.errors import ReelNetError

    parser = build_parser()
    args = parser.parse_args(argv)

    # Configure logging
    args.debug = debug_requested(args)
    logging.basicConfig(level=logging.DEBUG if args.debug else logging.INFO, format=LOG_FORMAT)

    try:
        return args.handler(args)
    except ReelNetError as e:
        logger.debug("Command %s failed", args.command, exc_info=True)
        print(format_error(e), file=sys.stderr)
        return 1
    except OSError as e:
        print(format_error(e), file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
