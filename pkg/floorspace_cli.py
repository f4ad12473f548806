#!/usr/bin/env python3
"""
Floorspace CLI - run one pipeline stage.

    python floorspace_cli.py [--config FILE] [--set key=value ...] <command> [options]

Commands: composite, rasterize, tile, train, predict, eval, aggregate, ntl,
render, gradcheck. Use --help on any command for its options.
"""

import sys

from floorspace.cli import main


if __name__ == "__main__":
    sys.exit(main())
