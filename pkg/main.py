"""Command-line entrypoint for BiFusion gait recognition."""

from __future__ import annotations

import sys

from bifusion_gait.cli import run


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
