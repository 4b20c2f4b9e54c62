"""Dispatch ``python -m hpcrun {img,run} ...`` to the two CLI programs."""

import sys

from .cli import img_main, run_main


def main() -> int:
    if len(sys.argv) < 2 or sys.argv[1] not in ("img", "run"):
        print("usage: python -m hpcrun {img,run} ...", file=sys.stderr)
        return 2
    if sys.argv[1] == "img":
        return img_main(sys.argv[2:])
    return run_main(sys.argv[2:])


if __name__ == "__main__":
    sys.exit(main())
