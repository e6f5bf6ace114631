"""Console-script shim.

Pins BLAS pools to the requested ``--threads`` before numpy loads, so the
``--threads 1`` path is serial end to end.
"""

from __future__ import annotations

import os
import sys


def _pin_blas_threads(argv: list[str]) -> None:
    if "--threads" in argv:
        index = argv.index("--threads")
        if index + 1 < len(argv):
            value = argv[index + 1]
            for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
                os.environ.setdefault(var, value)


def main() -> None:
    _pin_blas_threads(sys.argv[1:])
    from .cli import main as cli_main

    cli_main()


if __name__ == "__main__":
    main()
