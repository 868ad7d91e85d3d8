#!/usr/bin/env python3
"""Run the full theory verification battery and exit nonzero on failure."""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from embhist.pipeline import render_theory_summary, run_theory_suite


def main():
    result = run_theory_suite(n_worlds=20, seed=0)
    print(render_theory_summary(result), end="")
    return 0 if result.all_passed else 3


if __name__ == "__main__":
    sys.exit(main())
