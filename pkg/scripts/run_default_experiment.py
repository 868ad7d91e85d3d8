#!/usr/bin/env python3
"""Run the default five-seed streaming experiment and print the arm table.

Writes report.tsv under $EMBHIST_OUT (default ./runs).
"""

import os
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from embhist.pipeline import ExperimentConfig, run_streaming_experiment


def main():
    cfg = ExperimentConfig(seeds=(0, 1, 2, 3, 4))
    start = time.monotonic()
    report = run_streaming_experiment(cfg)
    elapsed = time.monotonic() - start

    print(f"config {report.config_hash}  ({elapsed:.0f}s)")
    print(f"{'arm':<14}{'mean auc':>10}{'mean ne':>10}")
    for arm in cfg.arms:
        import numpy as np

        ne = float(np.mean([report.results[s].arm_results[arm].ne
                            for s in report.seeds]))
        print(f"{arm:<14}{report.mean_auc(arm):>10.4f}{ne:>10.4f}")
    for seed in report.seeds:
        res = report.results[seed]
        line = "  ".join(f"{arm}={res.arm_results[arm].auc:.4f}" for arm in cfg.arms)
        print(f"seed {seed}: {line}  teacher={res.fm_result.auc:.4f}")

    out_dir = Path(os.environ.get("EMBHIST_OUT", "runs")) / f"run-{report.config_hash}"
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.tsv").write_text(report.to_text())
    print(f"report -> {out_dir / 'report.tsv'}")


if __name__ == "__main__":
    main()
