#!/usr/bin/env python3
"""Run every ablation axis on a mid-sized world and dump one TSV per axis.

Axes: layer, seqlen, dim, checkpoint, codec, deltasweep. Runtime is a few
minutes per axis; pass axis names to run a subset.
"""

import os
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from embhist.models import FMConfig
from embhist.pipeline import ABLATION_AXES, ExperimentConfig, run_ablation, write_tsv
from embhist.synthworld import WorldSpec


def main(axes):
    world = WorldSpec(n_users=128, events_per_user=64)
    cfg = ExperimentConfig(world=world, fm=FMConfig(epochs=3),
                           arms=("kd", "kd_emb_hist"), seeds=(0, 1))
    out_dir = Path(os.environ.get("EMBHIST_OUT", "runs")) / "ablations"
    out_dir.mkdir(parents=True, exist_ok=True)
    for axis in axes:
        start = time.monotonic()
        rows = run_ablation(cfg, axis)
        write_tsv(out_dir / f"{axis}.tsv", rows)
        print(f"{axis}: {len(rows)} rows in {time.monotonic()-start:.0f}s "
              f"-> {out_dir / f'{axis}.tsv'}")
        for row in rows:
            print("   " + "  ".join(f"{k}={v}" for k, v in row.items()
                                    if k != "axis"))


if __name__ == "__main__":
    main(sys.argv[1:] or ABLATION_AXES)
