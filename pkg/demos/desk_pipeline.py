"""The full desk experiment, end to end, with a routing comparison at the end.

Trains the HR expert and shared layers, distils the MR and LR experts, derives
the gate labels, trains the gate, then sweeps every routing policy over the
degradation grid. Takes about five minutes on a laptop CPU.

    python3 demos/desk_pipeline.py [out_dir] [seed]
"""
from __future__ import annotations

import sys
import tempfile
import time
from pathlib import Path

from adaptive_iris.evaluation import EvalReport
from adaptive_iris.experiment import ExperimentConfig, run_pipeline
from adaptive_iris.training import GateLabelMap

POLICIES = ("hr-only", "random", "diameter-only", "gate-net", "oracle-label")
CONDITIONS = ("s0_d160", "s0_d80", "s0_d40", "s3_d160", "s5_d20", "combined")


def main(out_dir: Path, seed: int) -> None:
    cfg = ExperimentConfig.from_preset("desk", seed)
    t = time.perf_counter()
    run_pipeline(cfg, out_dir)
    print(f"pipeline finished in {time.perf_counter() - t:.0f}s -> {out_dir}\n")

    labels = GateLabelMap.load(out_dir / "labels" / "gate_labels.json")
    print("best expert per cell (rows: sigma bins from 0 up, columns: diameter bins from 20 up)")
    for i, row in enumerate(labels.labels):
        lo, hi = labels.sigma_edges[i], labels.sigma_edges[i + 1]
        print(f"  sigma {lo:.0f}-{hi:.0f}: " + " ".join(f"{['HR', 'MR', 'LR'][k]:>3s}" for k in row))

    (path,) = (out_dir / "reports").glob("sweep_*.tsv")
    report = EvalReport.from_tsv(path)
    print("\nEER by condition and routing policy")
    print(f"{'condition':>10s} " + " ".join(f"{p:>13s}" for p in POLICIES))
    for c in CONDITIONS:
        print(f"{c:>10s} " + " ".join(f"{report.eer(c, p):13.4f}" for p in POLICIES))
    print(f"\nplots and tables: {out_dir / 'plots'}")


if __name__ == "__main__":
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="iris_desk_"))
    main(out, int(sys.argv[2]) if len(sys.argv) > 2 else 0)
