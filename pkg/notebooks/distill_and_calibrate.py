# Train a small backbone, distill its path into one kernel and compare calibration.
# Uses the default config, a couple of minutes on a laptop. Run with: python notebooks/distill_and_calibrate.py [out_dir]
import json
import sys
from pathlib import Path

from pathcal.config import RunConfig
from pathcal.pipeline import run_pipeline

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/notebook")
run_pipeline(RunConfig(), out)

summary = json.loads((out / "summary.json").read_text())
print(f"{'metric':>8} {'backbone':>10} {'kernel':>10}")
for key, b in summary["backbone"].items():
    k = summary["distilled"][key]
    fmt = lambda v: "-" if v is None else f"{v:.2f}"
    print(f"{key:>8} {fmt(b):>10} {fmt(k):>10}")

print("parameters:", summary["parameters"])
print("OOD entropy AUROC:", summary["ood"])

# the distillation curve
rep = json.loads((out / "distill_report.json").read_text())
for e in rep["epochs"]:
    print(f"epoch {e['epoch']:2d}  mean {e['loss_mean']:.4f}  chol {e['loss_cholesky']:.4f}  "
          f"perf {e['loss_perf']:.4f}")
print("reliability diagram written to", out / "calibration.svg")
