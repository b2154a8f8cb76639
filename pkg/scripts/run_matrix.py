"""Run the benchmark matrix plus zero-shot evaluation and print a compact table.

    python3 scripts/run_matrix.py --config configs/desk.yaml --out-dir runs/matrix
"""
import argparse
import os
import sys
import time

from fedinject.cli import main
from fedinject.metrics import parse_csv

ap = argparse.ArgumentParser()
ap.add_argument("--config", default="configs/desk.yaml")
ap.add_argument("--out-dir", default="runs/matrix")
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--threads", type=int, default=1)
args = ap.parse_args()

t0 = time.perf_counter()
code = main(["matrix", "--config", args.config, "--out-dir", args.out_dir,
             "--seed", str(args.seed), "--threads", str(args.threads)])
if code:
    sys.exit(code)
print(f"matrix finished in {time.perf_counter() - t0:.1f}s\n")

with open(os.path.join(args.out_dir, "matrix.csv")) as f:
    rows = parse_csv(f.read())
tasks = list(dict.fromkeys(r.task for r in rows))
labels = list(dict.fromkeys(r.config for r in rows))
acc = {(r.config, r.task): r.accuracy for r in rows}
print(f"{'accuracy':14s}" + "".join(f"{t[:12]:>14s}" for t in tasks))
for label in labels:
    print(f"{label:14s}" + "".join(f"{acc[(label, t)]:14.3f}" for t in tasks))

zs_path = os.path.join(args.out_dir, "zero_shot.csv")
if os.path.exists(zs_path):
    print("\nzero-shot")
    with open(zs_path) as f:
        for r in parse_csv(f.read()):
            val = "x" if r.accuracy is None else f"{r.accuracy:.3f}"
            print(f"  {r.config:28s} {r.task:28s} {val}")
