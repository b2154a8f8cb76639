"""Run the matrix twice with the same seed (and different thread counts) and compare bytes."""
import argparse
import filecmp
import os
import sys
import tempfile

from fedinject.cli import main

ap = argparse.ArgumentParser()
ap.add_argument("--config", default="configs/quick.yaml")
ap.add_argument("--seed", type=int, default=7)
args = ap.parse_args()

with tempfile.TemporaryDirectory() as tmp:
    dirs = []
    for threads in (1, 4):
        out = os.path.join(tmp, f"t{threads}")
        code = main(["matrix", "--config", args.config, "--seed", str(args.seed),
                     "--threads", str(threads), "--out-dir", out])
        if code:
            sys.exit(code)
        dirs.append(out)
    same = all(filecmp.cmp(os.path.join(dirs[0], n), os.path.join(dirs[1], n), shallow=False)
               for n in ("matrix.csv", "zero_shot.csv"))
    print("identical" if same else "DIFFERENT")
    sys.exit(0 if same else 1)
