"""Run every CLI stage on the bundled smoke config and print the headline numbers.

    python demos/pipeline.py [out_dir]
"""
import json
import sys

from stepflow.cli import main
from stepflow.config import bundled_config_path

out = sys.argv[1] if len(sys.argv) > 1 else "runs/demo"
stages = ["datagen", "augment", "train-prm", "train-gfn", "train-baseline", "guided-search", "eval", "report"]
for stage in stages:
    code = main([stage, "--config", bundled_config_path(), "--out-dir", out])
    print(f"{stage:<15} exit {code}")
    if code:
        sys.exit(code)

with open(f"{out}/search_accuracy.csv") as fh:
    print(fh.read().strip())
with open(f"{out}/eval.json") as fh:
    print(json.dumps(json.load(fh), indent=2)[:800])
