"""A short end-to-end run: train, evaluate, report.

Trains the toy network for 600 steps (about four minutes on one
core), then writes the JSON summary and the boundary heatmaps of a held-out
image.  Pass a step count to train longer, e.g. ``python3 demos/04_train_and_report.py 2000``.
"""

import json
import sys

from csmunet.harness.config import RunConfig
from csmunet.harness.report import report
from csmunet.harness.train import train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 600
cfg = RunConfig(steps=steps, eval_every=max(steps // 4, 1), out_dir="demo_out/run").validate()


def show(ev):
    print(f"step {ev['step']:5d}  mDice {ev['mDice']:.4f}  per class {[round(d, 3) for d in ev['dice']]}")


res = train(cfg, log_path="demo_out/run/log.jsonl", progress=show)
print(f"trained {steps} steps in {res.seconds:.0f} s; checkpoint at {res.checkpoint}")

summary = report("demo_out/run/log.jsonl", "demo_out/run/report", bench=False)
print(json.dumps({k: summary[k] for k in ("metrics", "parameters")}, indent=1)[:800])
print("heatmaps:", ", ".join(summary["heatmaps"]))
