"""The whole loop at desk scale: collect, train offline, evaluate.

Random-policy data with soft resets, hindsight-relabelled DQN training,
then folding trials against the random baseline.  With the defaults below
(300 transitions, default training) it takes roughly 10 to 20 minutes on
one CPU core; ``--quick`` shrinks everything to a one-minute smoke run.

    python3 demos/desk_pipeline.py [--quick]
"""

import argparse
import time
from dataclasses import replace
from pathlib import Path

from foldcraft.dataset import collect, load_dataset
from foldcraft.evaluation import (COARSE, NetworkPolicy, RandomPolicy, format_table,
                                  run_suite)
from foldcraft.qfcn import QNetwork
from foldcraft.sim import WorkspaceConfig
from foldcraft.trainer import TrainConfig, train

p = argparse.ArgumentParser()
p.add_argument("--quick", action="store_true")
p.add_argument("--out", default="demo_out/pipeline")
args = p.parse_args()

cfg = WorkspaceConfig()
out = Path(args.out)
n, trials = (30, 2) if args.quick else (300, 10)
tc = TrainConfig()
if args.quick:
    tc = replace(tc, max_steps=20)

t0 = time.perf_counter()
collect(cfg, COARSE, n, seed=0, out_dir=out / "dataset")
ds = load_dataset(out / "dataset")
print(f"{len(ds)} transitions, {len(ds.images)} images ({time.perf_counter() - t0:.0f} s)")

net = QNetwork(seed=0)
rep = train(ds, net, tc, out_dir=out / "train",
            progress=lambda step, loss: print(f"  step {step:5d} loss {loss:.4f}"))
print(f"trained {rep.steps} steps, stopped by {rep.stop_reason} ({rep.seconds:.0f} s)")

pols = {"ours": NetworkPolicy(net, COARSE, cfg), "random": RandomPolicy(COARSE, cfg)}
res = run_suite(pols, ["small_inward", "single_triangle", "double_straight"], trials, cfg,
                out_dir=out / "eval")
print(format_table(res))
print(f"total {time.perf_counter() - t0:.0f} s; strips and CSVs in {out / 'eval'}")
