"""Fold a flat towel by hand and look at what the simulator does.

Runs the scripted goal of every evaluation task, prints how many layers
and how much table area each fold leaves, and writes one PNG strip per
task (start, then each fold) to ``demo_out/``.

    python3 demos/fold_playground.py
"""

from pathlib import Path

import numpy as np

from foldcraft.actions import to_world
from foldcraft.evaluation import TASKS, script_action, start_state
from foldcraft.sim import WorkspaceConfig, execute_fold, fabric_mask, render, save_png

cfg = WorkspaceConfig()
out = Path("demo_out")
out.mkdir(exist_ok=True)

flat = start_state(cfg)
area0 = fabric_mask(render(flat, cfg), cfg).sum()
print(f"flat towel covers {area0} of {cfg.image_px ** 2} pixels")

for name, task in TASKS.items():
    state, frames = flat, [render(flat, cfg)]
    for step in task.script:
        a = script_action(state, step, cfg)
        w = to_world(a, task.disc, cfg)
        state = execute_fold(state, w, cfg)
        frames.append(render(state, cfg))
        print(f"  {name:20s} pick px ({a.row:2d},{a.col:2d})  fold {100 * w.distance_m:4.1f} cm"
              f" at {np.degrees(w.direction_rad):5.1f} deg")
    area = fabric_mask(frames[-1], cfg).sum() / area0
    print(f"{name:22s} {len(task.script)} fold(s), {state.n_layers()} layers, area {area:.2f}")
    gap = np.zeros((cfg.image_px, 2, 3), np.uint8) + 255
    save_png(np.concatenate(sum(([f, gap] for f in frames), [])[:-1], axis=1),
             out / f"task_{name}.png")

print(f"strips written to {out}/")
