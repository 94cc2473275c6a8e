"""How one heatmap becomes 24 (or 80) discrete fold actions.

The network only ever scores a single canonical fold, 13 cm to the right.
Other directions and distances come from rotating and scaling its input.
This script prints the distance each scale bin stands for, shows that a
rotated scene rotates the chosen action, and dumps the Q heatmaps of an
untrained network to ``demo_out/heatmaps``.

    python3 demos/action_space_tour.py
"""

from pathlib import Path

import numpy as np

from foldcraft.actions import (ActionDiscretization, dump_heatmaps, fold_distance, q_maps,
                               select_action, to_world)
from foldcraft.evaluation import TASKS, build_goal, start_state
from foldcraft.qfcn import QNetwork
from foldcraft.sim import WorkspaceConfig, render

cfg = WorkspaceConfig()
for disc in (ActionDiscretization.coarse(), ActionDiscretization.fine()):
    cm = ", ".join(f"{100 * fold_distance(s, disc):.1f}" for s in range(disc.n_scales))
    print(f"{disc.rotation_bins} rotations x {disc.n_scales} scales: distances [{cm}] cm")

net = QNetwork(seed=3)
coarse = ActionDiscretization.coarse()
state = render(start_state(cfg), cfg)
goal = build_goal(TASKS["single_triangle"], cfg)[0]

a = select_action(net, state, goal, coarse, cfg=cfg, mode="nearest")
b = select_action(net, np.rot90(state), np.rot90(goal), coarse, cfg=cfg, mode="nearest")
w = to_world(a, coarse, cfg)
print(f"greedy action {a.row},{a.col} rot {a.rot_bin} scale {a.scale_bin} "
      f"(fold {100 * w.distance_m:.1f} cm towards {np.degrees(w.direction_rad):.0f} deg)")
print(f"after rotating the scene by 90 deg: {b.row},{b.col} rot {b.rot_bin} scale {b.scale_bin}")

qm = q_maps(net, state, goal, coarse, cfg)
paths = dump_heatmaps(qm, Path("demo_out") / "heatmaps")
print(f"Q range [{qm.min():.3f}, {qm.max():.3f}], {len(paths)} heatmaps in demo_out/heatmaps")
