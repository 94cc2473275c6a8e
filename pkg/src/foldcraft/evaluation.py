"""Goal-conditioned folding trials in simulation.

Six folding tasks are defined by scripted fold sequences applied to a flat,
centred cloth.  Each script step names a cloth particle (grid row, column),
a rotation bin and a scale bin of the coarse 8 x 3 discretization; the pick
is the image pixel currently containing that particle.  A trial starts from
a flat cloth jittered by a few whole pixels, then lets a policy act until
the observation is goal-equivalent or the step budget runs out.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .actions import (ActionDiscretization, ActionIndex, is_ablation, select_action,
                      to_world)
from .dataset import goal_equal, random_action, registered_iou
from .qfcn import QNetwork
from .sim import (FabricState, WorkspaceConfig, WorldAction, execute_fold,
                  flat_state, render, save_png)

ScriptStep = tuple[tuple[int, int], int, int]     # (particle (i, j), rot_bin, scale_bin)

COARSE = ActionDiscretization.coarse()
FINE = ActionDiscretization.fine()


@dataclass(frozen=True)
class TaskSpec:
    name: str
    script: tuple[ScriptStep, ...]
    max_episode_steps: int = 8
    disc: ActionDiscretization = COARSE
    description: str = ""


def _corner_steps(n: int, corners, scale_bin: int) -> list[ScriptStep]:
    """Inward folds of the given corners along their diagonals."""
    lo, hi = 1, n - 2
    table = {"tl": ((lo, lo), 7), "br": ((hi, hi), 3), "tr": ((lo, hi), 5), "bl": ((hi, lo), 1)}
    return [(table[c][0], table[c][1], scale_bin) for c in corners]


def make_tasks(grid_n: int = 25) -> dict[str, TaskSpec]:
    """The six evaluation tasks for a ``grid_n`` x ``grid_n`` particle cloth."""
    n = grid_n
    mid, q = n // 2, round(5 * (n - 1) / 24)
    tri1 = ((q, q), 7, 2)                      # 26 cm along the main diagonal
    tri2 = ((q, n - 1 - q), 5, 2)              # then along the other one
    tasks = [
        TaskSpec("small_inward", tuple(_corner_steps(n, ["tl"], 0)),
                 description="one corner folded 6.5 cm towards the centre"),
        TaskSpec("double_inward", tuple(_corner_steps(n, ["tl", "br"], 0)),
                 description="two opposite corners folded inwards"),
        TaskSpec("four_corners_inward", tuple(_corner_steps(n, ["tl", "br", "tr", "bl"], 0)),
                 description="all four corners folded inwards"),
        TaskSpec("single_triangle", (tri1,),
                 description="diagonal fold into a triangle"),
        TaskSpec("double_straight", (((mid, 1), 0, 2), ((mid, mid), 0, 1)),
                 description="left half over, then folded again"),
        TaskSpec("double_triangle", (tri1, tri2),
                 description="triangle folded again into a smaller triangle"),
    ]
    return {t.name: t for t in tasks}


TASKS = make_tasks()
SINGLE_FOLD_TASKS = ("small_inward", "single_triangle")


def to_fine(step: ScriptStep) -> ScriptStep:
    """Express a coarse 8 x 3 script step in the 16 x 5 discretization."""
    particle, rot, scale = step
    return particle, 2 * rot, {0: 0, 1: 2, 2: 4}[scale]


def particle_pixel(state: FabricState, particle, cfg: WorkspaceConfig) -> tuple[int, int]:
    x, y = state.positions[particle[0], particle[1], :2]
    H = cfg.image_px
    return (int(min(max(math.floor(y / cfg.m_per_px), 0), H - 1)),
            int(min(max(math.floor(x / cfg.m_per_px), 0), H - 1)))


def script_action(state: FabricState, step: ScriptStep, cfg: WorkspaceConfig) -> ActionIndex:
    (i, j), rot, scale = step
    r, c = particle_pixel(state, (i, j), cfg)
    return ActionIndex(r, c, rot, scale)


def start_state(cfg: WorkspaceConfig, jitter_px=(0, 0)) -> FabricState:
    """Flat centred cloth shifted by whole pixels."""
    return flat_state(cfg, (jitter_px[0] * cfg.m_per_px, jitter_px[1] * cfg.m_per_px))


def build_goal(task: TaskSpec, cfg: WorkspaceConfig) -> tuple[np.ndarray, FabricState]:
    """Goal observation and ground-truth state from the task script."""
    state = start_state(cfg)
    for step in task.script:
        a = script_action(state, step, cfg)
        nxt = execute_fold(state, to_world(a, task.disc, cfg), cfg)
        if nxt is state:
            raise RuntimeError(f"task {task.name}: scripted grasp at {step} missed the cloth")
        state = nxt
    return render(state, cfg), state


# ---------------------------------------------------------------------------
# policies

class Policy:
    name = "policy"

    def reset(self, seed: int) -> None:
        pass

    def act(self, obs: np.ndarray, goal: np.ndarray, state: FabricState) -> ActionIndex | None:
        raise NotImplementedError


class NetworkPolicy(Policy):
    """Greedy policy of a trained network (a 3-channel net acts as the no-scale ablation)."""

    def __init__(self, net: QNetwork, disc: ActionDiscretization, cfg: WorkspaceConfig,
                 name: str | None = None, mode: str = "bilinear"):
        self.net, self.disc, self.cfg, self.mode = net, disc, cfg, mode
        self.name = name or ("no_scale" if is_ablation(net) else "ours")

    def act(self, obs, goal, state):
        return select_action(self.net, obs, goal, self.disc, cfg=self.cfg, mode=self.mode)


class RandomPolicy(Policy):
    """The data-collection policy: uniform fabric pixel and distance, centre bias."""
    name = "random"

    def __init__(self, disc: ActionDiscretization, cfg: WorkspaceConfig):
        self.disc, self.cfg = disc, cfg
        self.rng = np.random.default_rng(0)

    def reset(self, seed: int) -> None:
        self.rng = np.random.default_rng(seed)

    def act(self, obs, goal, state):
        return random_action(obs, self.cfg, self.disc, self.rng)


class ScriptPolicy(Policy):
    """Replays a task script; gives up once it is exhausted."""
    name = "script"

    def __init__(self, task: TaskSpec, cfg: WorkspaceConfig, disc: ActionDiscretization = COARSE):
        self.cfg, self.disc = cfg, disc
        steps = task.script
        if disc == FINE and task.disc == COARSE:
            steps = tuple(to_fine(s) for s in steps)
        self.steps = steps
        self.t = 0

    def reset(self, seed: int) -> None:
        self.t = 0

    def act(self, obs, goal, state):
        if self.t >= len(self.steps):
            return None
        step = self.steps[self.t]
        self.t += 1
        return script_action(state, step, self.cfg)


# ---------------------------------------------------------------------------
# trials

@dataclass
class TrialResult:
    task: str
    policy: str
    trial: int
    success: bool
    steps: int
    iou_trace: list[float]
    actions: list[ActionIndex] = field(default_factory=list)
    world: list[WorldAction] = field(default_factory=list)
    frames: list[np.ndarray] = field(default_factory=list, repr=False)
    error: str = ""

    @property
    def final_iou(self) -> float:
        return self.iou_trace[-1]


def trial_jitter(seed: int, max_px: int = 2) -> tuple[int, int]:
    rng = np.random.default_rng(seed)
    return tuple(int(v) for v in rng.integers(-max_px, max_px + 1, 2))


def run_trial(policy: Policy, task: TaskSpec, cfg: WorkspaceConfig, seed: int,
              disc: ActionDiscretization = COARSE, goal: np.ndarray | None = None,
              trial: int = 0, max_steps: int | None = None) -> TrialResult:
    """One episode from a jittered flat start towards the task goal."""
    if goal is None:
        goal = build_goal(task, cfg)[0]
    limit = task.max_episode_steps if max_steps is None else max_steps
    policy.reset(seed)
    state = start_state(cfg, trial_jitter(seed))
    obs = render(state, cfg)
    res = TrialResult(task.name, policy.name, trial, False, 0,
                      [registered_iou(obs, goal, cfg)], frames=[obs])
    while True:
        if goal_equal(obs, goal, cfg):
            res.success = True
            break
        if res.steps >= limit:
            break
        try:
            a = policy.act(obs, goal, state)
            if a is None:
                break
            w = to_world(a, disc, cfg)
            state = execute_fold(state, w, cfg)
        except Exception as exc:           # a failed step ends the trial as a failure
            res.error = f"{type(exc).__name__}: {exc}"
            break
        obs = render(state, cfg)
        res.steps += 1
        res.actions.append(a)
        res.world.append(w)
        res.frames.append(obs)
        res.iou_trace.append(registered_iou(obs, goal, cfg))
    return res


def trial_seed(base_seed: int, task: str, trial: int) -> int:
    """Per-trial seed, independent of which other tasks or policies run."""
    return int(np.random.SeedSequence([base_seed, sum(map(ord, task)), trial])
               .generate_state(1)[0])


def run_suite(policies: dict[str, Policy], tasks, n_trials: int, cfg: WorkspaceConfig,
              disc: ActionDiscretization = COARSE, seed: int = 0, out_dir=None,
              strips: bool = True) -> list[TrialResult]:
    """Every policy on every task; optionally writes CSVs and PNG strips."""
    results = []
    for tname in tasks:
        task = TASKS[tname] if isinstance(tname, str) else tname
        goal = build_goal(task, cfg)[0]
        for pname, pol in policies.items():
            pol.name = pname
            for i in range(n_trials):
                results.append(run_trial(pol, task, cfg, trial_seed(seed, task.name, i), disc,
                                         goal, trial=i))
                if out_dir is not None and strips:
                    save_strip(results[-1], goal, cfg, Path(out_dir) / "strips"
                               / f"{pname}_{task.name}_{i:02d}.png")
    if out_dir is not None:
        write_results(results, out_dir)
    return results


def summary_table(results: list[TrialResult]) -> dict[tuple[str, str], tuple[int, int, float]]:
    """(policy, task) -> (successes, trials, mean final IoU)."""
    cells: dict[tuple[str, str], list[TrialResult]] = {}
    for r in results:
        cells.setdefault((r.policy, r.task), []).append(r)
    return {k: (sum(r.success for r in v), len(v), float(np.mean([r.final_iou for r in v])))
            for k, v in cells.items()}


def format_table(results: list[TrialResult]) -> str:
    table = summary_table(results)
    policies = sorted({p for p, _ in table})
    tasks = list(dict.fromkeys(r.task for r in results))
    w = max(len(t) for t in tasks) + 2
    lines = ["task".ljust(w) + "".join(p.rjust(16) for p in policies)]
    for t in tasks:
        row = t.ljust(w)
        for p in policies:
            s, n, m = table.get((p, t), (0, 0, float("nan")))
            row += f"{s:>3}/{n:<3} iou {m:.2f}".rjust(16)
        lines.append(row)
    return "\n".join(lines)


def write_results(results: list[TrialResult], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "results.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["policy", "task", "trial", "success", "steps", "final_iou"])
        for r in results:
            w.writerow([r.policy, r.task, r.trial, int(r.success), r.steps, f"{r.final_iou:.6f}"])
    with open(out / "iou_traces.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["policy", "task", "trial", "step", "iou"])
        for r in results:
            for k, v in enumerate(r.iou_trace):
                w.writerow([r.policy, r.task, r.trial, k, f"{v:.6f}"])
    with open(out / "actions.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["policy", "task", "trial", "step", "row", "col", "rot_bin", "scale_bin",
                    "pick_x_m", "pick_y_m", "direction_rad", "distance_m"])
        for r in results:
            for k, (a, wa) in enumerate(zip(r.actions, r.world)):
                w.writerow([r.policy, r.task, r.trial, k, a.row, a.col, a.rot_bin, a.scale_bin,
                            f"{wa.pick_xy[0]:.6f}", f"{wa.pick_xy[1]:.6f}",
                            f"{wa.direction_rad:.6f}", f"{wa.distance_m:.6f}"])
    (out / "summary.txt").write_text(format_table(results) + "\n")


def save_strip(res: TrialResult, goal: np.ndarray, cfg: WorkspaceConfig, path) -> None:
    """Trajectory frames left to right, then the goal after a gap."""
    H = goal.shape[0]
    gap = np.zeros((H, 4, 3), np.uint8)
    gap[:] = 255
    tiles = []
    for f in res.frames:
        tiles += [f, gap[:, :1]]
    tiles += [gap, goal]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_png(np.concatenate(tiles, axis=1), path)


# ---------------------------------------------------------------------------
# test-time discretization change

def crafted_tasks(grid_n: int = 25) -> dict[str, TaskSpec]:
    """Goals that only the 16 x 5 discretization expresses exactly."""
    mid = grid_n // 2
    return {
        "fold_22_5deg": TaskSpec("fold_22_5deg", (((mid, 1), 15, 2),), disc=FINE,
                                 description="left edge folded 13 cm at 22.5 degrees"),
        "fold_19_5cm": TaskSpec("fold_19_5cm", (((mid, 1), 0, 3),), disc=FINE,
                                description="left edge folded 19.5 cm straight across"),
    }


def generalization_eval(net: QNetwork, cfg: WorkspaceConfig, n_trials: int = 5,
                        seed: int = 0, out_dir=None) -> dict:
    """Final IoU of one checkpoint under the coarse and the fine discretization."""
    report: dict = {}
    all_results = []
    for name, task in crafted_tasks(cfg.grid_n).items():
        goal = build_goal(task, cfg)[0]
        for label, disc in (("coarse", COARSE), ("fine", FINE)):
            pol = NetworkPolicy(net, disc, cfg, name=f"ours_{label}")
            res = [run_trial(pol, task, cfg, trial_seed(seed, name, i), disc, goal, trial=i)
                   for i in range(n_trials)]
            all_results += res
            report[(name, label)] = {
                "mean_final_iou": float(np.mean([r.final_iou for r in res])),
                "successes": sum(r.success for r in res),
                "distances_m": sorted({round(w.distance_m, 6) for r in res for w in r.world}),
                "rot_bins": sorted({a.rot_bin for r in res for a in r.actions}),
            }
    if out_dir is not None:
        write_results(all_results, out_dir)
    return report
