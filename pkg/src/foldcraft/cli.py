"""Command-line entry point: ``foldcraft <command> [options]``.

Commands: collect, train, eval, generalize, debug-heatmaps, gradcheck.
Every command reads an optional ``--config`` YAML file (see
:class:`foldcraft.config.RunConfig`); explicit flags win over the file.
Exit status is 0 only when the requested outputs were fully written.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .actions import ActionDiscretization, q_maps, select_action, _colormap
from .config import RunConfig
from .dataset import collect, load_dataset
from .evaluation import (COARSE, FINE, TASKS, NetworkPolicy, RandomPolicy, ScriptPolicy,
                         format_table, generalization_eval, run_suite)
from .qfcn import QNetwork, default_layers, gradient_check
from .sim import fabric_mask, load_png, save_png
from .trainer import train

log = logging.getLogger("foldcraft")


class UsageError(Exception):
    pass


def _load_config(args) -> RunConfig:
    return RunConfig.load(args.config) if args.config else RunConfig()


def _load_net(path, image_px: int) -> QNetwork:
    """Load a checkpoint, refusing one trained at another image resolution."""
    if not path:
        raise UsageError("a checkpoint is required (--checkpoint or 'checkpoint' in the config)")
    if not Path(path).exists():
        raise UsageError(f"checkpoint {path} does not exist")
    net, px = QNetwork.from_bytes(Path(path).read_bytes())
    if px and px != image_px:
        raise UsageError(f"checkpoint {path} was trained on {px}x{px} images, "
                         f"the workspace renders {image_px}x{image_px}")
    return net


# ---------------------------------------------------------------------------
# commands

def cmd_collect(args) -> int:
    rc = _load_config(args)
    n = rc.transitions if args.transitions is None else args.transitions
    if n < 1:
        raise UsageError("--transitions must be >= 1")
    seed = rc.collect_seed if args.seed is None else args.seed
    out = args.out or rc.dataset
    t0 = time.perf_counter()
    man = collect(rc.workspace, rc.discretization, n, seed, out,
                  episode_length=args.episode_length or rc.episode_length)
    episodes = len({t.episode_id for t in man.transitions})
    print(f"collected {man.count} transitions in {episodes} episodes "
          f"({time.perf_counter() - t0:.1f} s) -> {out}")
    if not man.valid:
        print(f"collection aborted: {man.error}", file=sys.stderr)
        return 1
    return 0


def cmd_train(args) -> int:
    rc = _load_config(args)
    ds = load_dataset(args.dataset or rc.dataset)       # validates before any training
    tc = rc.train
    if args.max_steps is not None:
        tc = replace(tc, max_steps=args.max_steps)
    if args.seed is not None:
        tc = replace(tc, seed=args.seed)
    layers = default_layers(out_ch=ds.disc.n_scales if args.ablation else 1)
    net = QNetwork(layers, seed=tc.seed)
    out = Path(args.out or Path(rc.checkpoint).parent)

    def progress(step, loss):
        print(f"step {step:6d}  loss {loss:.4f}", flush=True)

    rep = train(ds, net, tc, ds.disc, out, progress=progress if not args.quiet else None)
    print(json.dumps(rep.to_dict()))
    return 0 if rep.stop_reason != "diverged" else 1


def _policies(args, rc: RunConfig, disc: ActionDiscretization, task_names):
    names = [p.strip() for p in args.policy.split(",")]
    pols = {}
    for name in names:
        if name == "ours":
            net = _load_net(args.checkpoint or rc.checkpoint, rc.workspace.image_px)
            if net.out_channels != 1:
                raise UsageError("--policy ours needs a single-channel checkpoint")
            pols[name] = NetworkPolicy(net, disc, rc.workspace, name)
        elif name == "no_scale":
            net = _load_net(args.ablation_checkpoint or args.checkpoint, rc.workspace.image_px)
            if net.out_channels != disc.n_scales:
                raise UsageError(f"--policy no_scale needs a {disc.n_scales}-channel checkpoint")
            pols[name] = NetworkPolicy(net, disc, rc.workspace, name)
        elif name == "random":
            pols[name] = RandomPolicy(disc, rc.workspace)
        elif name == "script":
            if len(task_names) != 1:
                raise UsageError("--policy script replays one task at a time")
            pols[name] = ScriptPolicy(TASKS[task_names[0]], rc.workspace, disc)
        else:
            raise UsageError(f"unknown policy {name!r}; choose from ours, random, no_scale, script")
    return pols


def cmd_eval(args) -> int:
    rc = _load_config(args)
    tasks = [t.strip() for t in args.tasks.split(",")] if args.tasks else list(rc.eval_tasks)
    bad = [t for t in tasks if t not in TASKS]
    if bad:
        raise UsageError(f"unknown task(s) {bad}; valid tasks: {', '.join(TASKS)}")
    disc = FINE if args.fine else COARSE
    pols = _policies(args, rc, disc, tasks)
    trials = rc.eval_trials if args.trials is None else args.trials
    seed = rc.eval_seed if args.seed is None else args.seed
    out = Path(args.out or Path(rc.output_dir) / "eval")
    results = run_suite(pols, tasks, trials, rc.workspace, disc, seed, out,
                        strips=not args.no_strips)
    print(format_table(results))
    print(f"results -> {out / 'results.csv'}")
    return 0


def cmd_generalize(args) -> int:
    rc = _load_config(args)
    net = _load_net(args.checkpoint or rc.checkpoint, rc.workspace.image_px)
    out = Path(args.out or Path(rc.output_dir) / "generalize")
    rep = generalization_eval(net, rc.workspace, args.trials,
                              rc.eval_seed if args.seed is None else args.seed, out)
    rows = {f"{k[0]}/{k[1]}": v for k, v in rep.items()}
    (out / "generalization.json").write_text(json.dumps(rows, indent=2) + "\n")
    for k, v in rows.items():
        print(f"{k:24s} mean final IoU {v['mean_final_iou']:.3f}  "
              f"successes {v['successes']}")
    return 0


def heatmap_grid(qm: np.ndarray, state: np.ndarray, best) -> np.ndarray:
    """Rotation rows x scale columns of colour-mapped heatmaps, argmax marked."""
    K, S, H, W = qm.shape
    lo, hi = float(qm.min()), float(qm.max())
    norm = (qm - lo) / (hi - lo) if hi > lo else np.zeros_like(qm)
    pad = 2
    grid = np.full((K * (H + pad) + pad, (S + 1) * (W + pad) + pad, 3), 255, np.uint8)
    mask = fabric_mask(state, _cfg_for(state))
    for k in range(K):
        y = pad + k * (H + pad)
        grid[y:y + H, pad:pad + W] = state
        for s in range(S):
            x = pad + (s + 1) * (W + pad)
            tile = _colormap(norm[k, s])
            tile[~mask] //= 3
            if (k, s) == (best.rot_bin, best.scale_bin):
                r, c = best.row, best.col
                tile[r, max(c - 2, 0):c + 3] = 255
                tile[max(r - 2, 0):r + 3, c] = 255
            grid[y:y + H, x:x + W] = tile
    return grid


def _cfg_for(state):
    from .sim import WorkspaceConfig
    return WorkspaceConfig(image_px=state.shape[0])


def cmd_debug_heatmaps(args) -> int:
    rc = _load_config(args)
    net = _load_net(args.checkpoint or rc.checkpoint, rc.workspace.image_px)
    state, goal = load_png(args.state), load_png(args.goal)
    H = rc.workspace.image_px
    for name, img in (("state", state), ("goal", goal)):
        if img.shape != (H, H, 3):
            raise UsageError(f"{name} image is {img.shape[:2]}, config expects {H}x{H}")
    disc = FINE if args.fine else COARSE
    qm = q_maps(net, state, goal, disc, rc.workspace)
    best = select_action(net, state, goal, disc, cfg=rc.workspace)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_png(heatmap_grid(qm, state, best), out)
    print(f"argmax {best} -> {out}")
    return 0


def cmd_gradcheck(args) -> int:
    rep = gradient_check(seed=args.seed or 0)
    print("\n".join(rep.lines()))
    print(f"{rep.seconds:.1f} s, {'PASS' if rep.passed else 'FAIL'}")
    return 0 if rep.passed else 1


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="foldcraft", description=__doc__.split("\n")[0])
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("collect", help="random-policy data collection")
    c.add_argument("--transitions", type=int)
    c.add_argument("--seed", type=int)
    c.add_argument("--episode-length", type=int)
    c.add_argument("--out", help="dataset directory")
    c.set_defaults(fn=cmd_collect)

    t = sub.add_parser("train", help="offline DQN training")
    t.add_argument("--dataset")
    t.add_argument("--out", help="output directory for checkpoint and logs")
    t.add_argument("--max-steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--ablation", action="store_true", help="rotation-only 3-channel head")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="run folding trials")
    e.add_argument("--checkpoint")
    e.add_argument("--ablation-checkpoint", help="checkpoint for the no_scale policy")
    e.add_argument("--tasks", help="comma-separated task names")
    e.add_argument("--trials", type=int)
    e.add_argument("--policy", default="ours", help="comma list of ours,random,no_scale,script")
    e.add_argument("--fine", action="store_true", help="16 x 5 action discretization")
    e.add_argument("--seed", type=int)
    e.add_argument("--out")
    e.add_argument("--no-strips", action="store_true", help="skip PNG trajectory strips")
    e.set_defaults(fn=cmd_eval)

    g = sub.add_parser("generalize", help="coarse vs fine discretization on crafted goals")
    g.add_argument("--checkpoint")
    g.add_argument("--trials", type=int, default=5)
    g.add_argument("--seed", type=int)
    g.add_argument("--out")
    g.set_defaults(fn=cmd_generalize)

    d = sub.add_parser("debug-heatmaps", help="render all heatmaps for a state/goal pair")
    d.add_argument("--checkpoint")
    d.add_argument("--state", required=True)
    d.add_argument("--goal", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--fine", action="store_true")
    d.set_defaults(fn=cmd_debug_heatmaps)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every kernel")
    gc.add_argument("--seed", type=int)
    gc.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"foldcraft: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"foldcraft: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
