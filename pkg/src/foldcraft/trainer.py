"""Offline DQN on hindsight-relabelled transitions.

Each step draws a batch with :func:`her_sample`, perturbs observation and
goal, scores the stored action with the online network and regresses it
towards  y = 1  (goal reached, terminal) or  y = gamma * max_a' Q_target
(next_obs, goal, a').  Only the pixel of the stored action receives
gradient.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .actions import (ActionDiscretization, NoValidAction, best_action, is_ablation, q_maps,
                      transformed_for_action)
from .dataset import AugmentConfig, Dataset, augment, her_sample
from .qfcn import Adam, QNetwork, huber_loss
from .sim import WorkspaceConfig, fabric_mask

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.5
    lr: float = 1e-4
    batch_size: int = 10
    early_stop_loss: float = 0.05
    early_stop_window: int = 200
    max_steps: int = 25_000
    target_sync_period: int = 500
    seed: int = 0
    augment: bool = True
    max_translation_m: float = 0.00825
    max_rotation_deg: float = 5.0
    interp: str = "bilinear"
    log_every: int = 100
    her_achieved_prob: float = 0.5

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0 or self.early_stop_loss <= 0 or self.early_stop_window < 1:
            raise ValueError("lr, early_stop_loss and early_stop_window must be positive")
        if not 0 <= self.her_achieved_prob <= 1:
            raise ValueError("her_achieved_prob must lie in [0, 1]")
        if self.max_steps < 0 or self.target_sync_period < 1:
            raise ValueError("max_steps must be >= 0 and target_sync_period >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainReport:
    steps: int
    losses: list[float]
    mean_q: list[float]
    stop_reason: str                   # early_stop | max_steps | diverged
    checkpoint: str | None = None
    seconds: float = 0.0
    diagnostic: str = ""

    def to_dict(self) -> dict:
        return {"steps": self.steps, "stop_reason": self.stop_reason,
                "checkpoint": self.checkpoint, "seconds": round(self.seconds, 3),
                "final_loss": self.losses[-1] if self.losses else None,
                "diagnostic": self.diagnostic}


def q_target(reward: int, next_obs: np.ndarray, goal: np.ndarray, disc: ActionDiscretization,
             target: QNetwork, mask: np.ndarray | None = None, gamma: float = 0.5,
             cfg: WorkspaceConfig | None = None, interp: str = "bilinear") -> float:
    """1 for a reached goal, else gamma * max of the target net over valid actions."""
    if reward:
        return 1.0
    cfg = cfg or WorkspaceConfig()
    if mask is None:
        mask = fabric_mask(next_obs, cfg)
    try:
        best = best_action(q_maps(target, next_obs, goal, disc, cfg, interp), mask)
    except NoValidAction:
        return float(reward)
    return gamma * best.q_value


def _write_log(path: Path, losses, mean_q) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss", "mean_q"])
        for i, (l, q) in enumerate(zip(losses, mean_q), 1):
            w.writerow([i, f"{l:.8g}", f"{q:.8g}"])


def train(ds: Dataset, net: QNetwork, cfg: TrainConfig = TrainConfig(),
          disc: ActionDiscretization | None = None, out_dir=None,
          progress=None) -> TrainReport:
    """Train ``net`` in place.  Writes checkpoint, log and config to ``out_dir``.

    ``progress(step, loss)`` is called every ``cfg.log_every`` steps.
    """
    t0 = time.perf_counter()
    disc = disc or ds.disc
    wcfg = ds.cfg
    acfg = (AugmentConfig(cfg.max_translation_m, cfg.max_rotation_deg) if cfg.augment
            else AugmentConfig(0.0, 0.0))
    ablation = is_ablation(net)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(net.params, lr=cfg.lr)
    target = net.copy()
    losses: list[float] = []
    mean_q: list[float] = []
    stop, diag = "max_steps", ""
    window_sum = 0.0
    mask_cache: dict[int, np.ndarray] = {}

    for step in range(1, cfg.max_steps + 1):
        batch = her_sample(ds, cfg.batch_size, rng, cfg.her_achieved_prob)
        grads = [np.zeros_like(p) for p in net.params]
        loss_sum = q_sum = 0.0
        for s in batch:
            tr = ds.transitions[s.transition]
            obs, goal = ds.images[s.obs], ds.images[s.goal]
            obs, goal, a = augment(obs, goal, rng, wcfg, acfg, tr.action)
            if s.reward:
                y = 1.0
            else:
                if s.next_obs not in mask_cache:
                    mask_cache[s.next_obs] = fabric_mask(ds.images[s.next_obs], wcfg)
                y = q_target(0, ds.images[s.next_obs], goal, disc, target,
                             mask_cache[s.next_obs], cfg.gamma, wcfg, cfg.interp)
            x, (r, c, ch) = transformed_for_action(obs, goal, a, disc, wcfg, ablation, cfg.interp)
            out, cache = net.forward(x, keep=True)
            pred = float(out[0, r, c, ch])
            loss, g = huber_loss(pred, y)
            loss_sum += loss
            q_sum += pred
            for acc, gi in zip(grads, net.backward_pixels(cache, [(0, r, c, ch, g / len(batch))],
                                                         out.shape)):
                acc += gi
        loss = loss_sum / len(batch)
        if not math.isfinite(loss):
            stop, diag = "diverged", f"non-finite loss at step {step}"
            break
        try:
            opt.step(net.params, grads)
        except FloatingPointError as exc:
            stop, diag = "diverged", f"step {step}: {exc}"
            break
        losses.append(loss)
        mean_q.append(q_sum / len(batch))
        window_sum += loss
        if len(losses) > cfg.early_stop_window:
            window_sum -= losses[-cfg.early_stop_window - 1]
        if step % cfg.target_sync_period == 0:
            target = net.copy()
        if progress and step % cfg.log_every == 0:
            progress(step, float(np.mean(losses[-cfg.log_every:])))
        if (len(losses) >= cfg.early_stop_window
                and window_sum / cfg.early_stop_window < cfg.early_stop_loss):
            stop = "early_stop"
            break

    report = TrainReport(len(losses), losses, mean_q, stop, None,
                         time.perf_counter() - t0, diag)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt = out / "checkpoint.fcqn"
        net.save(ckpt, wcfg.image_px)
        report.checkpoint = str(ckpt)
        _write_log(out / "train_log.csv", losses, mean_q)
        echo = {"train": cfg.to_dict(), "workspace": wcfg.to_dict(),
                "discretization": disc.to_dict(), "ablation": ablation,
                "dataset": str(ds.manifest.root), "report": report.to_dict()}
        (out / "train_config.json").write_text(json.dumps(echo, indent=2) + "\n")
    return report

