"""Random-policy data collection, the on-disk transition store, hindsight
goal relabelling and training-time augmentation.

Layout of a dataset directory::

    dataset.json       workspace + discretization echo, seed, count, valid flag
    manifest.jsonl     one JSON record per transition
    obs/epNNN_stepMMM.png   observation seen *before* step MMM of episode NNN

A transition's next observation is the next step's file, so each image is
stored once.  Distances are meters, angles radians.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .actions import ActionDiscretization, ActionIndex, to_world
from .sim import (FabricState, WorkspaceConfig, WorldAction, background_u8, decode_levels,
                  execute_fold, fabric_mask, flat_state, load_png, render, save_png,
                  soft_reset)

log = logging.getLogger(__name__)

EPISODE_LENGTH = 10


@dataclass(frozen=True)
class Transition:
    episode_id: int
    step_id: int
    obs_file: str
    next_obs_file: str
    action: ActionIndex
    world: WorldAction

    def to_record(self) -> dict:
        a, w = self.action, self.world
        return {"episode_id": self.episode_id, "step_id": self.step_id,
                "obs_file": self.obs_file, "next_obs_file": self.next_obs_file,
                "row": a.row, "col": a.col, "rot_bin": a.rot_bin, "scale_bin": a.scale_bin,
                "pick_x_m": w.pick_xy[0], "pick_y_m": w.pick_xy[1],
                "direction_rad": w.direction_rad, "distance_m": w.distance_m}

    @classmethod
    def from_record(cls, r: dict) -> "Transition":
        return cls(int(r["episode_id"]), int(r["step_id"]), r["obs_file"], r["next_obs_file"],
                   ActionIndex(int(r["row"]), int(r["col"]), int(r["rot_bin"]),
                               int(r["scale_bin"])),
                   WorldAction((float(r["pick_x_m"]), float(r["pick_y_m"])),
                               float(r["direction_rad"]), float(r["distance_m"])))


@dataclass
class DatasetManifest:
    root: Path
    workspace: WorkspaceConfig
    disc: ActionDiscretization
    seed: int
    transitions: list[Transition]
    valid: bool = True
    error: str = ""
    episode_length: int = EPISODE_LENGTH

    @property
    def count(self) -> int:
        return len(self.transitions)

    def write(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        with open(self.root / "manifest.jsonl", "w") as f:
            for t in self.transitions:
                f.write(json.dumps(t.to_record()) + "\n")
        meta = {"workspace": self.workspace.to_dict(), "discretization": self.disc.to_dict(),
                "seed": self.seed, "count": self.count, "episode_length": self.episode_length,
                "valid": self.valid, "error": self.error}
        (self.root / "dataset.json").write_text(json.dumps(meta, indent=2) + "\n")

    @classmethod
    def read(cls, root) -> "DatasetManifest":
        root = Path(root)
        meta = json.loads((root / "dataset.json").read_text())
        wcfg = WorkspaceConfig.from_dict(meta["workspace"])
        disc = ActionDiscretization.from_dict(meta["discretization"])
        trans = []
        with open(root / "manifest.jsonl") as f:
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    t = Transition.from_record(json.loads(line))
                    a = t.action
                    if not (0 <= a.row < wcfg.image_px and 0 <= a.col < wcfg.image_px):
                        raise ValueError(f"pixel ({a.row}, {a.col}) outside the image")
                    disc.check(a.rot_bin, a.scale_bin)
                except (ValueError, KeyError, TypeError) as exc:
                    raise ValueError(f"{root / 'manifest.jsonl'} record {lineno}: "
                                     f"{type(exc).__name__}: {exc}") from exc
                trans.append(t)
        m = cls(root, wcfg, disc, int(meta["seed"]), trans, bool(meta["valid"]),
                meta.get("error", ""), int(meta.get("episode_length", EPISODE_LENGTH)))
        if m.count != int(meta["count"]):
            raise ValueError(f"manifest has {m.count} records, header says {meta['count']}")
        return m


# ---------------------------------------------------------------------------
# collection

def centre_bias_bin(pick_xy, cfg: WorkspaceConfig, disc: ActionDiscretization) -> int:
    """Rotation bin whose world direction is nearest the heading to the centre."""
    c = cfg.side_m / 2
    dx, dy = c - pick_xy[0], c - pick_xy[1]
    if math.hypot(dx, dy) < 1e-12:
        return 0
    heading = math.atan2(dy, dx)
    # bin k folds along -2*pi*k/K
    return int(round(-heading / (2 * math.pi / disc.rotation_bins))) % disc.rotation_bins


def random_action(obs: np.ndarray, cfg: WorkspaceConfig, disc: ActionDiscretization,
                  rng: np.random.Generator) -> ActionIndex:
    """Uniform fabric pixel, uniform distance, direction biased to the centre."""
    rows, cols = np.nonzero(fabric_mask(obs, cfg))
    if rows.size == 0:
        raise RuntimeError("fabric left the field of view")
    i = int(rng.integers(rows.size))
    s = int(rng.integers(disc.n_scales))
    r, c = int(rows[i]), int(cols[i])
    pick = ((c + 0.5) * cfg.m_per_px, (r + 0.5) * cfg.m_per_px)
    return ActionIndex(r, c, centre_bias_bin(pick, cfg, disc), s)


def _obs_name(ep: int, step: int) -> str:
    return f"obs/ep{ep:03d}_step{step:03d}.png"


def collect(cfg: WorkspaceConfig, disc: ActionDiscretization, n_transitions: int, seed: int,
            out_dir, episode_length: int = EPISODE_LENGTH) -> DatasetManifest:
    """Run the random policy, soft-resetting every ``episode_length`` actions."""
    if n_transitions < 1:
        raise ValueError("n_transitions must be >= 1")
    root = Path(out_dir)
    (root / "obs").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    man = DatasetManifest(root, cfg, disc, seed, [], episode_length=episode_length)
    state: FabricState = flat_state(cfg)
    ep = 0
    try:
        while man.count < n_transitions:
            state = soft_reset(state, cfg, int(rng.integers(2 ** 31)))
            obs = render(state, cfg)
            save_png(obs, root / _obs_name(ep, 0))
            for step in range(min(episode_length, n_transitions - man.count)):
                a = random_action(obs, cfg, disc, rng)
                w = to_world(a, disc, cfg)
                state = execute_fold(state, w, cfg)
                obs = render(state, cfg)
                if not fabric_mask(obs, cfg).any():
                    raise RuntimeError(f"empty fabric mask after episode {ep} step {step}")
                save_png(obs, root / _obs_name(ep, step + 1))
                man.transitions.append(Transition(ep, step, _obs_name(ep, step),
                                                  _obs_name(ep, step + 1), a, w))
            ep += 1
    except Exception as exc:           # keep what was collected, flag it
        log.error("collection aborted: %s", exc)
        man.valid, man.error = False, f"{type(exc).__name__}: {exc}"
    man.write()
    return man


# ---------------------------------------------------------------------------
# loaded dataset + goal predicate

def iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    u = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / u) if u else 1.0


@dataclass(frozen=True)
class GoalCriterion:
    """Thresholds of the goal-equivalence predicate."""
    min_iou: float = 0.9
    max_pixel_diff: float = 0.08
    min_layer_cover: float = 0.5
    min_layer_px: int = 6
    max_shift_px: int = 3


def _overlap(shape, dy: int, dx: int):
    H, W = shape
    sa = (slice(max(0, dy), H + min(0, dy)), slice(max(0, dx), W + min(0, dx)))
    sb = (slice(max(0, -dy), H + min(0, -dy)), slice(max(0, -dx), W + min(0, -dx)))
    return sa, sb


def registered_iou(a: np.ndarray, b: np.ndarray, cfg: WorkspaceConfig | None = None,
                   max_shift: int = 3) -> float:
    """Best fabric-mask IoU over integer shifts of at most ``max_shift`` px."""
    cfg = cfg or WorkspaceConfig()
    ma, mb = fabric_mask(a, cfg), fabric_mask(b, cfg)
    na, nb = int(ma.sum()), int(mb.sum())
    best = 0.0
    for dy in range(-max_shift, max_shift + 1):
        for dx in range(-max_shift, max_shift + 1):
            sa, sb = _overlap(ma.shape, dy, dx)
            inter = int(np.logical_and(ma[sa], mb[sb]).sum())
            u = na + nb - inter
            best = max(best, inter / u if u else 1.0)
    return best


def _layer_regions(levels: np.ndarray, min_px: int):
    """Per stacking level >= 1: (mask, component labels, sizes of big components)."""
    out = []
    for lv in range(1, int(levels.max()) + 1):
        m = levels >= lv
        lab, n = ndimage.label(m)
        sizes = np.bincount(lab.ravel(), minlength=n + 1)
        big = np.nonzero(sizes > min_px)[0]
        out.append((m, lab, sizes, big[big > 0]))
    return out


def _covered(regions_a, regions_b, sa, sb, cover: float) -> bool:
    """Every large layer component of ``a`` is mostly covered by ``b``."""
    for lv, (m, lab, sizes, big) in enumerate(regions_a):
        if big.size == 0:
            continue
        if lv >= len(regions_b):
            return False
        hit = np.bincount(lab[sa][regions_b[lv][0][sb]], minlength=lab.max() + 1)
        if np.any(hit[big] < cover * sizes[big]):
            return False
    return True


def goal_equal(a: np.ndarray, b: np.ndarray, cfg: WorkspaceConfig | None = None,
               crit: GoalCriterion = GoalCriterion()) -> bool:
    """Do two observations show the same cloth configuration?

    True when some integer shift of at most ``crit.max_shift_px`` aligns them
    with fabric-mask IoU >= ``min_iou``, mean absolute color difference over
    the union <= ``max_pixel_diff``, and every connected multi-layer region
    (per stacking level, larger than ``min_layer_px``) of either image at
    least ``min_layer_cover`` covered by the same level in the other.  The
    layer term is what separates a flat cloth from one with a small corner
    folded over, or three folded corners from four.  Reflexive and symmetric.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    cfg = cfg or WorkspaceConfig()
    ma, mb = fabric_mask(a, cfg), fabric_mask(b, cfg)
    na, nb = int(ma.sum()), int(mb.sum())
    if na == 0 or nb == 0:
        return na == nb
    if min(na, nb) / max(na, nb) < crit.min_iou:
        return False
    fa, fb = a.astype(np.float32) / 255.0, b.astype(np.float32) / 255.0
    ra = rb = None
    S = crit.max_shift_px
    for dy in range(-S, S + 1):
        for dx in range(-S, S + 1):
            sa, sb = _overlap(ma.shape, dy, dx)
            wa, wb = ma[sa], mb[sb]
            inter = int(np.logical_and(wa, wb).sum())
            union = na + nb - inter
            if inter / union < crit.min_iou:
                continue
            um = np.logical_or(wa, wb)
            diff = float(np.abs(fa[sa][um] - fb[sb][um]).mean(axis=-1).sum()) / union
            if diff > crit.max_pixel_diff:
                continue
            if ra is None:
                ra = _layer_regions(decode_levels(a, cfg), crit.min_layer_px)
                rb = _layer_regions(decode_levels(b, cfg), crit.min_layer_px)
            if (_covered(ra, rb, sa, sb, crit.min_layer_cover)
                    and _covered(rb, ra, sb, sa, crit.min_layer_cover)):
                return True
    return False


class Dataset:
    """A loaded transition store with cached goal-equivalence labels."""

    def __init__(self, manifest: DatasetManifest, images: list[np.ndarray],
                 pairs: list[tuple[int, int]]):
        self.manifest = manifest
        self.images = images                  # unique observations, uint8 (H, W, 3)
        self.pairs = pairs                    # (obs index, next_obs index) per transition
        self.cfg = manifest.workspace
        self.disc = manifest.disc
        self._eq: dict[tuple[int, int], bool] = {}

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def transitions(self) -> list[Transition]:
        return self.manifest.transitions

    def equal(self, i: int, j: int) -> bool:
        key = (min(i, j), max(i, j))
        if key not in self._eq:
            self._eq[key] = i == j or goal_equal(self.images[i], self.images[j], self.cfg)
        return self._eq[key]


def load_dataset(root) -> Dataset:
    """Read and validate a dataset directory."""
    man = DatasetManifest.read(root)
    if not man.valid:
        raise ValueError(f"dataset {root} is flagged invalid: {man.error}")
    if man.count == 0:
        raise ValueError(f"dataset {root} is empty")
    index: dict[str, int] = {}
    images: list[np.ndarray] = []

    def get(name: str) -> int:
        if name not in index:
            path = man.root / name
            if not path.exists():
                raise FileNotFoundError(f"missing observation {path}")
            img = load_png(path)
            if img.shape != (man.workspace.image_px,) * 2 + (3,):
                raise ValueError(f"{path} has shape {img.shape}")
            index[name] = len(images)
            images.append(img)
        return index[name]

    pairs = [(get(t.obs_file), get(t.next_obs_file)) for t in man.transitions]
    for t0, t1 in zip(man.transitions, man.transitions[1:]):
        if t1.episode_id == t0.episode_id and t1.step_id != t0.step_id + 1:
            raise ValueError(f"non-contiguous steps in episode {t0.episode_id}")
    return Dataset(man, images, pairs)


@dataclass(frozen=True)
class HerSample:
    transition: int
    obs: int           # image indices into Dataset.images
    next_obs: int
    goal: int
    reward: int
    achieved: bool     # goal drawn from the achieved next observation


def her_sample(ds: Dataset, batch_size: int, rng: np.random.Generator,
               achieved_prob: float = 0.5) -> list[HerSample]:
    """Hindsight relabelled batch, sampled with replacement.

    Each goal is the transition's own next observation with probability
    ``achieved_prob``, otherwise any stored observation drawn uniformly.
    """
    out = []
    for _ in range(batch_size):
        t = int(rng.integers(len(ds)))
        o, n = ds.pairs[t]
        achieved = bool(rng.random() < achieved_prob)
        g = n if achieved else int(rng.integers(len(ds.images)))
        out.append(HerSample(t, o, n, g, int(ds.equal(g, n)), achieved))
    return out


# ---------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class AugmentConfig:
    """Uniform rigid noise: translation in meters, rotation in degrees.

    The default translation is 5 px of the 200 px, 33 cm camera image.
    """
    max_translation_m: float = 0.00825
    max_rotation_deg: float = 5.0


def _rigid(img: np.ndarray, angle: float, shift_px, bg: np.ndarray,
           mask: np.ndarray | None = None) -> np.ndarray:
    """Bilinear rigid warp p' = c + R(angle)(p - c) + shift, background fill.

    With a cloth ``mask`` the colors are interpolated over cloth samples only
    and a pixel stays cloth when at least half of its interpolation weight
    lies on cloth.  Plain bilinear blending would smear every cloth edge
    into a ring of pixels that the color mask counts as cloth.
    """
    H, W = img.shape[:2]
    o_r, o_c = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    c, s = math.cos(angle), math.sin(angle)
    ox, oy = o_c - W / 2 - shift_px[0], o_r - H / 2 - shift_px[1]
    px = c * ox + s * oy + W / 2 - 0.5
    py = -s * ox + c * oy + H / 2 - 0.5
    m = np.ones((H, W), np.float32) if mask is None else mask.astype(np.float32)
    src = np.zeros((H + 2, W + 2, img.shape[2] + 1), np.float32)
    src[1:-1, 1:-1, :-1] = img * m[..., None]
    src[1:-1, 1:-1, -1] = m
    r0, c0 = np.floor(py).astype(int), np.floor(px).astype(int)
    fy, fx = (py - r0)[..., None], (px - c0)[..., None]

    def at(r, cc):
        return src[np.clip(r + 1, 0, H + 1), np.clip(cc + 1, 0, W + 1)]

    acc = (at(r0, c0) * (1 - fy) * (1 - fx) + at(r0, c0 + 1) * (1 - fy) * fx
           + at(r0 + 1, c0) * fy * (1 - fx) + at(r0 + 1, c0 + 1) * fy * fx)
    w = acc[..., -1:]
    if mask is None:
        out = acc[..., :-1] + (1 - w) * bg
    else:
        out = np.where(w >= 0.5, acc[..., :-1] / np.maximum(w, 1e-6), bg)
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def _draw(rng, acfg: AugmentConfig, cfg: WorkspaceConfig):
    t = acfg.max_translation_m / cfg.m_per_px
    r = math.radians(acfg.max_rotation_deg)
    return rng.uniform(-r, r), rng.uniform(-t, t, 2)


def augment(obs: np.ndarray, goal: np.ndarray, rng: np.random.Generator,
            cfg: WorkspaceConfig | None = None, acfg: AugmentConfig = AugmentConfig(),
            action: ActionIndex | None = None):
    """Independent small rigid perturbations of ``obs`` and ``goal``.

    Returns (obs', goal', action') where the action's pick pixel follows
    the obs perturbation (clamped to the image).  ``action'`` is None when
    no action is given.
    """
    cfg = cfg or WorkspaceConfig()
    bg = background_u8(cfg).astype(np.float32)
    ang_o, sh_o = _draw(rng, acfg, cfg)
    ang_g, sh_g = _draw(rng, acfg, cfg)
    obs2 = _rigid(obs, ang_o, sh_o, bg, fabric_mask(obs, cfg))
    goal2 = _rigid(goal, ang_g, sh_g, bg, fabric_mask(goal, cfg))
    new_action = None
    if action is not None:
        H, W = obs.shape[:2]
        x, y = action.col + 0.5 - W / 2, action.row + 0.5 - H / 2
        c, s = math.cos(ang_o), math.sin(ang_o)
        nx = c * x - s * y + W / 2 + sh_o[0]
        ny = s * x + c * y + H / 2 + sh_o[1]
        new_action = ActionIndex(int(np.clip(math.floor(ny), 0, H - 1)),
                                 int(np.clip(math.floor(nx), 0, W - 1)),
                                 action.rot_bin, action.scale_bin, action.q_value)
    return obs2, goal2, new_action
