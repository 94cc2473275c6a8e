"""Discrete fold actions realised by rotating and scaling the network input.

The network only knows one canonical unit action: "fold rightwards by
D_u".  Every other direction and distance is obtained by rotating the
(state || goal) image by the bin angle and scaling it by beta, so a unit fold
in the transformed frame is a fold of D_u / beta along -angle in the world.

Geometry.  Continuous image coordinates put pixel (row, col) at
(x, y) = (col + 0.5, row + 0.5), y pointing down.  A transform with angle
theta and scale beta maps an image point p to  S/2 + beta * R(theta) (p - H/2)
on a square canvas of side S.  The canvas is large enough to hold the whole
transformed image, so no part of the workspace is cropped away.  Rotations
are split into an exact quarter turn (``np.rot90``) and a residual angle in
[0, 90 degrees); this makes the pipeline exactly covariant under 90 degree
rotations of the scene, whatever the interpolation mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .qfcn import ContractError, QNetwork
from .sim import WorkspaceConfig, WorldAction, fabric_mask, save_png

_TWO_PI = 2 * math.pi


class NoValidAction(RuntimeError):
    """The fabric mask is empty, so there is nothing to pick."""


@dataclass(frozen=True)
class ActionDiscretization:
    rotation_bins: int = 8
    scale_factors: tuple[float, ...] = (2.0, 1.0, 0.5)
    unit_distance_m: float = 0.13

    def __post_init__(self):
        object.__setattr__(self, "scale_factors", tuple(float(b) for b in self.scale_factors))
        if self.rotation_bins < 1:
            raise ValueError("rotation_bins must be >= 1")
        if not self.scale_factors or min(self.scale_factors) <= 0:
            raise ValueError("scale factors must be positive")
        if self.unit_distance_m <= 0:
            raise ValueError("unit_distance_m must be positive")

    @classmethod
    def coarse(cls) -> "ActionDiscretization":
        """8 directions x {6.5, 13, 26} cm, the training discretization."""
        return cls(8, (2.0, 1.0, 0.5))

    @classmethod
    def fine(cls) -> "ActionDiscretization":
        """16 directions x {6.5, 8.67, 13, 19.5, 26} cm, used only at test time.

        The fourth factor is 2/3 (often written 0.66), which gives 19.5 cm.
        """
        return cls(16, (2.0, 1.5, 1.0, 2.0 / 3.0, 0.5))

    @property
    def n_scales(self) -> int:
        return len(self.scale_factors)

    def angle(self, rot_bin: int) -> float:
        return _TWO_PI * rot_bin / self.rotation_bins

    def check(self, rot_bin: int, scale_bin: int) -> None:
        if not (0 <= rot_bin < self.rotation_bins and 0 <= scale_bin < self.n_scales):
            raise ValueError(f"bins ({rot_bin}, {scale_bin}) outside "
                             f"{self.rotation_bins} x {self.n_scales}")

    def to_dict(self) -> dict:
        return {"rotation_bins": self.rotation_bins,
                "scale_factors": list(self.scale_factors),
                "unit_distance_m": self.unit_distance_m}

    @classmethod
    def from_dict(cls, d: dict) -> "ActionDiscretization":
        return cls(int(d["rotation_bins"]), tuple(d["scale_factors"]), float(d["unit_distance_m"]))


@dataclass(frozen=True)
class ActionIndex:
    row: int
    col: int
    rot_bin: int
    scale_bin: int
    q_value: float = 0.0


def fold_distance(scale_bin: int, disc: ActionDiscretization) -> float:
    """World fold distance D_u / beta of a scale bin."""
    disc.check(0, scale_bin)
    return disc.unit_distance_m / disc.scale_factors[scale_bin]


def to_world(action: ActionIndex, disc: ActionDiscretization, cfg: WorkspaceConfig,
             ablation: bool = False) -> WorldAction:
    """Pixel-centre pick point, direction -angle, distance D_u / beta.

    With ``ablation`` the scale bin is read as an output channel of the
    rotation-only network; distances are the same table.
    """
    disc.check(action.rot_bin, action.scale_bin)
    m = cfg.m_per_px
    direction = (-disc.angle(action.rot_bin)) % _TWO_PI
    if direction >= _TWO_PI:          # -tiny % 2pi can round up to 2pi
        direction = 0.0
    return WorldAction(((action.col + 0.5) * m, (action.row + 0.5) * m),
                       direction, fold_distance(action.scale_bin, disc))


# ---------------------------------------------------------------------------
# image transforms

def _split_angle(theta: float) -> tuple[int, float]:
    """theta = q * 90deg + residual with residual in [0, 90deg)."""
    q = int(math.floor(theta / (math.pi / 2) + 1e-9))
    resid = theta - q * math.pi / 2
    if resid < 1e-12:
        resid = 0.0
    return q % 4, resid


def canvas_size(H: int, theta0: float, beta: float) -> int:
    """Side of the (multiple of 8) canvas holding the transformed image."""
    extent = beta * H * (math.cos(theta0) + math.sin(theta0))
    return max(8, 8 * math.ceil(extent / 8 - 1e-9))


@lru_cache(maxsize=256)
def _sampling(H: int, theta0: float, beta: float, mode: str):
    """Gather indices (S, S) and weights (S, S, 1) into a background-padded
    (H+2)^2 image, for every canvas pixel."""
    S = canvas_size(H, theta0, beta)
    o = np.arange(S) + 0.5 - S / 2
    ox, oy = np.meshgrid(o, o)                     # x varies along columns
    c, s = math.cos(theta0), math.sin(theta0)
    # inverse map: p = H/2 + R(-theta0) o / beta, then to index space (-0.5)
    px = (c * ox + s * oy) / beta + H / 2 - 0.5
    py = (-s * ox + c * oy) / beta + H / 2 - 0.5
    P = H + 2                                      # one pixel of padding

    def flat(r, cc):
        ok = (r >= -1) & (r <= H) & (cc >= -1) & (cc <= H)
        return np.where(ok, (r + 1) * P + (cc + 1), 0)     # 0 = a padding pixel

    if mode == "nearest":
        r = np.floor(py + 0.5).astype(np.int64)
        cc = np.floor(px + 0.5).astype(np.int64)
        return S, (flat(r, cc),), (None,)
    if mode != "bilinear":
        raise ValueError(f"unknown interpolation mode {mode!r}")
    r0 = np.floor(py).astype(np.int64)
    c0 = np.floor(px).astype(np.int64)
    fy, fx = py - r0, px - c0
    idx = (flat(r0, c0), flat(r0, c0 + 1), flat(r0 + 1, c0), flat(r0 + 1, c0 + 1))
    wts = ((1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx)
    return S, idx, tuple(w[..., None].astype(np.float32) for w in wts)


@lru_cache(maxsize=256)
def _lookup(H: int, theta0: float, beta: float):
    """Canvas pixel (row, col) of every pixel centre of the quarter-turned image."""
    S = canvas_size(H, theta0, beta)
    p = np.arange(H) + 0.5 - H / 2
    px, py = np.meshgrid(p, p)
    c, s = math.cos(theta0), math.sin(theta0)
    ox = S / 2 + beta * (c * px - s * py)
    oy = S / 2 + beta * (s * px + c * py)
    rows = np.clip(np.floor(oy).astype(np.int64), 0, S - 1)
    cols = np.clip(np.floor(ox).astype(np.int64), 0, S - 1)
    return rows, cols


WINDOW_MARGIN_PX = 8


def window_size(content_q: np.ndarray, theta0: float, beta: float, S: int) -> int:
    """Side of the centred evaluation window for a quarter-turned content mask.

    The window is the smallest multiple of 8 holding every transformed cloth
    pixel plus ``WINDOW_MARGIN_PX``, capped at the full canvas ``S``.
    """
    r, c = np.nonzero(content_q)
    if r.size == 0:
        return S
    H = content_q.shape[0]
    px, py = c + 0.5 - H / 2, r + 0.5 - H / 2
    cs, sn = math.cos(theta0), math.sin(theta0)
    ext = max(float(np.abs(cs * px - sn * py).max()), float(np.abs(sn * px + cs * py).max()))
    rho = beta * (ext + 0.5 * (cs + sn))
    W = 8 * math.ceil((2 * rho + 2 * WINDOW_MARGIN_PX) / 8 - 1e-9)
    return int(min(S, max(8, W)))


def _as_hwc(state_goal) -> np.ndarray:
    x = np.asarray(state_goal)
    if x.ndim != 3:
        raise ContractError(f"expected a (6, H, W) or (H, W, 6) tensor, got {x.shape}")
    return x


def _background(cfg: WorkspaceConfig) -> np.ndarray:
    bg = np.asarray(cfg.background_color, np.float32)
    return np.concatenate([bg, bg])


def stack_input(state: np.ndarray, goal: np.ndarray) -> np.ndarray:
    """(H, W, 6) float32 in [0, 1] from two uint8 RGB observations."""
    if state.shape != goal.shape:
        raise ContractError(f"state {state.shape} and goal {goal.shape} differ in shape")
    if state.ndim != 3 or state.shape[-1] != 3 or state.shape[0] != state.shape[1]:
        raise ContractError(f"observations must be square (H, H, 3), got {state.shape}")
    x = np.concatenate([state, goal], axis=-1).astype(np.float32)
    if state.dtype == np.uint8:
        x /= 255.0
    return x


def _padded(A: np.ndarray, cfg: WorkspaceConfig) -> np.ndarray:
    H, C = A.shape[0], A.shape[-1]
    bg = _background(cfg)[:C] if C in (3, 6) else np.zeros(C, np.float32)
    Ap = np.empty((H + 2, H + 2, C), np.float32)
    Ap[:] = bg
    Ap[1:-1, 1:-1] = A
    return Ap.reshape(-1, C)


def _gather(Ap: np.ndarray, idx, wts, off: int, W: int) -> np.ndarray:
    win = (slice(off, off + W), slice(off, off + W))
    if wts[0] is None:
        return Ap[idx[0][win]]
    out = Ap[idx[0][win]] * wts[0][win]
    for i, w in zip(idx[1:], wts[1:]):
        out += Ap[i[win]] * w[win]
    return out


def _transform_hwc(x: np.ndarray, rot_bin: int, scale_bin: int, disc: ActionDiscretization,
                   cfg: WorkspaceConfig, mode: str) -> np.ndarray:
    H = x.shape[0]
    q, theta0 = _split_angle(disc.angle(rot_bin))
    S, idx, wts = _sampling(H, theta0, disc.scale_factors[scale_bin], mode)
    return _gather(_padded(np.rot90(x, -q, axes=(0, 1)), cfg), idx, wts, 0, S)


def transform_input(state_goal, rot_bin: int, scale_bin: int, disc: ActionDiscretization,
                    cfg: WorkspaceConfig | None = None, mode: str = "bilinear",
                    channels_first: bool = True) -> np.ndarray:
    """Rotate by the bin angle and scale by beta about the image centre.

    Input and output are (6, H, W) / (6, S, S) when ``channels_first``,
    else channels-last.  Off-image samples take the background color.
    S = H for axis-aligned unit-scale transforms; otherwise S is the
    smallest multiple of 8 that holds the whole transformed image.
    """
    disc.check(rot_bin, scale_bin)
    cfg = cfg or WorkspaceConfig()
    x = _as_hwc(state_goal)
    if channels_first:
        x = np.moveaxis(x, 0, -1)
    if x.shape[0] != x.shape[1]:
        raise ContractError(f"input must be square, got {x.shape[:2]}")
    out = _transform_hwc(np.asarray(x, np.float32), rot_bin, scale_bin, disc, cfg, mode)
    return np.moveaxis(out, -1, 0) if channels_first else out


def _to_quarter(H: int, row: int, col: int, q: int) -> tuple[int, int]:
    """Position of original pixel (row, col) in A = rot90(x, -q)."""
    r, c = row, col
    for _ in range(q):
        r, c = c, H - 1 - r
    return r, c


def heatmap_pixel(H: int, row: int, col: int, rot_bin: int, scale_bin: int,
                  disc: ActionDiscretization) -> tuple[int, int]:
    """Full-canvas pixel whose heatmap value scores original pixel (row, col)."""
    q, theta0 = _split_angle(disc.angle(rot_bin))
    rows, cols = _lookup(H, theta0, disc.scale_factors[scale_bin])
    r, c = _to_quarter(H, row, col, q)
    return int(rows[r, c]), int(cols[r, c])


class _Views:
    """Network inputs of every (rotation, scale) transform of one state/goal pair.

    Quarter-turned, padded copies are shared between the transforms that
    need them.  With ``window`` the network sees only a centred crop of the
    canvas that covers the cloth of both images.
    """

    def __init__(self, state, goal, disc: ActionDiscretization, cfg: WorkspaceConfig,
                 mode: str, window: bool):
        self.x = stack_input(state, goal)
        self.H = self.x.shape[0]
        self.disc, self.cfg, self.mode = disc, cfg, mode
        self.content = (fabric_mask(state, cfg) | fabric_mask(goal, cfg)) if window else None
        self._pad: dict[int, tuple[np.ndarray, np.ndarray | None]] = {}

    def get(self, rot_bin: int, scale_bin: int):
        """(input (1, W, W, 6), q, theta0, beta, window offset)."""
        q, theta0 = _split_angle(self.disc.angle(rot_bin))
        beta = self.disc.scale_factors[scale_bin]
        if q not in self._pad:
            cq = None if self.content is None else np.rot90(self.content, -q)
            self._pad[q] = (_padded(np.rot90(self.x, -q, axes=(0, 1)), self.cfg), cq)
        Ap, cq = self._pad[q]
        S, idx, wts = _sampling(self.H, theta0, beta, self.mode)
        W = S if cq is None else window_size(cq, theta0, beta, S)
        off = (S - W) // 2
        return _gather(Ap, idx, wts, off, W)[None], q, theta0, beta, off

    def to_original(self, y: np.ndarray, q: int, theta0: float, beta: float, off: int):
        """Heatmap resampled at original pixels.  Pixels outside the window
        (never on the cloth) read the nearest window border value."""
        rows, cols = _lookup(self.H, theta0, beta)
        W = y.shape[0]
        return np.rot90(y[np.clip(rows - off, 0, W - 1), np.clip(cols - off, 0, W - 1)], q,
                        axes=(0, 1))


# ---------------------------------------------------------------------------
# Q maps and greedy selection

def is_ablation(net: QNetwork) -> bool:
    return net.out_channels > 1


def q_maps(net: QNetwork, state: np.ndarray, goal: np.ndarray, disc: ActionDiscretization,
           cfg: WorkspaceConfig | None = None, mode: str = "bilinear",
           window: bool = True) -> np.ndarray:
    """Q-values (rot_bins, n_scales, H, W) indexed by original-frame pick pixel.

    A multi-channel (ablation) network is run on rotations only; its output
    channel c plays the role of scale bin c.
    """
    cfg = cfg or WorkspaceConfig()
    ablation = is_ablation(net)
    if ablation and net.out_channels != disc.n_scales:
        raise ContractError(f"ablation head has {net.out_channels} channels for "
                            f"{disc.n_scales} distances")
    views = _Views(state, goal, _unit_scale(disc) if ablation else disc, cfg, mode, window)
    H = views.H
    out = np.empty((disc.rotation_bins, disc.n_scales, H, H), np.float32)
    for k in range(disc.rotation_bins):
        for s in range(1 if ablation else disc.n_scales):
            t, q, theta0, beta, off = views.get(k, s)
            y = net.forward(t)[0]
            if ablation:
                for ch in range(disc.n_scales):
                    out[k, ch] = views.to_original(y[..., ch], q, theta0, beta, off)
            else:
                out[k, s] = views.to_original(y[..., 0], q, theta0, beta, off)
    return out


def _unit_scale(disc: ActionDiscretization) -> ActionDiscretization:
    return ActionDiscretization(disc.rotation_bins, (1.0,), disc.unit_distance_m)


def best_action(qm: np.ndarray, mask: np.ndarray) -> ActionIndex:
    """Masked argmax with lexicographic (rot, scale, row, col) tie-breaking."""
    mask = np.asarray(mask, bool)
    if not mask.any():
        raise NoValidAction("fabric mask is empty")
    vals = np.where(mask[None, None], qm, -np.inf)
    k, s, r, c = np.unravel_index(int(np.argmax(vals)), vals.shape)
    return ActionIndex(int(r), int(c), int(k), int(s), float(qm[k, s, r, c]))


def select_action(net: QNetwork, state: np.ndarray, goal: np.ndarray,
                  disc: ActionDiscretization, mask: np.ndarray | None = None,
                  cfg: WorkspaceConfig | None = None, mode: str = "bilinear",
                  window: bool = True) -> ActionIndex:
    """Greedy action over every pick pixel on the fabric, rotation and scale."""
    cfg = cfg or WorkspaceConfig()
    if mask is None:
        mask = fabric_mask(state, cfg)
    return best_action(q_maps(net, state, goal, disc, cfg, mode, window), mask)


def transformed_for_action(state: np.ndarray, goal: np.ndarray, action: ActionIndex,
                           disc: ActionDiscretization, cfg: WorkspaceConfig,
                           ablation: bool = False, mode: str = "bilinear",
                           window: bool = True):
    """Network input (1, W, W, 6) and the (row, col, channel) that scores ``action``."""
    disc.check(action.rot_bin, action.scale_bin)
    d = _unit_scale(disc) if ablation else disc
    s = 0 if ablation else action.scale_bin
    views = _Views(state, goal, d, cfg, mode, window)
    t, q, theta0, beta, off = views.get(action.rot_bin, s)
    rows, cols = _lookup(views.H, theta0, beta)
    r, c = _to_quarter(views.H, action.row, action.col, q)
    ch = action.scale_bin if ablation else 0
    return t, (int(rows[r, c]) - off, int(cols[r, c]) - off, ch)


def evaluate_q(net: QNetwork, obs: np.ndarray, goal: np.ndarray, action: ActionIndex,
               disc: ActionDiscretization, cfg: WorkspaceConfig | None = None,
               mode: str = "bilinear", window: bool = True) -> float:
    """Q(obs, action | goal) from the single transform that scores ``action``."""
    cfg = cfg or WorkspaceConfig()
    t, (r, c, ch) = transformed_for_action(obs, goal, action, disc, cfg, is_ablation(net),
                                           mode, window)
    return float(net.forward(t)[0, r, c, ch])


def ablation_forward(net: QNetwork, state_goal) -> np.ndarray:
    """Three (one per distance) heatmaps (3, H, W) of the rotation-only network."""
    x = _as_hwc(state_goal)
    if x.shape[0] != 6:
        raise ContractError(f"expected (6, H, W), got {x.shape}")
    return np.moveaxis(net.forward(np.moveaxis(x, 0, -1)[None])[0], -1, 0)


# ---------------------------------------------------------------------------
# debugging output

def _colormap(v: np.ndarray) -> np.ndarray:
    """Dark blue -> red -> yellow ramp for values in [0, 1]."""
    anchors = np.array([[0.05, 0.03, 0.25], [0.55, 0.05, 0.45], [0.95, 0.35, 0.10],
                        [1.00, 0.95, 0.40]])
    t = np.clip(v, 0, 1) * (len(anchors) - 1)
    i = np.minimum(t.astype(int), len(anchors) - 2)
    f = (t - i)[..., None]
    return np.round(255 * (anchors[i] * (1 - f) + anchors[i + 1] * f)).astype(np.uint8)


def dump_heatmaps(qm: np.ndarray, out_dir, prefix: str = "q") -> list[Path]:
    """One PNG per (rotation, scale) map, normalized over all maps together."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lo, hi = float(qm.min()), float(qm.max())
    span = hi - lo if hi > lo else 1.0
    paths = []
    for k in range(qm.shape[0]):
        for s in range(qm.shape[1]):
            p = out_dir / f"{prefix}_rot{k:02d}_scale{s}.png"
            save_png(_colormap((qm[k, s] - lo) / span), p)
            paths.append(p)
    return paths
