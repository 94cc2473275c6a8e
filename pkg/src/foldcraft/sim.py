"""Deterministic top-down cloth simulator.

The cloth is a ``grid_n x grid_n`` particle sheet lying on a square table.
Folds are executed kinematically: the grasped region is swept over the fold
line (the perpendicular bisector of the pick and place points), stretched
edges are relaxed by position-based constraint projection and the moved
material is re-stacked on top of whatever it landed on.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

RGB = tuple[float, float, float]


@dataclass(frozen=True)
class WorkspaceConfig:
    side_m: float = 0.33
    image_px: int = 64
    fabric_side_m: float = 0.30
    grid_n: int = 25
    grasp_radius_m: float = 0.02
    fabric_color: RGB = (0.86, 0.52, 0.30)
    background_color: RGB = (0.12, 0.12, 0.14)
    layer_shade: float = 0.08
    min_shade: float = 0.44
    mask_threshold: float = 30 / 255
    pbd_iterations: int = 30
    max_stretch: float = 1.15
    layer_thickness_m: float = 0.002
    drop_jitter_m: float = 0.002

    def __post_init__(self):
        if not self.side_m > self.fabric_side_m > 0:
            raise ValueError("need side_m > fabric_side_m > 0")
        if self.image_px < 32:
            raise ValueError("image_px must be >= 32")
        if self.grid_n < 8:
            raise ValueError("grid_n must be >= 8")

    @classmethod
    def full_resolution(cls, **kw) -> "WorkspaceConfig":
        """The 200 px camera geometry of the original robot setup."""
        return cls(image_px=200, **kw)

    @property
    def m_per_px(self) -> float:
        return self.side_m / self.image_px

    @property
    def rest_length_m(self) -> float:
        return self.fabric_side_m / (self.grid_n - 1)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "WorkspaceConfig":
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)


@dataclass(frozen=True, eq=False)
class FabricState:
    """Immutable cloth snapshot.

    ``positions[i, j]`` is particle (row i, column j) in meters; x runs along
    image columns and y along image rows.  ``layer_rank`` is the integer
    stacking level (0 = lying on the table).
    """

    positions: np.ndarray
    rest_length_m: float
    layer_rank: np.ndarray
    rng_seed: int = 0

    def __post_init__(self):
        pos = np.array(self.positions, dtype=np.float64)
        rank = np.array(self.layer_rank, dtype=np.int32)
        n = pos.shape[0]
        if pos.shape != (n, n, 3) or rank.shape != (n, n):
            raise ValueError("positions must be (n, n, 3) and layer_rank (n, n)")
        if not np.isfinite(pos).all():
            raise ValueError("non-finite particle positions")
        pos.flags.writeable = False
        rank.flags.writeable = False
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "layer_rank", rank)

    @property
    def grid_n(self) -> int:
        return self.positions.shape[0]

    def centroid(self) -> np.ndarray:
        return self.positions[..., :2].reshape(-1, 2).mean(axis=0)

    def n_layers(self) -> int:
        return int(self.layer_rank.max()) + 1

    def equals(self, other: "FabricState") -> bool:
        return (np.array_equal(self.positions, other.positions)
                and np.array_equal(self.layer_rank, other.layer_rank))


@dataclass(frozen=True)
class WorldAction:
    pick_xy: tuple[float, float]
    direction_rad: float
    distance_m: float

    def validate(self, cfg: WorkspaceConfig) -> None:
        vals = (*self.pick_xy, self.direction_rad, self.distance_m)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite action {self}")
        x, y = self.pick_xy
        if not (0 <= x <= cfg.side_m and 0 <= y <= cfg.side_m):
            raise ValueError(f"pick {self.pick_xy} outside workspace")
        if self.distance_m < 0:
            raise ValueError("distance_m must be >= 0")
        if self.distance_m > cfg.side_m * math.sqrt(2):
            raise ValueError("distance_m exceeds the workspace diagonal")
        if not 0 <= self.direction_rad < 2 * math.pi:
            raise ValueError("direction_rad must lie in [0, 2pi)")


# ---------------------------------------------------------------------------
# grid topology

def _edges(n: int) -> list[tuple[np.ndarray, np.ndarray, float]]:
    """Constraint batches (a, b, rest factor); no particle repeats in a batch."""
    idx = np.arange(n * n).reshape(n, n)
    batches = []
    for par in (0, 1):
        batches.append((idx[:, par:-1:2].ravel(), idx[:, par + 1::2].ravel(), 1.0))
        batches.append((idx[par:-1:2, :].ravel(), idx[par + 1::2, :].ravel(), 1.0))
        batches.append((idx[par:-1:2, :-1].ravel(), idx[par + 1::2, 1:].ravel(), math.sqrt(2)))
        batches.append((idx[par:-1:2, 1:].ravel(), idx[par + 1::2, :-1].ravel(), math.sqrt(2)))
    return [(a, b, f) for a, b, f in batches if len(a)]


_EDGE_CACHE: dict[int, list] = {}


def edge_batches(n: int):
    if n not in _EDGE_CACHE:
        _EDGE_CACHE[n] = _edges(n)
    return _EDGE_CACHE[n]


def max_edge_ratio(state: FabricState) -> float:
    xy = state.positions[..., :2].reshape(-1, 2)
    worst = 0.0
    for a, b, f in edge_batches(state.grid_n):
        d = np.linalg.norm(xy[a] - xy[b], axis=1) / (f * state.rest_length_m)
        worst = max(worst, float(d.max()))
    return worst


def _component(seed_mask: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    """Grid cells in ``allowed`` 4-connected to ``seed_mask``."""
    comp = seed_mask & allowed
    while True:
        grown = comp.copy()
        grown[1:] |= comp[:-1]
        grown[:-1] |= comp[1:]
        grown[:, 1:] |= comp[:, :-1]
        grown[:, :-1] |= comp[:, 1:]
        grown &= allowed
        if np.array_equal(grown, comp):
            return comp
        comp = grown


def _project_constraints(xy: np.ndarray, inv_mass: np.ndarray, rest: float,
                         n: int, iterations: int, max_stretch: float) -> np.ndarray:
    """Stretch-only distance projection, Gauss-Seidel over independent batches."""
    xy = xy.reshape(-1, 2).copy()
    batches = edge_batches(n)

    def sweep():
        for a, b, f in batches:
            d = xy[b] - xy[a]
            length = np.sqrt((d ** 2).sum(1))
            target = f * rest
            wa, wb = inv_mass[a], inv_mass[b]
            wsum = wa + wb
            over = (length > target) & (wsum > 0)
            if not over.any():
                continue
            a_, b_, d_, l_ = a[over], b[over], d[over], length[over]
            corr = ((l_ - target) / (wsum[over] * l_))[:, None] * d_
            xy[a_] += wa[over][:, None] * corr
            xy[b_] -= wb[over][:, None] * corr

    for _ in range(iterations):
        sweep()
    # keep going if the default budget did not reach the stretch bound
    for _ in range(2000):
        worst = max(float((np.linalg.norm(xy[b] - xy[a], axis=1) / (f * rest)).max())
                    for a, b, f in batches)
        if worst <= max_stretch:
            break
        sweep()
    return xy.reshape(n, n, 2)


# ---------------------------------------------------------------------------
# construction

def flat_state(cfg: WorkspaceConfig, offset_xy=(0.0, 0.0), angle_rad: float = 0.0,
               rng_seed: int = 0) -> FabricState:
    """Flat cloth centred in the workspace (optionally shifted/rotated)."""
    n = cfg.grid_n
    rest = cfg.rest_length_m
    g = (np.arange(n) - (n - 1) / 2) * rest
    x, y = np.meshgrid(g, g)
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    xr, yr = c * x - s * y, s * x + c * y
    centre = cfg.side_m / 2
    pos = np.zeros((n, n, 3))
    pos[..., 0] = xr + centre + offset_xy[0]
    pos[..., 1] = yr + centre + offset_xy[1]
    return FabricState(pos, rest, np.zeros((n, n), np.int32), rng_seed)


def _restack(xy_new: np.ndarray, levels: np.ndarray, groups: list[tuple[np.ndarray, bool]],
             rest: float) -> np.ndarray:
    """Assign new stacking levels to moved groups, placed one after another.

    Each group is (mask, flipped).  A moved particle lands on the highest
    already-placed particle within 0.75 rest lengths, or on the table.
    """
    moved_any = np.zeros(levels.shape, bool)
    for m, _ in groups:
        moved_any |= m
    placed = ~moved_any
    new_levels = levels.copy()
    flat_xy = xy_new.reshape(-1, 2)
    for m, flipped in groups:
        if not m.any():
            continue
        src = levels[m]
        rel = (src.max() - src) if flipped else (src - src.min())
        pts = flat_xy[m.ravel()]
        base = np.full(len(pts), -1)
        if placed.any():
            ref = flat_xy[placed.ravel()]
            ref_lv = new_levels[placed]
            d2 = ((pts[:, None, :] - ref[None, :, :]) ** 2).sum(-1)
            near = d2 <= (0.75 * rest) ** 2
            cand = np.where(near, ref_lv[None, :], -1)
            base = cand.max(axis=1)
        new_levels[m] = base + 1 + rel
        placed = placed | m
    return new_levels


def _fit_workspace(xy: np.ndarray, cfg: WorkspaceConfig) -> np.ndarray:
    lo, hi = 1e-6, cfg.side_m - 1e-6
    mn, mx = xy.reshape(-1, 2).min(0), xy.reshape(-1, 2).max(0)
    shift = np.zeros(2)
    for k in range(2):
        if mx[k] - mn[k] <= hi - lo:
            if mn[k] < lo:
                shift[k] = lo - mn[k]
            elif mx[k] > hi:
                shift[k] = hi - mx[k]
    return np.clip(xy + shift, lo, hi)


# ---------------------------------------------------------------------------
# dynamics

def execute_fold(state: FabricState, action: WorldAction, cfg: WorkspaceConfig) -> FabricState:
    """Pick, lift, drag and drop.

    Particles within the grasp radius are lifted and carried ``distance_m``
    along ``direction_rad``.  Material on the pick side of the fold line that
    is connected to the grasp flips over the line; if the cloth trailing
    behind the grasp is longer than the lift (half the fold distance) it is
    dragged instead and only the strip between grasp and fold line flips.
    A cloth pushed past the workspace edge is shifted rigidly back into
    view.  A missed grasp returns the state unchanged.
    """
    action.validate(cfg)
    n = state.grid_n
    rest = state.rest_length_m
    xy = state.positions[..., :2]
    pick = np.asarray(action.pick_xy, dtype=np.float64)
    grasp = ((xy - pick) ** 2).sum(-1) <= cfg.grasp_radius_m ** 2
    if not grasp.any():
        return state

    d = action.distance_m
    u = np.array([math.cos(action.direction_rad), math.sin(action.direction_rad)])
    along = (xy - pick) @ u            # signed coordinate along the fold direction
    s = along - d / 2                  # signed distance to the fold line
    flap = _component(grasp, s < 0)
    behind = flap & (along < 0)
    extent = float(-along[behind].min()) if behind.any() else 0.0

    new_xy = xy.copy()
    if extent <= d / 2 + 1e-9:
        reflect, drag = flap, np.zeros_like(flap)
    else:
        reflect, drag = flap & ~behind, behind
    if not flap.any():
        drag = grasp
    new_xy[reflect] = xy[reflect] - 2 * s[reflect][:, None] * u
    new_xy[drag] = xy[drag] + d * u

    levels = _restack(new_xy, state.layer_rank, [(reflect, True), (drag, False)], rest)

    inv_mass = np.where(grasp, 0.0, 1.0).ravel()
    new_xy = _project_constraints(new_xy, inv_mass, rest, n, cfg.pbd_iterations,
                                  cfg.max_stretch)
    new_xy = _fit_workspace(new_xy, cfg)
    pos = np.concatenate([new_xy, (levels * cfg.layer_thickness_m)[..., None]], axis=-1)
    return FabricState(pos, rest, levels, state.rng_seed)


def soft_reset(state: FabricState, cfg: WorkspaceConfig, seed: int) -> FabricState:
    """Grasp the particle nearest the centroid, lift the cloth and drop it.

    The cloth hangs from the grasp and lands spread around the drop point
    with a random orientation; zero to two random flaps fold over on landing
    and every particle gets a little placement noise.  The drop point is the
    workspace centre plus a small random offset, so the landed centroid stays
    in the central third of the table.
    """
    rng = np.random.default_rng(seed)
    n = state.grid_n
    xy = state.positions[..., :2].reshape(-1, 2)
    centre_idx = int(np.argmin(((xy - xy.mean(0)) ** 2).sum(1)))
    gi, gj = divmod(centre_idx, n)

    landed = flat_state(cfg, angle_rad=float(rng.uniform(0, 2 * math.pi)), rng_seed=seed)
    # shift so the grasped particle sits at the workspace centre
    lxy = landed.positions[..., :2]
    lxy = lxy - lxy[gi, gj] + cfg.side_m / 2
    cur = FabricState(np.concatenate([lxy, np.zeros((n, n, 1))], -1), landed.rest_length_m,
                      landed.layer_rank, seed)
    for _ in range(int(rng.integers(0, 3))):
        pxy = cur.positions[..., :2].reshape(-1, 2)
        p = pxy[int(rng.integers(len(pxy)))]
        to_c = pxy.mean(0) - p
        heading = math.atan2(to_c[1], to_c[0]) + rng.uniform(-math.pi / 3, math.pi / 3)
        dist = float(rng.uniform(0.04, 0.20))
        p = np.clip(p, 0.0, cfg.side_m)
        cur = execute_fold(cur, WorldAction((float(p[0]), float(p[1])),
                                            heading % (2 * math.pi), dist), cfg)

    pxy = cur.positions[..., :2].copy()
    pxy += rng.normal(0.0, cfg.drop_jitter_m, size=pxy.shape)
    target = cfg.side_m / 2 + rng.uniform(-cfg.side_m / 12, cfg.side_m / 12, size=2)
    pxy += target - pxy.reshape(-1, 2).mean(0)
    pxy = _project_constraints(pxy, np.ones(n * n), cur.rest_length_m, n,
                               cfg.pbd_iterations, cfg.max_stretch)
    pxy = _fit_workspace(pxy, cfg)
    pos = np.concatenate([pxy, (cur.layer_rank * cfg.layer_thickness_m)[..., None]], -1)
    return FabricState(pos, cur.rest_length_m, cur.layer_rank, seed)


# ---------------------------------------------------------------------------
# rendering

def _triangles(n: int) -> np.ndarray:
    idx = np.arange(n * n).reshape(n, n)
    a, b, c, d = idx[:-1, :-1], idx[1:, :-1], idx[:-1, 1:], idx[1:, 1:]
    t1 = np.stack([a, b, c], -1).reshape(-1, 3)
    t2 = np.stack([d, c, b], -1).reshape(-1, 3)
    return np.concatenate([t1, t2])


def coverage(state: FabricState, cfg: WorkspaceConfig) -> np.ndarray:
    """Per-pixel stacking level of the topmost cloth triangle, -1 for table."""
    H = cfg.image_px
    tris = _triangles(state.grid_n)
    pts = state.positions[..., :2].reshape(-1, 2) / cfg.m_per_px
    lv = state.layer_rank.ravel()
    P = pts[tris]                                    # (T, 3, 2)
    tri_lv = lv[tris].max(1)
    x0, y0 = P[:, 0, 0], P[:, 0, 1]
    e1 = P[:, 1] - P[:, 0]
    e2 = P[:, 2] - P[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    ok = np.abs(det) > 1e-12
    P, tri_lv, x0, y0, e1, e2, det = (a[ok] for a in (P, tri_lv, x0, y0, e1, e2, det))
    tri_id = np.nonzero(ok)[0]

    cmin = np.ceil(P[..., 0].min(1) - 0.5).astype(int)
    cmax = np.floor(P[..., 0].max(1) - 0.5).astype(int)
    rmin = np.ceil(P[..., 1].min(1) - 0.5).astype(int)
    rmax = np.floor(P[..., 1].max(1) - 0.5).astype(int)
    kc = int(max(1, (cmax - cmin).max() + 1))
    kr = int(max(1, (rmax - rmin).max() + 1))
    oc, orr = np.meshgrid(np.arange(kc), np.arange(kr))
    cols = cmin[:, None] + oc.ravel()[None, :]
    rows = rmin[:, None] + orr.ravel()[None, :]
    px = cols + 0.5 - x0[:, None]
    py = rows + 0.5 - y0[:, None]
    l1 = (px * e2[:, 1:2] - py * e2[:, 0:1]) / det[:, None]
    l2 = (py * e1[:, 0:1] - px * e1[:, 1:2]) / det[:, None]
    eps = 1e-9
    inside = (l1 >= -eps) & (l2 >= -eps) & (l1 + l2 <= 1 + eps)
    inside &= (cols >= 0) & (cols < H) & (rows >= 0) & (rows < H)
    inside &= (cols <= cmax[:, None]) & (rows <= rmax[:, None])

    ntri = 2 * (state.grid_n - 1) ** 2
    key = (tri_lv[:, None].astype(np.int64) * ntri + tri_id[:, None])
    buf = np.full(H * H, -1, dtype=np.int64)
    flat = rows * H + cols
    np.maximum.at(buf, flat[inside], np.broadcast_to(key, flat.shape)[inside])
    out = np.where(buf >= 0, buf // ntri, -1)
    return out.reshape(H, H)


def shade_colors(cfg: WorkspaceConfig, max_level: int = 16) -> np.ndarray:
    """uint8 RGB color for each stacking level 0..max_level-1."""
    f = np.maximum(1.0 - cfg.layer_shade * np.arange(max_level), cfg.min_shade)
    cols = np.asarray(cfg.fabric_color)[None, :] * f[:, None]
    return np.round(np.clip(cols, 0, 1) * 255).astype(np.uint8)


def background_u8(cfg: WorkspaceConfig) -> np.ndarray:
    return np.round(np.asarray(cfg.background_color) * 255).astype(np.uint8)


def render(state: FabricState, cfg: WorkspaceConfig) -> np.ndarray:
    """Orthographic top-down RGB image (H, W, 3) uint8."""
    lv = coverage(state, cfg)
    pal = shade_colors(cfg, max(16, int(lv.max()) + 1))
    img = np.empty(lv.shape + (3,), np.uint8)
    img[:] = background_u8(cfg)
    cloth = lv >= 0
    img[cloth] = pal[lv[cloth]]
    return img


def fabric_mask(obs: np.ndarray, cfg: WorkspaceConfig) -> np.ndarray:
    """Pixels whose color is farther than the threshold from the background."""
    diff = obs.astype(np.float32) / 255.0 - np.asarray(cfg.background_color, np.float32)
    return np.sqrt((diff ** 2).sum(-1)) > cfg.mask_threshold


def decode_levels(obs: np.ndarray, cfg: WorkspaceConfig) -> np.ndarray:
    """Recover stacking levels from shading (-1 where there is no cloth)."""
    base = float(np.sum(cfg.fabric_color))
    ratio = obs.astype(np.float32).sum(-1) / 255.0 / base
    lv = np.round((1.0 - ratio) / cfg.layer_shade).astype(np.int32)
    max_lv = int(math.floor((1.0 - cfg.min_shade) / cfg.layer_shade))
    lv = np.clip(lv, 0, max_lv)
    return np.where(fabric_mask(obs, cfg), lv, -1)


# ---------------------------------------------------------------------------
# persistence

def save_png(obs: np.ndarray, path) -> None:
    Image.fromarray(np.ascontiguousarray(obs, dtype=np.uint8), "RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def png_bytes(obs: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(obs, dtype=np.uint8), "RGB").save(buf, format="PNG")
    return buf.getvalue()


_STATE_MAGIC = b"FCST"


def state_to_bytes(state: FabricState) -> bytes:
    """Flat little-endian record: magic, u32 version, u32 grid_n, f64 rest
    length, i64 seed, f64 positions (n*n*3, row-major), i32 levels (n*n)."""
    head = _STATE_MAGIC + struct.pack("<IIdq", 1, state.grid_n, state.rest_length_m,
                                      state.rng_seed)
    return (head + state.positions.astype("<f8").tobytes()
            + state.layer_rank.astype("<i4").tobytes())


def state_from_bytes(data: bytes) -> FabricState:
    if data[:4] != _STATE_MAGIC:
        raise ValueError("not a fabric state record")
    version, n, rest, seed = struct.unpack_from("<IIdq", data, 4)
    if version != 1:
        raise ValueError(f"unsupported state version {version}")
    off = 4 + struct.calcsize("<IIdq")
    npos = n * n * 3
    pos = np.frombuffer(data, "<f8", npos, off).reshape(n, n, 3)
    lv = np.frombuffer(data, "<i4", n * n, off + 8 * npos).reshape(n, n)
    return FabricState(pos.astype(np.float64), rest, lv.astype(np.int32), seed)


def save_state(state: FabricState, path) -> None:
    Path(path).write_bytes(state_to_bytes(state))


def load_state(path) -> FabricState:
    return state_from_bytes(Path(path).read_bytes())
