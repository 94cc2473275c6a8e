import math

import numpy as np
import pytest

from foldcraft.sim import (FabricState, WorkspaceConfig, WorldAction, background_u8, coverage,
                           decode_levels, execute_fold, fabric_mask, flat_state, load_png,
                           load_state, max_edge_ratio, render, save_png, save_state, soft_reset,
                           state_from_bytes, state_to_bytes)


def corner_xy(state, i, j):
    return tuple(float(v) for v in state.positions[i, j, :2])


def test_config_validation():
    with pytest.raises(ValueError):
        WorkspaceConfig(side_m=0.2, fabric_side_m=0.3)
    with pytest.raises(ValueError):
        WorkspaceConfig(image_px=16)
    with pytest.raises(ValueError):
        WorkspaceConfig(grid_n=4)
    cfg = WorkspaceConfig()
    assert WorkspaceConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.rest_length_m == pytest.approx(0.30 / 24)


def test_flat_cloth_width_at_camera_scale():
    cfg = WorkspaceConfig.full_resolution()
    mask = fabric_mask(render(flat_state(cfg), cfg), cfg)
    width = mask.any(0).sum()
    assert abs(width - 0.30 / 0.33 * 200) <= 1.5


def test_mask_matches_renderer_coverage(cfg):
    for st in (flat_state(cfg), soft_reset(flat_state(cfg), cfg, 3)):
        assert np.array_equal(fabric_mask(render(st, cfg), cfg), coverage(st, cfg) >= 0)


def test_background_exact_and_empty_mask(cfg):
    obs = render(flat_state(cfg), cfg)
    assert (obs[0, 0] == background_u8(cfg)).all()
    blank = np.broadcast_to(background_u8(cfg), obs.shape).copy()
    assert not fabric_mask(blank, cfg).any()


def test_zero_distance_fold_is_near_identity(cfg):
    st = flat_state(cfg)
    out = execute_fold(st, WorldAction(corner_xy(st, 12, 12), 0.0, 0.0), cfg)
    disp = np.linalg.norm(out.positions[..., :2] - st.positions[..., :2], axis=-1)
    assert disp.max() < st.rest_length_m / 2


def test_diagonal_fold_halves_area(cfg):
    st = flat_state(cfg)
    n = st.grid_n
    # pick the (0, 0) corner and carry it onto the opposite corner
    x0, y0 = corner_xy(st, 0, 0)
    x1, y1 = corner_xy(st, n - 1, n - 1)
    d = math.hypot(x1 - x0, y1 - y0)
    out = execute_fold(st, WorldAction((x0, y0), math.atan2(y1 - y0, x1 - x0), d), cfg)
    a0 = fabric_mask(render(st, cfg), cfg).sum()
    a1 = fabric_mask(render(out, cfg), cfg).sum()
    assert 0.45 <= a1 / a0 <= 0.55
    assert out.n_layers() == 2


def test_missed_grasp_returns_same_state(cfg):
    st = flat_state(cfg, offset_xy=(0.01, 0.01))
    out = execute_fold(st, WorldAction((0.002, 0.002), 0.0, 0.1), cfg)
    assert out is st


def test_fold_produces_two_shades(cfg):
    st = flat_state(cfg)
    x, y = corner_xy(st, 12, 0)
    out = execute_fold(st, WorldAction((x, y), 0.0, 0.13), cfg)
    obs = render(out, cfg)
    shades = {tuple(p) for p in obs[fabric_mask(obs, cfg)]}
    assert len(shades) >= 2
    assert set(np.unique(decode_levels(obs, cfg))) == {-1, 0, 1}


@pytest.mark.parametrize("bad", [
    WorldAction((float("nan"), 0.1), 0.0, 0.1),
    WorldAction((0.1, 0.1), 0.0, 1.0),
    WorldAction((0.1, 0.1), 0.0, -0.1),
    WorldAction((0.5, 0.1), 0.0, 0.1),
])
def test_fold_rejects_invalid_actions(cfg, bad):
    with pytest.raises(ValueError):
        execute_fold(flat_state(cfg), bad, cfg)


def test_fold_keeps_edges_and_is_deterministic(cfg):
    rng = np.random.default_rng(0)
    st = soft_reset(flat_state(cfg), cfg, 0)
    for _ in range(10):
        obs = render(st, cfg)
        r, c = np.argwhere(fabric_mask(obs, cfg))[rng.integers(fabric_mask(obs, cfg).sum())]
        act = WorldAction(((c + 0.5) * cfg.m_per_px, (r + 0.5) * cfg.m_per_px),
                          float(rng.uniform(0, 2 * math.pi)), float(rng.choice([0.065, 0.13, 0.26])))
        a, b = execute_fold(st, act, cfg), execute_fold(st, act, cfg)
        assert a.equals(b)
        assert a.positions.shape == st.positions.shape
        assert max_edge_ratio(a) <= cfg.max_stretch + 1e-6
        st = a


def test_soft_reset_seeded(cfg):
    st = flat_state(cfg)
    a, b = soft_reset(st, cfg, 5), soft_reset(st, cfg, 5)
    assert a.equals(b)
    ra, rc = render(a, cfg), render(soft_reset(st, cfg, 6), cfg)
    assert (ra != rc).any(-1).mean() >= 0.01


def test_soft_reset_stays_central(cfg):
    st = flat_state(cfg)
    for seed in range(100):
        out = soft_reset(st, cfg, seed)
        xy = out.positions[..., :2]
        assert (xy >= 0).all() and (xy <= cfg.side_m).all()
        assert np.all(np.abs(out.centroid() - cfg.side_m / 2) <= cfg.side_m / 6)
        st = out


def test_render_pure(cfg):
    st = soft_reset(flat_state(cfg), cfg, 2)
    assert render(st, cfg).tobytes() == render(st, cfg).tobytes()


def test_png_and_state_round_trip(tmp_path, cfg):
    st = soft_reset(flat_state(cfg), cfg, 9)
    obs = render(st, cfg)
    save_png(obs, tmp_path / "o.png")
    assert np.array_equal(load_png(tmp_path / "o.png"), obs)
    save_state(st, tmp_path / "s.bin")
    assert load_state(tmp_path / "s.bin").equals(st)
    assert state_from_bytes(state_to_bytes(st)).equals(st)


def test_state_rejects_bad_shapes():
    with pytest.raises(ValueError):
        FabricState(np.zeros((3, 4, 3)), 0.1, np.zeros((3, 4)))
    with pytest.raises(ValueError):
        FabricState(np.full((3, 3, 3), np.nan), 0.1, np.zeros((3, 3)))
