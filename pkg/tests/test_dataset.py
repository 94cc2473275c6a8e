import json
import math
import shutil

import numpy as np
import pytest

from foldcraft.actions import ActionIndex
from foldcraft.dataset import (AugmentConfig, DatasetManifest, augment, centre_bias_bin, collect,
                               goal_equal, her_sample, iou, load_dataset, registered_iou)
from foldcraft.sim import (WorldAction, execute_fold, fabric_mask, flat_state, render,
                           soft_reset)


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_collect_single_transition(tmp_path, cfg, disc):
    man = collect(cfg, disc, 1, seed=0, out_dir=tmp_path)
    assert man.count == 1 and man.valid
    ds = load_dataset(tmp_path)
    o, n = ds.pairs[0]
    assert o != n


def test_collect_rejects_zero(tmp_path, cfg, disc):
    with pytest.raises(ValueError):
        collect(cfg, disc, 0, seed=0, out_dir=tmp_path)


def test_collect_deterministic(tmp_path, cfg, disc):
    collect(cfg, disc, 15, seed=4, out_dir=tmp_path / "a")
    collect(cfg, disc, 15, seed=4, out_dir=tmp_path / "b")
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_round_trip(small_ds):
    man = DatasetManifest.read(small_ds.manifest.root)
    assert [t.to_record() for t in man.transitions] == \
        [t.to_record() for t in small_ds.transitions]
    again = load_dataset(small_ds.manifest.root)
    assert all(np.array_equal(a, b) for a, b in zip(again.images, small_ds.images))
    assert man.workspace == small_ds.cfg and man.disc == small_ds.disc


def test_episode_structure(small_ds):
    ts = small_ds.transitions
    assert len(ts) == 40
    assert {t.episode_id for t in ts} == {0, 1, 2, 3}
    for t in ts:
        assert 0 <= t.step_id < 10
        assert t.next_obs_file == f"obs/ep{t.episode_id:03d}_step{t.step_id + 1:03d}.png"


def test_collected_masks_never_empty_and_actions_on_cloth(small_ds, cfg):
    for img in small_ds.images:
        assert fabric_mask(img, cfg).any()
    for t, (o, _) in zip(small_ds.transitions, small_ds.pairs):
        assert fabric_mask(small_ds.images[o], cfg)[t.action.row, t.action.col]


def test_centroid_does_not_drift_outward(small_ds, cfg):
    d = []
    for img in small_ds.images:
        rows, cols = np.nonzero(fabric_mask(img, cfg))
        d.append(math.hypot(rows.mean() + 0.5 - 32, cols.mean() + 0.5 - 32))
    assert not all(a <= b for a, b in zip(d, d[1:]))
    assert max(d) < 32


def test_centre_bias_bin(cfg, disc):
    c = cfg.side_m / 2
    assert centre_bias_bin((c - 0.1, c), cfg, disc) == 0          # heading +x
    assert centre_bias_bin((c + 0.1, c), cfg, disc) == 4          # heading -x
    assert centre_bias_bin((c, c - 0.1), cfg, disc) == 6          # heading +y (down)
    assert centre_bias_bin((c - 0.1, c - 0.1), cfg, disc) == 7    # down-right diagonal


def test_corrupted_manifest_names_record(tmp_path, small_ds):
    root = tmp_path / "bad"
    shutil.copytree(small_ds.manifest.root, root)
    lines = (root / "manifest.jsonl").read_text().splitlines()
    rec = json.loads(lines[6])
    del rec["scale_bin"]
    lines[6] = json.dumps(rec)
    (root / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(ValueError, match="record 7"):
        load_dataset(root)


def test_missing_file_and_bad_count(tmp_path, small_ds):
    root = tmp_path / "bad"
    shutil.copytree(small_ds.manifest.root, root)
    meta = json.loads((root / "dataset.json").read_text())
    meta["count"] = 41
    (root / "dataset.json").write_text(json.dumps(meta))
    with pytest.raises(ValueError, match="header"):
        load_dataset(root)
    meta["count"] = 40
    (root / "dataset.json").write_text(json.dumps(meta))
    (root / "obs" / "ep001_step004.png").unlink()
    with pytest.raises(FileNotFoundError, match="ep001_step004"):
        load_dataset(root)


def test_invalid_flag_rejected(tmp_path, small_ds):
    root = tmp_path / "bad"
    shutil.copytree(small_ds.manifest.root, root)
    meta = json.loads((root / "dataset.json").read_text())
    meta["valid"], meta["error"] = False, "boom"
    (root / "dataset.json").write_text(json.dumps(meta))
    with pytest.raises(ValueError, match="boom"):
        load_dataset(root)


# -- goal predicate -----------------------------------------------------------

def corner_fold(cfg, dist):
    st = flat_state(cfg)
    x, y = st.positions[0, 0, :2]
    return render(execute_fold(st, WorldAction((float(x), float(y)), math.pi / 4, dist), cfg), cfg)


def test_goal_equal_examples(cfg):
    flat = render(flat_state(cfg), cfg)
    assert goal_equal(flat, flat, cfg)
    assert goal_equal(flat, np.roll(flat, 1, axis=1), cfg)
    half = corner_fold(cfg, math.hypot(0.3, 0.3))
    assert iou(fabric_mask(flat, cfg), fabric_mask(half, cfg)) == pytest.approx(0.5, abs=0.06)
    assert not goal_equal(flat, half, cfg)
    # a small corner flap changes little area but adds a layer
    small = corner_fold(cfg, 0.065)
    assert registered_iou(flat, small, cfg) > 0.9
    assert not goal_equal(flat, small, cfg)
    with pytest.raises(ValueError):
        goal_equal(flat, flat[:32], cfg)


def test_goal_equal_symmetric(small_ds, cfg, rng):
    imgs = small_ds.images
    for _ in range(30):
        i, j = rng.integers(len(imgs), size=2)
        assert goal_equal(imgs[i], imgs[j], cfg) == goal_equal(imgs[j], imgs[i], cfg)


def test_same_state_rendered_twice_is_equal(cfg):
    st = soft_reset(flat_state(cfg), cfg, 8)
    assert goal_equal(render(st, cfg), render(st, cfg), cfg)


# -- hindsight relabelling ------------------------------------------------------

def test_her_achieved_goals_rewarded(small_ds):
    batch = her_sample(small_ds, 500, np.random.default_rng(0))
    assert all(s.reward == 1 for s in batch if s.achieved)
    frac = np.mean([s.achieved for s in batch])
    assert 0.4 < frac < 0.6
    for s in batch:
        assert s.reward == int(goal_equal(small_ds.images[s.goal], small_ds.images[s.next_obs],
                                          small_ds.cfg) or s.goal == s.next_obs)


def test_her_reproducible_and_with_replacement(small_ds):
    a = her_sample(small_ds, 100, np.random.default_rng(3))
    b = her_sample(small_ds, 100, np.random.default_rng(3))
    assert a == b
    assert len(her_sample(small_ds, 3 * len(small_ds), np.random.default_rng(0))) == 120


def test_her_probability_knob(small_ds):
    batch = her_sample(small_ds, 50, np.random.default_rng(0), achieved_prob=1.0)
    assert all(s.achieved and s.reward == 1 for s in batch)


# -- augmentation --------------------------------------------------------------

def test_augment_zero_noise_identity(small_ds, cfg):
    o, g = small_ds.images[0], small_ds.images[5]
    a = ActionIndex(10, 20, 3, 1)
    o2, g2, a2 = augment(o, g, np.random.default_rng(0), cfg, AugmentConfig(0.0, 0.0), a)
    assert np.array_equal(o, o2) and np.array_equal(g, g2) and a2 == a


def test_augment_seeded(small_ds, cfg):
    o, g = small_ds.images[0], small_ds.images[5]
    x = augment(o, g, np.random.default_rng(9), cfg)
    y = augment(o, g, np.random.default_rng(9), cfg)
    assert all(np.array_equal(p, q) for p, q in zip(x[:2], y[:2]))


def test_augment_preserves_area(cfg):
    obs = render(soft_reset(flat_state(cfg), cfg, 1), cfg)
    a0 = fabric_mask(obs, cfg).sum()
    rng = np.random.default_rng(0)
    for _ in range(1000):
        o2, _, _ = augment(obs, obs, rng, cfg)
        assert abs(fabric_mask(o2, cfg).sum() / a0 - 1) <= 0.03


def test_augment_moves_action_with_obs(cfg):
    obs = np.zeros((64, 64, 3), np.uint8)
    obs[:] = (200, 100, 50)
    obs[20, 30] = (10, 250, 10)
    rng = np.random.default_rng(5)
    for _ in range(20):
        o2, _, a2 = augment(obs, obs, rng, cfg, AugmentConfig(0.005, 0.0), ActionIndex(20, 30, 0, 0))
        # the marked pixel's brightest trace lands where the action now points
        green = o2[..., 1].astype(int) - o2[..., 0]
        r, c = np.unravel_index(np.argmax(green), green.shape)
        assert abs(r - a2.row) <= 1 and abs(c - a2.col) <= 1
