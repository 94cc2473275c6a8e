import csv
import json

import numpy as np
import pytest

from foldcraft.actions import evaluate_q
from foldcraft.dataset import collect, load_dataset
from foldcraft.qfcn import QNetwork
from foldcraft.trainer import TrainConfig, q_target, train


def constant_net(value: float) -> QNetwork:
    net = QNetwork(seed=0)
    net.zero_output_layer()
    net.params[-1][:] = value
    return net


def test_q_target_examples(small_ds, disc, cfg):
    nxt, goal = small_ds.images[1], small_ds.images[7]
    assert q_target(1, nxt, goal, disc, QNetwork(seed=0), cfg=cfg) == 1.0
    assert q_target(0, nxt, goal, disc, constant_net(0.0), cfg=cfg) == 0.0
    assert q_target(0, nxt, goal, disc, constant_net(0.6), gamma=0.5, cfg=cfg) == pytest.approx(0.3)


def test_q_target_empty_mask(small_ds, disc, cfg):
    nxt = small_ds.images[1]
    empty = np.zeros(nxt.shape[:2], bool)
    assert q_target(0, nxt, nxt, disc, constant_net(0.6), mask=empty, cfg=cfg) == 0.0


@pytest.mark.parametrize("kw", [dict(gamma=1.0), dict(gamma=-0.1), dict(batch_size=0),
                                dict(lr=0.0), dict(max_steps=-1), dict(her_achieved_prob=2.0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_config_round_trip():
    c = TrainConfig(seed=3, max_steps=7)
    assert TrainConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c


def test_zero_steps_returns_initial_checkpoint(small_ds, tmp_path):
    net = QNetwork(seed=4)
    init = net.to_bytes(64)
    rep = train(small_ds, net, TrainConfig(max_steps=0), out_dir=tmp_path)
    assert rep.steps == 0 and rep.losses == [] and rep.stop_reason == "max_steps"
    assert (tmp_path / "checkpoint.fcqn").read_bytes() == init


def test_outputs_written(small_ds, tmp_path):
    rep = train(small_ds, QNetwork(seed=0), TrainConfig(max_steps=3, batch_size=2), out_dir=tmp_path)
    rows = list(csv.reader(open(tmp_path / "train_log.csv")))
    assert rows[0] == ["step", "loss", "mean_q"] and len(rows) == 4
    echo = json.loads((tmp_path / "train_config.json").read_text())
    assert echo["train"]["max_steps"] == 3 and echo["report"]["steps"] == 3
    assert rep.checkpoint == str(tmp_path / "checkpoint.fcqn")
    assert all(np.isfinite(rep.losses))


def test_training_deterministic(small_ds, tmp_path):
    c = TrainConfig(max_steps=4, batch_size=3, seed=9, target_sync_period=2)
    a = train(small_ds, QNetwork(seed=1), c, out_dir=tmp_path / "a")
    b = train(small_ds, QNetwork(seed=1), c, out_dir=tmp_path / "b")
    assert a.losses == b.losses
    assert (tmp_path / "a/checkpoint.fcqn").read_bytes() == \
        (tmp_path / "b/checkpoint.fcqn").read_bytes()


def test_nan_parameters_abort_with_diagnostic(small_ds):
    net = QNetwork(seed=0)
    net.params[0][0, 0, 0, 0] = np.nan
    rep = train(small_ds, net, TrainConfig(max_steps=5, batch_size=2))
    assert rep.stop_reason == "diverged" and rep.diagnostic


def test_overfit_single_success(tmp_path, cfg, disc):
    collect(cfg, disc, 1, seed=0, out_dir=tmp_path)
    ds = load_dataset(tmp_path)
    net = QNetwork(seed=0)
    rep = train(ds, net, TrainConfig(max_steps=80, early_stop_loss=1e-9, her_achieved_prob=1.0))
    o, n = ds.pairs[0]
    q = evaluate_q(net, ds.images[o], ds.images[n], ds.transitions[0].action, disc, cfg)
    assert abs(q - 1.0) < 0.05
    assert np.mean(rep.losses[-10:]) < 0.01
