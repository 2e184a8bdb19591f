import dataclasses

import numpy as np

from macrl.desk import DESK_MODEL, DeskConfig, desk_data, run_desk


def test_desk_configs_follow_step_budget():
    cfg = DeskConfig(steps=40)
    pre = cfg.pretrain_config()
    assert pre.stage == "pretrain"
    assert pre.epochs * (cfg.train_n // pre.batch_size) >= 40
    assert cfg.probe_config().stage == "linprobe"
    assert cfg.probe_config().crop_scale == 0.5


def test_desk_data_is_seeded_and_disjoint_streams():
    cfg = DeskConfig(train_n=32, test_n=16)
    a, b = desk_data(cfg), desk_data(cfg)
    assert np.array_equal(a[0].images, b[0].images)
    assert not np.array_equal(a[0].images[:16], a[1].images)


def test_tiny_desk_run_records_history():
    cfg = DeskConfig(train_n=64, test_n=32, steps=4,
                     pretrain=dict(lr=1e-3, batch_size=32, bank_size=64, warmup_epochs=1, alpha=0.1),
                     probe=dict(lr=0.3, batch_size=32, epochs=1, warmup_epochs=0, crop_scale=0.5))
    model = dataclasses.replace(DESK_MODEL, enc_depth=1)
    res = run_desk(cfg, model)
    assert len(res.history) == 4
    assert 0.0 <= res.pretrained_acc <= 1.0 and 0.0 <= res.random_acc <= 1.0
    assert np.isfinite(res.mean_loss(1, 4))
