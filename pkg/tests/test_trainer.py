import json
import math

import numpy as np
import pytest

from prefixcond.trainer import (
    CheckpointError,
    ConfigError,
    TrainConfig,
    Trainer,
    TrainingDiverged,
    build_data,
    load_checkpoint,
    load_model,
    read_checkpoint,
    total_steps,
)

SMALL = dict(
    label_train_per_class=20,
    label_test_per_class=2,
    caption_train=320,
    caption_test=20,
    zeroshot_test_per_class=2,
    shifted_test_per_class=2,
    epochs=10,
    warmup_steps=10,
    log_every=1,
)


@pytest.fixture(scope="module")
def cfg():
    return TrainConfig(**SMALL)


@pytest.fixture(scope="module")
def data(cfg):
    return build_data(cfg)


def params_bytes(trainer):
    return {k: p.data.tobytes() for k, p in trainer.model.params.items()}


# -- config -------------------------------------------------------------------


def test_config_defaults():
    c = TrainConfig()
    assert c.lr_base == 1e-3 and c.weight_decay == 0.1
    assert total_steps(c) >= 1


def test_config_rejects_bad_values(tmp_path):
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(objective="triplet")
    with pytest.raises(ConfigError):
        TrainConfig(catalog_path=str(tmp_path / "missing.csv"))
    with pytest.raises(ConfigError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})


def test_config_json_round_trip(tmp_path, cfg):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    back = TrainConfig.from_json(p)
    assert back == cfg and back.config_hash() == cfg.config_hash()
    assert cfg.replace(seed=1).config_hash() != cfg.config_hash()


def test_config_json_not_an_object(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        TrainConfig.from_json(p)


# -- training -----------------------------------------------------------------


def test_step_zero_loss_near_two_log_batch(cfg, data):
    t = Trainer(cfg, data)
    loss = t.train_step()
    assert abs(loss - 2 * math.log(cfg.batch_size)) <= 0.15 * 2 * math.log(cfg.batch_size)


def test_loss_decreases_over_fifty_steps(cfg, data):
    t = Trainer(cfg, data)
    losses = [t.train_step() for _ in range(50)]
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


def test_tau_stays_in_range_and_log_fields(cfg, data):
    t = Trainer(cfg, data)
    t.run(30)
    assert all(set(r) == {"step", "loss", "tau", "lr"} for r in t.log.records)
    assert all(0 < r["tau"] <= 100 for r in t.log.records)


def test_same_seed_identical_logs_and_checkpoints(tmp_path, cfg, data):
    a, b = Trainer(cfg, data), Trainer(cfg, data)
    a.run(15)
    b.run(15)
    assert a.log.records == b.log.records
    a.save(tmp_path / "a.ckpt")
    b.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_resume_is_bitwise_identical(tmp_path, cfg, data):
    straight = Trainer(cfg, data)
    straight.run(20)

    first = Trainer(cfg, data)
    first.run(10)
    first.save(tmp_path / "mid.ckpt")
    resumed = load_checkpoint(tmp_path / "mid.ckpt", data, expected_config=cfg)
    resumed.run(10)

    assert params_bytes(resumed) == params_bytes(straight)
    assert resumed.log.records == straight.log.records
    for k in straight.opt.first_moment:
        assert straight.opt.first_moment[k].tobytes() == resumed.opt.first_moment[k].tobytes()
        assert straight.opt.second_moment[k].tobytes() == resumed.opt.second_moment[k].tobytes()


def test_prefix_rows_zero_grad_when_off(cfg, data):
    t = Trainer(cfg.replace(prefix_mode=False), data)
    t.run(20)
    assert (t.prefix_grad_sum == 0).all()
    on = Trainer(cfg, data)
    on.run(20)
    assert (on.prefix_grad_sum > 0).all()


def test_no_dead_parameters(cfg, data):
    t = Trainer(cfg.replace(strategy="DS"), data)
    t.run(110)
    assert t.dead_parameters(100) == []


def test_dead_parameter_detector_flags_stale_entries(cfg, data):
    t = Trainer(cfg, data)
    t.run(2)
    t.step = 150  # pretend nothing has moved for 148 steps
    assert set(t.dead_parameters(100)) == set(t.model.params)


def test_non_finite_aborts_with_step_and_lr(cfg, data):
    t = Trainer(cfg, data)
    t.run(3)
    t.model.params["image.proj"].data[0, 0] = np.inf
    with pytest.raises(TrainingDiverged) as info:
        t.train_step()
    assert info.value.step == 3
    assert info.value.lr > 0
    assert "step 3" in str(info.value)


def test_unicl_objective_trains(cfg, data):
    t = Trainer(cfg.replace(objective="unicl", strategy="ES"), data)
    losses = [t.train_step() for _ in range(5)]
    assert all(math.isfinite(x) for x in losses)


# -- checkpoints --------------------------------------------------------------


def test_default_checkpoint_under_five_mb(tmp_path, data):
    t = Trainer(TrainConfig(**{**SMALL, "warmup_steps": None}), data)
    t.train_step()  # moment buffers exist after the first update
    t.save(tmp_path / "m.ckpt")
    size = (tmp_path / "m.ckpt").stat().st_size
    # parameters plus two moment buffers, eight bytes each
    assert size >= 3 * 8 * t.model.num_parameters()
    assert size < 5 * 1024 * 1024


def test_load_model_matches_trainer(tmp_path, cfg, data):
    t = Trainer(cfg, data)
    t.run(5)
    t.save(tmp_path / "m.ckpt")
    model, back_cfg = load_model(tmp_path / "m.ckpt")
    assert back_cfg == cfg
    assert model.trained_with_prefix
    for k, p in t.model.params.items():
        assert p.data.tobytes() == model.params[k].data.tobytes()


def _saved(tmp_path, cfg, data):
    t = Trainer(cfg, data)
    t.save(tmp_path / "m.ckpt")
    return (tmp_path / "m.ckpt").read_bytes()


def test_corrupted_header_raises(tmp_path, cfg, data):
    raw = bytearray(_saved(tmp_path, cfg, data))
    raw[20:30] = b"\xff" * 10
    (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="corrupted header"):
        read_checkpoint(tmp_path / "bad.ckpt")


def test_bad_magic_raises(tmp_path, cfg, data):
    raw = _saved(tmp_path, cfg, data)
    (tmp_path / "bad.ckpt").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(tmp_path / "bad.ckpt")


def _rewrite_header(raw, edit):
    import struct

    (n,) = struct.unpack_from("<Q", raw, 8)
    header = json.loads(raw[16 : 16 + n])
    edit(header)
    blob = json.dumps(header, sort_keys=True).encode()
    return raw[:8] + struct.pack("<Q", len(blob)) + blob + raw[16 + n :]


def test_version_mismatch_raises(tmp_path, cfg, data):
    raw = _rewrite_header(_saved(tmp_path, cfg, data), lambda h: h.update(version=99))
    (tmp_path / "v.ckpt").write_bytes(raw)
    with pytest.raises(CheckpointError, match="version"):
        read_checkpoint(tmp_path / "v.ckpt")


def test_config_hash_mismatch_raises(tmp_path, cfg, data):
    raw = _rewrite_header(_saved(tmp_path, cfg, data), lambda h: h["config"].update(seed=7))
    (tmp_path / "h.ckpt").write_bytes(raw)
    with pytest.raises(CheckpointError, match="hash"):
        read_checkpoint(tmp_path / "h.ckpt")


def test_expected_config_mismatch_raises(tmp_path, cfg, data):
    _saved(tmp_path, cfg, data)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m.ckpt", data, expected_config=cfg.replace(seed=5))


def test_truncated_body_raises(tmp_path, cfg, data):
    raw = _saved(tmp_path, cfg, data)
    (tmp_path / "t.ckpt").write_bytes(raw[:-800])
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(tmp_path / "t.ckpt")
