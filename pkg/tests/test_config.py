import pytest

from pyra.config import RunConfig, RunConfigError
from pyra.merge import ScheduleError


def test_defaults_materialized():
    d = RunConfig().to_dict()
    assert d["D"] == 32 and d["L"] == 4 and d["schedule"] == [0, 0, 0, 0]
    assert None not in (d["L"], d["D"], d["H"], d["P"], d["img"])


def test_round_trip_lossless():
    cfg = RunConfig(arch="tiny", target_ratio=1.5, pyra_mode="gated", lr_peft=3e-3, noise=0.2)
    again = RunConfig.from_json(cfg.to_json())
    assert again == cfg and again.to_json() == cfg.to_json()


def test_saved_config_self_contained():
    a = RunConfig.from_json('{"constant_r": 2}')
    b = RunConfig.from_json(a.to_json())
    assert b.schedule == [2, 2, 2, 2] and b.to_dict() == a.to_dict()


def test_unknown_key_rejected():
    with pytest.raises(RunConfigError, match="bogus"):
        RunConfig.from_json('{"bogus": 1}')


def test_not_an_object_rejected():
    with pytest.raises(RunConfigError):
        RunConfig.from_json("[1, 2]")


def test_bad_json_rejected():
    with pytest.raises(RunConfigError):
        RunConfig.from_json("{")


def test_infeasible_schedule_rejected():
    with pytest.raises(ScheduleError):
        RunConfig(schedule=[9, 9, 9, 9])


def test_invalid_training_values_rejected():
    with pytest.raises(ValueError):
        RunConfig(epochs=1, warmup_epochs=3)


def test_published_schedule_for_large_preset():
    cfg = RunConfig(arch="vit_b", published="vit_b_high")
    assert sum(cfg.schedule) == 192 and cfg.arch_spec().D == 768
