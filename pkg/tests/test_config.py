import json

import pytest

from src.config import ConfigError, MappingConfig, build_run_config


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    for name in ("VOXFIELD_THREADS", "VOXFIELD_DETERMINISTIC", "LOG_LEVEL"):
        monkeypatch.delenv(name, raising=False)


def _write(tmp_path, data, name="run.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data), encoding="utf-8")
    return p


def test_defaults():
    cfg = build_run_config()
    assert cfg.threads == 1
    assert cfg.deterministic is True
    assert cfg.mapping.lambda_d == 1.0


def test_precedence(tmp_path, monkeypatch):
    monkeypatch.setenv("VOXFIELD_THREADS", "4")
    assert build_run_config().threads == 4
    path = _write(tmp_path, {"threads": 2, "mapping": {"lambda_d": 0.5, "iterations_per_stage": 10}})
    cfg = build_run_config(path)
    assert cfg.threads == 2
    assert cfg.mapping.lambda_d == 0.5
    cfg = build_run_config(path, {"mapping": {"lambda_d": 0.25, "rays_per_batch": None}})
    assert cfg.mapping.lambda_d == 0.25
    assert cfg.mapping.iterations_per_stage == 10
    assert cfg.mapping.rays_per_batch == 4096


def test_toml_file(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text("seed = 3\n[tracking]\niterations = 12\n", encoding="utf-8")
    cfg = build_run_config(p)
    assert cfg.tracking.iterations == 12
    assert cfg.tracking.seed == 3


def test_seed_propagates_unless_section_sets_its_own(tmp_path):
    path = _write(tmp_path, {"tracking": {"seed": 9}})
    cfg = build_run_config(path, {"seed": 7})
    assert cfg.mapping.seed == 7
    assert cfg.tracking.seed == 9


def test_unknown_key_rejected(tmp_path):
    with pytest.raises(ConfigError):
        build_run_config(_write(tmp_path, {"mapping": {"lambda": 1.0}}))


def test_bad_files(tmp_path):
    with pytest.raises(ConfigError):
        build_run_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError):
        build_run_config(bad)


def test_schedule_must_double():
    assert MappingConfig(upsample_schedule=[16, 32, 64]).upsample_schedule == [16, 32, 64]
    with pytest.raises(ValueError):
        MappingConfig(upsample_schedule=[32, 48])
    with pytest.raises(ValueError):
        MappingConfig(upsample_schedule=[])
