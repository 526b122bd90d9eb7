import sys
from pathlib import Path

# Add the project root to the Python path
project_root = Path(__file__).parent.absolute()
sys.path.append(str(project_root))

import json

import pytest

from mmdiff_config import RunConfig, config_hash, load_config, parse_config, worker_count
from src.errors import ConfigError


def test_defaults():
    config = load_config()
    assert config.data.hr_res == 32 and config.data.scale == 4
    assert config.vq.K == 64 and config.vq.g == 8
    assert config.model.n_latents == 32
    assert config.train.drop_p == 0.1
    assert config.sample.mode == "m-cfg" and config.sample.w == 4.0 and config.sample.steps == 50
    assert config.sequence_length == 3 * 64 + 16


def test_unknown_key_is_rejected():
    with pytest.raises(ConfigError, match="vq"):
        parse_config({"vq": {"codes": 32}})
    with pytest.raises(ConfigError):
        parse_config({"extras": {}})


@pytest.mark.parametrize("document", [
    {"model": {"n_latents": 208}},
    {"model": {"heads": 5}},
    {"vq": {"d_tok": 128}},
    {"vq": {"g": 4}},
    {"data": {"scale": 3}},
    {"sample": {"temps": {"edge": 0.1}}},
    {"sample": {"mode": "x-cfg"}},
    {"train": {"drop_p": 1.5}},
])
def test_invalid_values(document):
    with pytest.raises(ConfigError):
        parse_config(document)


def test_config_hash_is_stable_and_sensitive():
    assert config_hash(RunConfig()) == config_hash(parse_config({}))
    assert config_hash(RunConfig()) != config_hash(parse_config({"train": {"seed": 1}}))
    assert len(config_hash(RunConfig())) == 64


def test_load_config_from_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"data": {"n": 8}, "train": {"steps": 2}}))
    config = load_config(path)
    assert config.data.n == 8 and config.train.steps == 2
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(path)
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "missing.json")


def test_worker_count(monkeypatch):
    monkeypatch.delenv("MMDIFF_THREADS", raising=False)
    assert worker_count() == 1
    monkeypatch.setenv("MMDIFF_THREADS", "3")
    assert worker_count() == 3
    for bad in ("0", "many"):
        monkeypatch.setenv("MMDIFF_THREADS", bad)
        with pytest.raises(ConfigError):
            worker_count()
