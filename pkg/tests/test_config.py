from pathlib import Path

import pytest
import yaml

from config import (DATA_DIR_ENV, DpmConfig, ProjectConfig, apply_overrides, config_from_dict, default_data_dir,
                    dump_config, load_config)
from errors import ConfigError

CONFIGS = Path(__file__).resolve().parent.parent / 'configs'


@pytest.mark.parametrize('name', ['desk.yaml', 'meld_like.yaml'])
def test_shipped_configs_validate(name):
    config = load_config(CONFIGS / name).validate()
    assert config.model.num_emotions == config.corpus.num_emotions
    assert config.dpm.n_r < config.model.n_limit


def test_defaults_without_file():
    config = load_config(None)
    assert config == ProjectConfig()
    assert config.dpm.learning_rate == 5e-5
    assert config.model.trainable_groups == ()


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError, match='not found'):
        load_config(tmp_path / 'absent.yaml')
    broken = tmp_path / 'broken.yaml'
    broken.write_text('model: [unclosed\n')
    with pytest.raises(ConfigError, match='cannot parse'):
        load_config(broken)


def test_unknown_sections_and_keys_are_rejected():
    with pytest.raises(ConfigError, match='sections'):
        config_from_dict({'optimiser': {}})
    with pytest.raises(ConfigError, match='n_rr'):
        config_from_dict({'dpm': {'n_rr': 3}})
    with pytest.raises(ConfigError, match='mapping'):
        config_from_dict({'dpm': [1, 2]})
    with pytest.raises(ConfigError, match='mapping'):
        config_from_dict({'model': 5})
    with pytest.raises(ConfigError, match='mapping'):
        config_from_dict([{'dpm': {}}])


def test_partial_sections_keep_defaults():
    config = config_from_dict({'dpm': {'n_r': 32}})
    assert config.dpm == DpmConfig(n_r=32)


def test_overrides_skip_none_and_reject_unknown_keys():
    config = apply_overrides(ProjectConfig(), {'dpm.n_r': 64, 'dpm.stride': None, 'run.threads': 3})
    assert config.dpm.n_r == 64 and config.dpm.stride is None and config.run.threads == 3
    with pytest.raises(ConfigError):
        apply_overrides(ProjectConfig(), {'dpm.window': 3})


def test_dump_round_trips():
    config = load_config(CONFIGS / 'desk.yaml')
    assert config_from_dict(yaml.safe_load(dump_config(config))) == config


def test_cross_section_validation():
    config = config_from_dict({'model': {'num_emotions': 7}})
    with pytest.raises(ConfigError, match='emotions'):
        config.validate()
    with pytest.raises(ConfigError):
        config_from_dict({'train': {'n_o': 200, 'n_p': 200}, 'model': {'n_limit': 256}}).validate()


def test_data_dir_from_environment(monkeypatch, tmp_path):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv(DATA_DIR_ENV, str(tmp_path / 'out'))
    assert default_data_dir() == tmp_path / 'out'
    monkeypatch.delenv(DATA_DIR_ENV)
    assert default_data_dir() == Path('runs')


def test_list_section_in_file_is_a_config_error(tmp_path):
    path = tmp_path / 'listed.yaml'
    path.write_text('dpm:\n  - n_r\n  - 3\n')
    with pytest.raises(ConfigError, match="'dpm'"):
        load_config(path)
