from dataclasses import dataclass
from typing import Optional

import pytest

from mstransformer.config import ConfigError, build, dump, load_config, read_sections
from mstransformer.model import ModelConfig
from mstransformer.synthetic import GridSettings
from mstransformer.training import TrainConfig


@dataclass
class Sample:
    name: str = "x"
    count: int = 1
    rate: float = 0.5
    flag: bool = False
    limit: Optional[float] = None
    sizes: tuple = (1, 2)


def write(tmp_path, text):
    p = tmp_path / "run.ini"
    p.write_text(text)
    return p


def test_types_are_converted():
    s = build(Sample, {"name": " y ", "count": "3", "rate": "1e-2", "flag": "yes",
                       "limit": "none", "sizes": "4, 5,6"})
    assert s == Sample("y", 3, 0.01, True, None, (4, 5, 6))


@pytest.mark.parametrize("values", [{"count": "two"}, {"flag": "maybe"}, {"rate": ""}])
def test_bad_values(values):
    with pytest.raises(ConfigError):
        build(Sample, values)


def test_unknown_key_lists_valid_ones():
    with pytest.raises(ConfigError, match="valid keys") as info:
        build(Sample, {"cuont": "1"})
    assert "count" in str(info.value)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="config file not found"):
        read_sections(tmp_path / "nope.ini", {"model": ModelConfig})


def test_unknown_section(tmp_path):
    path = write(tmp_path, "[modle]\nn_layers = 3\n")
    with pytest.raises(ConfigError, match="unknown section"):
        read_sections(path, {"model": ModelConfig})


def test_keys_are_case_sensitive(tmp_path):
    path = write(tmp_path, "[train]\nLR = 0.1\n")
    with pytest.raises(ConfigError):
        load_config(path, {"train": TrainConfig})


def test_overrides_beat_file(tmp_path):
    path = write(tmp_path, "[train]\nlr = 0.1\nepochs = 4\n")
    cfg = load_config(path, {"train": TrainConfig}, {"train": {"lr": 0.5, "epochs": None}})
    assert cfg["train"].lr == 0.5 and cfg["train"].epochs == 4


def test_validation_errors_become_config_errors(tmp_path):
    path = write(tmp_path, "[train]\nlr = -1\n")
    with pytest.raises(ConfigError):
        load_config(path, {"train": TrainConfig})


def test_tuple_fields_and_dump(tmp_path):
    path = write(tmp_path, "[mirrored]\nks = 10,20\nmodels = hier,flex\n")
    cfg = load_config(path, {"mirrored": GridSettings})
    assert cfg["mirrored"].ks == (10, 20)
    assert cfg["mirrored"].models == ("hier", "flex")
    assert dump(cfg)["mirrored"]["ks"] == [10, 20]


def test_no_file_gives_defaults():
    cfg = load_config(None, {"train": TrainConfig})
    assert cfg["train"] == TrainConfig()
