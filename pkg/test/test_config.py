import os

import pytest

from sgl.config import (
    ExperimentConfig,
    apply_overrides,
    from_dict,
    load_config,
    parse_config,
    run_seed,
    serialize_config,
)
from sgl.errors import ConfigError
from test.fixtures import SAMPLE_DIR


SAMPLES = sorted(name for name in os.listdir(SAMPLE_DIR) if name.endswith(".yaml"))


@pytest.fixture
def config_file(tmp_path):
    filepath = os.path.join(tmp_path, "config.yaml")

    with open(filepath, "w", encoding="utf-8") as file:
        file.write("experiment:\n  kind: bounds\n  seed: 7\ntrain:\n  epochs: 50\n")

    return filepath


class TestParse:
    def test_defaults(self):
        config = from_dict(None)

        assert config == ExperimentConfig()
        assert config.experiment.kind == "kl-dynamics"
        assert config.sde.build().horizon_T == 3.0

    def test_round_trip(self):
        config = from_dict({"experiment": {"mu_list": [1.0, 2.0]}, "target": {"modes": [[0.3, -1.0, 1.0], [0.7, 2.0, 0.5]]}})
        text = serialize_config(config)

        assert parse_config(text) == config
        assert serialize_config(parse_config(text)) == text

    def test_unknown_section(self):
        with pytest.raises(ConfigError):
            parse_config("optimizer:\n  lr: 1\n")

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            parse_config("train:\n  lr: 1\n")

    def test_invalid_values(self):
        with pytest.raises(ConfigError):
            parse_config("sde:\n  preset: brownian\n")

        with pytest.raises(ConfigError):
            parse_config("model:\n  kind: swish_mlp\n  init: least-squares\n")

    def test_x_scale(self):
        assert from_dict(None).model.x_scale is None
        assert parse_config("model:\n  x_scale: 2.5\n").model.x_scale == 2.5

        with pytest.raises(ConfigError):
            parse_config("model:\n  x_scale: 0\n")

    def test_not_yaml(self):
        with pytest.raises(ConfigError):
            parse_config("train: [1, 2\n")

    def test_modes(self):
        config = parse_config("target:\n  modes:\n    - {q: 0.25, mu: -2.0}\n    - [0.75, 4.0, 2.0]\n")
        gm = config.target.mixture()

        assert gm.weights == (0.25, 0.75)
        assert gm.means == (-2.0, 4.0)
        assert gm.variances == (1.0, 2.0)

    def test_bad_mode(self):
        with pytest.raises(ConfigError):
            parse_config("target:\n  modes:\n    - [0.5, 1.0]\n")

    def test_mode_distance_replaces_modes(self):
        config = parse_config("target:\n  modes: [[1.0, 5.0, 1.0]]\n")

        assert config.target.mixture(2.0).means == (-2.0, 2.0)


class TestLoad:
    def test_overrides_and_flags(self, config_file):
        config = load_config(config_file, ["train.epochs=80", "train.optimizer=adam"], out_dir="elsewhere", seed=11)

        assert config.experiment.kind == "bounds"
        assert config.train.epochs == 80
        assert config.train.optimizer == "adam"
        assert config.experiment.seed == 11
        assert config.out_dir == "elsewhere"

    def test_flag_wins_over_override(self, config_file):
        config = load_config(config_file, ["experiment.seed=3"], seed=4)

        assert config.experiment.seed == 4

    def test_malformed_override(self):
        with pytest.raises(ConfigError):
            apply_overrides(dict(), ["train.epochs"])

        with pytest.raises(ConfigError):
            apply_overrides(dict(), ["epochs=3"])

    def test_override_lists(self):
        data = apply_overrides(dict(), ["experiment.m_list=[4, 8]"])

        assert data == {"experiment": {"m_list": [4, 8]}}

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(os.path.join(tmp_path, "missing.yaml"))

    @pytest.mark.parametrize("name", SAMPLES)
    def test_samples(self, name):
        config = load_config(os.path.join(SAMPLE_DIR, name))

        assert config.experiment.kind.replace("-", "_") in name


class TestRunSeed:
    def test_deterministic(self):
        assert run_seed(0, 3, 1) == run_seed(0, 3, 1)

    def test_distinct(self):
        seeds = {run_seed(master, index, stream) for master in range(3) for index in range(5) for stream in range(4)}

        assert len(seeds) == 60
        assert all(0 <= seed < 2**64 for seed in seeds)
