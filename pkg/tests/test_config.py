import pytest

from adaptagen.config import load_config, validate_config
from adaptagen.errors import ConfigError


MINIMAL = {"dataset": {"root": "/data/set"}}


class TestDefaults:
    def test_minimal_config_gets_all_defaults(self):
        cfg = validate_config(MINIMAL)
        assert cfg.dataset.k == 16
        assert cfg.transform.tau_base == 0.8
        assert cfg.transform.delta_tau == 0.2
        assert cfg.generate.steps == 30
        assert cfg.generate.guidance == 7.5
        assert cfg.generate.lora_scale == 1.0
        assert cfg.lora.rank == 4
        assert cfg.lora.alpha == 4.0
        assert cfg.seed == 0

    def test_yaml_text_accepted(self):
        cfg = validate_config("dataset:\n  root: /data/set\nseed: 7\n")
        assert cfg.seed == 7
        assert cfg.dataset.root == "/data/set"

    def test_missing_root_fatal(self):
        with pytest.raises(ConfigError, match="dataset.root"):
            validate_config({})


class TestUnknownKeys:
    def test_unknown_section_key_named(self):
        raw = {"dataset": {"root": "/x"}, "lora": {"rnk": 8}}
        with pytest.raises(ConfigError, match=r"lora\.rnk"):
            validate_config(raw)

    def test_unknown_top_level_key_named(self):
        with pytest.raises(ConfigError, match="datset"):
            validate_config({"datset": {"root": "/x"}})

    def test_unknown_generate_key(self):
        raw = {"dataset": {"root": "/x"}, "generate": {"omga": 3.0}}
        with pytest.raises(ConfigError, match=r"generate\.omga"):
            validate_config(raw)


class TestInvariants:
    def test_temperature_invariant(self):
        raw = {"dataset": {"root": "/x"}, "transform": {"tau_base": 0.8, "delta_tau": 0.9}}
        with pytest.raises(ConfigError, match="tau"):
            validate_config(raw)

    def test_unknown_backend_named(self):
        raw = {"dataset": {"root": "/x"}, "caption": {"backend": "gpu-captioner"}}
        with pytest.raises(ConfigError, match="gpu-captioner"):
            validate_config(raw)

    def test_per_category_count_positive(self):
        raw = {"dataset": {"root": "/x"}, "generate": {"per_category_count": 0}}
        with pytest.raises(ConfigError, match="per_category_count"):
            validate_config(raw)

    def test_size_validation(self):
        raw = {"dataset": {"root": "/x"}, "generate": {"size": [48, 64]}}
        with pytest.raises(ConfigError, match="size"):
            validate_config(raw)

    def test_rank_validation(self):
        raw = {"dataset": {"root": "/x"}, "lora": {"rank": 0}}
        with pytest.raises(ConfigError, match="lora.rank"):
            validate_config(raw)

    def test_bad_templates_rejected(self):
        raw = {"dataset": {"root": "/x"}, "caption": {"templates": [{"template_id": "t"}]}}
        with pytest.raises(ConfigError, match="missing keys"):
            validate_config(raw)

    def test_splits_positive(self):
        raw = {"dataset": {"root": "/x"}, "evaluate": {"splits": 0}}
        with pytest.raises(ConfigError, match="splits"):
            validate_config(raw)


class TestLoadConfig:
    def test_file_round_trip(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("dataset:\n  root: /data/set\nseed: 3\n")
        cfg = load_config(path)
        assert cfg.seed == 3

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "absent.yaml")

    def test_invalid_yaml(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("dataset: [unclosed\n")
        with pytest.raises(ConfigError, match="YAML"):
            load_config(path)

    def test_snapshot_is_serializable(self):
        import json

        cfg = validate_config(MINIMAL)
        snapshot = cfg.to_json_dict()
        assert json.loads(json.dumps(snapshot)) == snapshot
