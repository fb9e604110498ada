import pytest

from s4ecg.config import (
    CpcConfig,
    ModelConfig,
    TrainConfig,
    from_dict,
    load_config,
    save_config,
    to_dict,
    with_overrides,
)
from s4ecg.errors import ConfigError

pytestmark = pytest.mark.unit


class TestValidation:
    @pytest.mark.parametrize(
        "values",
        [
            {"depth": 0},
            {"directionality": "sideways"},
            {"encoder": "transformer"},
            {"norm": "batch"},
            {"bidirectional_merge": "product"},
            {"dropout": 1.0},
            {"step_min": 0.2, "step_max": 0.1},
        ],
    )
    def test_invalid_model_configs(self, values) -> None:
        with pytest.raises(ConfigError):
            ModelConfig(**values)

    @pytest.mark.parametrize(
        "values",
        [{"batch_size": 0}, {"lr": -1.0}, {"dtype": "float16"}, {"label_fraction": 0.0}, {"crop_seconds": 0.0}],
    )
    def test_invalid_train_configs(self, values) -> None:
        with pytest.raises(ConfigError):
            TrainConfig(**values)

    def test_invalid_cpc_config(self) -> None:
        with pytest.raises(ConfigError):
            CpcConfig(horizon=0)

    def test_default_folds(self) -> None:
        config = TrainConfig()

        assert config.train_folds == tuple(range(1, 9))
        assert config.val_folds == (9,)
        assert config.test_folds == (10,)


class TestDictionaries:
    def test_unknown_keys_are_rejected(self) -> None:
        with pytest.raises(ConfigError, match="Unknown ModelConfig keys"):
            from_dict(ModelConfig, {"H": 4, "width": 8})

    def test_lists_become_tuples(self) -> None:
        config = from_dict(TrainConfig, {"betas": [0.8, 0.9], "train_folds": [1, 2]})

        assert config.betas == (0.8, 0.9)
        assert config.train_folds == (1, 2)

    def test_overrides_ignore_foreign_keys(self) -> None:
        config = with_overrides(TrainConfig(), {"lr": 0.5, "H": 3})

        assert config.lr == 0.5
        assert config == TrainConfig(lr=0.5)

    def test_overrides_are_validated(self) -> None:
        with pytest.raises(ConfigError):
            with_overrides(ModelConfig(), {"N": 0})

    def test_cpc_backbone_is_causal(self) -> None:
        backbone = CpcConfig(width=16, depth=2, N=4, c_in=3).backbone_config(5)

        assert backbone.causal
        assert backbone.encoder == "fce"
        assert (backbone.H, backbone.encoder_width, backbone.n_classes, backbone.c_in) == (16, 16, 5, 3)


class TestFiles:
    @pytest.mark.parametrize("config", [ModelConfig(H=8, with_meta=True), TrainConfig(epochs=3), CpcConfig()])
    def test_round_trip(self, tmp_path, config) -> None:
        path = str(tmp_path / "config.txt")

        save_config(path, config)

        assert load_config(path, type(config)) == config

    def test_file_is_a_readable_literal(self, tmp_path) -> None:
        path = tmp_path / "model.txt"

        save_config(str(path), ModelConfig(H=8))

        assert "'H': 8" in path.read_text()

    def test_unparsable_file(self, tmp_path) -> None:
        path = tmp_path / "model.txt"
        path.write_text("{'H': open('x')}")

        with pytest.raises(ConfigError, match="Could not read"):
            load_config(str(path), ModelConfig)

    def test_not_a_dictionary(self, tmp_path) -> None:
        path = tmp_path / "model.txt"
        path.write_text("[1, 2]")

        with pytest.raises(ConfigError, match="not a dictionary"):
            load_config(str(path), ModelConfig)

    def test_to_dict_is_flat(self) -> None:
        assert to_dict(TrainConfig())["betas"] == (0.9, 0.999)
