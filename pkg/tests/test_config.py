from dataclasses import replace
from pathlib import Path

import pytest

from skeletal_radiance.config import (THREADS_ENV, VARIANTS, DataConfig, EvalConfig, FieldConfig, RunConfig,
                                      TrainConfig, load_config, parse_frame_range, resolve_threads, write_config)
from skeletal_radiance.errors import ConfigError

DEFAULT_YAML = Path(__file__).resolve().parents[1] / "configs" / "default.yaml"


class TestFieldConfig:
    def test_defaults(self):
        config = FieldConfig()
        assert config.variant == "Sk+Px+T+MV"
        assert config.memory_offsets == (-5, 5)
        assert replace(config, memory_offset=0).memory_offsets == ()

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_variant_round_trip(self, variant):
        assert FieldConfig().with_variant(variant).variant == variant

    def test_variant_keeps_other_settings(self):
        config = FieldConfig(d_img=8, memory_offset=2).with_variant("Px")
        assert (config.d_img, config.memory_offset) == (8, 2)
        assert not config.enable_skeletal and config.enable_pixel_aligned

    @pytest.mark.parametrize("variant", ["", "Sk+X", "T", "Px+T", "MV+Sk+Px"])
    def test_unknown_variant(self, variant):
        with pytest.raises(ConfigError, match="unknown variant"):
            FieldConfig().with_variant(variant)

    @pytest.mark.parametrize("changes", [
        {"d_img": 0},
        {"encoder_channels": (4,)},
        {"encoder_channels": (4, 0)},
        {"memory_offset": -1},
        {"bbox_margin": -0.1},
        {"enable_skeletal": False, "enable_pixel_aligned": False},
        {"enable_skeletal": False, "enable_multiview_transformer": False},
        {"enable_pixel_aligned": False},
    ])
    def test_rejects(self, changes):
        with pytest.raises(ConfigError):
            FieldConfig(**changes)


class TestSections:
    @pytest.mark.parametrize("klass,changes", [
        (TrainConfig, {"rays_per_step": 0}),
        (TrainConfig, {"learning_rate": 0.0}),
        (TrainConfig, {"precision": "float16"}),
        (TrainConfig, {"foreground_fraction": 1.5}),
        (TrainConfig, {"mask_dilation": -1}),
        (EvalConfig, {"protocol": "unseen"}),
        (EvalConfig, {"tile_size": 0}),
    ])
    def test_rejects(self, klass, changes):
        with pytest.raises(ConfigError):
            klass(**changes)

    def test_dict_round_trip(self):
        config = RunConfig(data=DataConfig(train_subjects=("subject_000", "subject_001")))
        assert RunConfig.from_dict(config.to_dict()) == config

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="unknown config sections: render"):
            RunConfig.from_dict({"render": {}})

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="d_image"):
            RunConfig.from_dict({"field": {"d_image": 4}})

    def test_threads_are_an_eval_setting_only(self):
        with pytest.raises(ConfigError, match="threads"):
            RunConfig.from_dict({"train": {"threads": 2}})
        assert RunConfig.from_dict({"eval": {"threads": 2}}).eval.threads == 2


class TestFiles:
    def test_shipped_defaults_match_dataclasses(self):
        assert load_config(DEFAULT_YAML) == RunConfig()

    def test_values_are_coerced(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text(
            "field:\n  encoder_channels: [4, 8]\n  enable_temporal_transformer: no\n  bbox_margin: 0.05\n"
            "data:\n  train_subjects: [subject_000, subject_002]\n  train_frames: 0-9\n"
            "eval:\n  save_images: yes\ntrain:\n",
            encoding="utf-8")
        config = load_config(path)
        assert config.field.encoder_channels == (4, 8)
        assert config.field.enable_temporal_transformer is False
        assert config.field.bbox_margin == 0.05
        assert config.data.train_subjects == ("subject_000", "subject_002")
        assert config.data.train_frames == "0-9"
        assert config.eval.save_images is True
        assert config.train == TrainConfig()

    def test_comma_lists_are_accepted(self):
        config = load_config(overrides={"field": {"encoder_channels": "4, 8"},
                                        "data": {"test_subjects": "subject_003, subject_004"}})
        assert config.field.encoder_channels == (4, 8)
        assert config.data.test_subjects == ("subject_003", "subject_004")

    def test_overrides_win_and_none_is_ignored(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("train:\n  steps: 10\n  seed: 3\n", encoding="utf-8")
        config = load_config(path, {"train": {"steps": 40, "seed": None}, "eval": {"threads": "2"}})
        assert (config.train.steps, config.train.seed, config.eval.threads) == (40, 3, 2)

    def test_bad_value(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("train:\n  steps: many\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="train.steps"):
            load_config(path)

    @pytest.mark.parametrize("section,key,value", [
        ("eval", "save_images", "maybe"),
        ("eval", "save_images", 1),
        ("train", "steps", 2.5),
        ("train", "steps", True),
    ])
    def test_wrong_types(self, section, key, value):
        with pytest.raises(ConfigError, match=f"{section}.{key}"):
            load_config(overrides={section: {key: value}})

    @pytest.mark.parametrize("text", ["train: [1, 2\n", "- field\n- train\n", "train: 5\n"])
    def test_malformed_file(self, tmp_path, text):
        path = tmp_path / "run.yaml"
        path.write_text(text, encoding="utf-8")
        with pytest.raises(ConfigError, match="malformed"):
            load_config(path)

    def test_empty_file_gives_defaults(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("# nothing here\n", encoding="utf-8")
        assert load_config(path) == RunConfig()

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(tmp_path / "absent.yaml")

    def test_write_round_trip(self, tmp_path):
        config = RunConfig(
            field=FieldConfig(d_img=8, encoder_channels=(3, 5)).with_variant("Sk+Px+MV"),
            train=TrainConfig(learning_rate=1e-3, precision="float64"),
            data=DataConfig(test_subjects=("subject_007",)),
            eval=EvalConfig(protocol="identity", save_images=True),
        )
        assert load_config(write_config(config, tmp_path / "out.yaml")) == config


class TestFrameRange:
    def test_inclusive(self):
        assert parse_frame_range("0-19") == range(0, 20)
        assert parse_frame_range("5") == range(5, 6)

    @pytest.mark.parametrize("text", ["", "a-b", "3-1", "-2", "1-2-3"])
    def test_invalid(self, text):
        with pytest.raises(ConfigError):
            parse_frame_range(text)


class TestThreads:
    def test_flag_first(self, monkeypatch):
        monkeypatch.setenv(THREADS_ENV, "3")
        assert resolve_threads(5, 2) == 5

    def test_environment_before_config(self, monkeypatch):
        monkeypatch.setenv(THREADS_ENV, "3")
        assert resolve_threads(None, 2) == 3

    def test_config_then_default(self, monkeypatch):
        monkeypatch.delenv(THREADS_ENV, raising=False)
        assert resolve_threads(None, 2) == 2
        assert resolve_threads() == 1

    def test_invalid(self, monkeypatch):
        monkeypatch.setenv(THREADS_ENV, "lots")
        with pytest.raises(ConfigError, match=THREADS_ENV):
            resolve_threads()
        with pytest.raises(ConfigError):
            resolve_threads(0)
