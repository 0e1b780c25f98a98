import dataclasses

import pytest

from nichedistill.config import (
    OUTPUT_DIR_ENV,
    RunConfig,
    RunSettings,
    apply_overrides,
    coerce_value,
    config_dict,
    default_config,
    load_config,
    save_config,
    validate_config,
)


class TestRoundTrip:
    def test_save_load_identity(self, tmp_path):
        cfg = default_config()
        cfg.input_table = "cells.csv"
        cfg.learning_rate = 3e-4
        cfg.noise_sigma = 0.07
        cfg.render_raster = True
        path = save_config(cfg, tmp_path / "run.cfg")
        assert load_config(path) == cfg

    def test_awkward_floats_survive(self, tmp_path):
        cfg = default_config()
        cfg.sharpness = 2.0**-40
        cfg.adam_eps = 1e-300
        assert load_config(save_config(cfg, tmp_path / "c.cfg")) == cfg

    def test_sections_present(self, tmp_path):
        text = save_config(default_config(), tmp_path / "c.cfg").read_text()
        for section in ("paths", "synth", "data", "model", "train", "eval"):
            assert f"[{section}]" in text

    def test_deterministic_bytes(self, tmp_path):
        a = save_config(default_config(), tmp_path / "a.cfg").read_bytes()
        b = save_config(default_config(), tmp_path / "b.cfg").read_bytes()
        assert a == b


class TestLoad:
    def test_partial_file_keeps_defaults(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("[train]\nepochs = 3\n")
        cfg = load_config(p)
        assert cfg.epochs == 3
        assert cfg.batch_size == RunConfig().batch_size

    def test_unknown_section(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("[nonsense]\nx = 1\n")
        with pytest.raises(ValueError, match=r"unknown config section"):
            load_config(p)

    def test_unknown_key(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("[train]\nwarmup = 1\n")
        with pytest.raises(ValueError, match="unknown config key"):
            load_config(p)

    def test_key_in_wrong_section(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("[train]\nn_cells = 10\n")
        with pytest.raises(ValueError, match=r"belongs in \[synth\]"):
            load_config(p)

    def test_bad_value_type(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("[train]\nepochs = soon\n")
        with pytest.raises(ValueError, match="expected an integer"):
            load_config(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_config(tmp_path / "absent.cfg")


class TestOverrides:
    def test_flag_wins(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("[train]\nepochs = 3\nseed = 5\n")
        cfg = apply_overrides(load_config(p), {"epochs": "9"})
        assert cfg.epochs == 9
        assert cfg.seed == 5

    def test_none_means_not_set(self):
        cfg = apply_overrides(default_config(), {"epochs": None})
        assert cfg.epochs == RunConfig().epochs

    def test_typed_values_pass_through(self):
        cfg = apply_overrides(default_config(), {"render_raster": True, "sharpness": 2.5})
        assert cfg.render_raster is True
        assert cfg.sharpness == 2.5

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown config key"):
            apply_overrides(default_config(), {"warmup": "1"})

    def test_every_key_is_overridable(self):
        cfg = default_config()
        for f in dataclasses.fields(RunConfig):
            apply_overrides(cfg, {f.name: getattr(cfg, f.name)})


class TestCoercion:
    def test_bool_spellings(self):
        assert coerce_value("render_raster", "Yes") is True
        assert coerce_value("render_raster", "0") is False
        with pytest.raises(ValueError, match="boolean"):
            coerce_value("render_raster", "maybe")

    def test_numbers(self):
        assert coerce_value("epochs", "12") == 12
        assert coerce_value("temperature", "2.5") == 2.5
        with pytest.raises(ValueError, match="number"):
            coerce_value("temperature", "warm")


class TestEnvDefault:
    def test_output_dir_env(self, monkeypatch):
        monkeypatch.setenv(OUTPUT_DIR_ENV, "/tmp/elsewhere")
        assert default_config().output_dir == "/tmp/elsewhere"
        monkeypatch.delenv(OUTPUT_DIR_ENV)
        assert default_config().output_dir == RunConfig().output_dir


class TestValidate:
    def test_default_is_valid(self):
        validate_config(default_config(), needs_eval=True)

    def test_k_floor_for_eval(self):
        cfg = default_config()
        cfg.n_niches = 1
        validate_config(cfg)  # fine for non-eval stages
        with pytest.raises(ValueError, match="n_niches >= 2"):
            validate_config(cfg, needs_eval=True)

    @pytest.mark.parametrize(
        "key,value",
        [
            ("n_cells", 0),
            ("temperature", 0.0),
            ("noise_sigma", -0.1),
            ("test_strip", 4),
            ("split_axis", "z"),
            ("pathology_mode", "sideways"),
            ("probe_features", "pixels"),
            ("learning_rate", -1.0),
        ],
    )
    def test_rejects_bad_values(self, key, value):
        cfg = default_config()
        setattr(cfg, key, value)
        with pytest.raises(ValueError, match=key):
            validate_config(cfg)


class TestSettingsMirror:
    def test_same_fields_and_defaults(self):
        cfg = config_dict(default_config())
        model = RunSettings()
        assert set(model.model_dump()) == set(cfg)
        base = RunConfig()
        for name, value in model.model_dump().items():
            assert value == getattr(base, name)

    def test_validates_types(self):
        settings = RunSettings(epochs="7", temperature="1.5")
        assert settings.epochs == 7
        assert settings.temperature == 1.5
        with pytest.raises(Exception):
            RunSettings(epochs="soon")
