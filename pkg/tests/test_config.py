from __future__ import annotations

import numpy as np
import pytest

from objslam.config import (
    CameraConfig,
    ConfigError,
    Flags,
    NoiseConfig,
    Paths,
    RunConfig,
    SceneConfig,
    apply_overrides,
    build_run_config,
    config_document,
    load_run_config,
    write_config_yaml,
)


class TestDefaults:
    def test_empty_document_gives_defaults(self):
        cfg = build_run_config({})
        assert cfg == RunConfig()
        assert cfg.mode == "incremental"
        assert cfg.flags.size_prior and cfg.flags.orientation_prior

    def test_none_document_gives_defaults(self):
        assert build_run_config(None) == RunConfig()

    def test_no_path_gives_defaults(self):
        assert load_run_config() == RunConfig()


class TestSections:
    def test_nested_sections_parse(self):
        cfg = build_run_config(
            {
                "mode": "batch",
                "match_threshold": 0.25,
                "paths": {"dataset": "d", "output_dir": "o"},
                "noise": {"bbox_sigma_px": 2.5},
                "flags": {"size_prior": False},
                "solver": {"max_iterations": 17},
                "scene": {"n_objects": 4, "area": [1.5, 0.9]},
            }
        )
        assert cfg.mode == "batch"
        assert cfg.match_threshold == 0.25
        assert cfg.paths.dataset == "d"
        assert cfg.noise.bbox_sigma_px == 2.5
        assert not cfg.flags.size_prior
        assert cfg.solver.max_iterations == 17
        assert cfg.scene.area == (1.5, 0.9)
        # untouched sections keep their defaults
        assert cfg.association.gate == 0.2

    def test_null_section_is_defaults(self):
        cfg = build_run_config({"noise": None})
        assert cfg.noise == NoiseConfig()

    def test_unknown_section_key_rejected(self):
        with pytest.raises(ConfigError, match=r"\[noise\]"):
            build_run_config({"noise": {"bbox_sigma": 1.0}})

    def test_unknown_top_level_key_rejected(self):
        with pytest.raises(ConfigError, match="top-level"):
            build_run_config({"velocity": 3})

    def test_non_mapping_section_rejected(self):
        with pytest.raises(ConfigError, match="mapping"):
            build_run_config({"flags": [1, 2]})

    def test_invalid_section_value_rejected(self):
        with pytest.raises(ConfigError, match=r"\[noise\]"):
            build_run_config({"noise": {"bbox_sigma_px": -1.0}})

    def test_bad_mode_rejected(self):
        with pytest.raises(ConfigError, match="mode"):
            build_run_config({"mode": "online"})


class TestValidation:
    def test_camera_rejects_nonpositive_focal(self):
        with pytest.raises(ValueError):
            CameraConfig(fx=0.0)

    def test_scene_rejects_negative_frames(self):
        with pytest.raises(ValueError):
            SceneConfig(n_frames=-1)

    def test_scene_rejects_bad_area(self):
        with pytest.raises(ValueError):
            SceneConfig(area=(2.0, 0.0))

    def test_noise_rejects_zero_sigma(self):
        with pytest.raises(ValueError):
            NoiseConfig(odom_sigma_rot=0.0)

    def test_match_threshold_positive(self):
        with pytest.raises(ValueError):
            RunConfig(match_threshold=0.0)


class TestOverrides:
    def test_dotted_override_types(self):
        doc = apply_overrides(
            {},
            [
                "solver.max_iterations=50",
                "flags.size_prior=false",
                "noise.bbox_sigma_px=1.5",
                "mode=batch",
                "paths.dataset=runs/a",
            ],
        )
        cfg = build_run_config(doc)
        assert cfg.solver.max_iterations == 50
        assert cfg.flags.size_prior is False
        assert cfg.noise.bbox_sigma_px == 1.5
        assert cfg.mode == "batch"
        assert cfg.paths.dataset == "runs/a"

    def test_override_wins_over_file_value(self, tmp_path):
        p = tmp_path / "run.yaml"
        p.write_text("mode: batch\nnoise:\n  bbox_sigma_px: 9.0\n")
        cfg = load_run_config(p, ["noise.bbox_sigma_px=3.0"])
        assert cfg.mode == "batch"
        assert cfg.noise.bbox_sigma_px == 3.0

    def test_missing_equals_rejected(self):
        with pytest.raises(ConfigError, match="key=value"):
            apply_overrides({}, ["solver.max_iterations"])

    def test_empty_key_component_rejected(self):
        with pytest.raises(ConfigError, match="empty key"):
            apply_overrides({}, ["solver.=3"])

    def test_descending_into_scalar_rejected(self):
        with pytest.raises(ConfigError, match="non-mapping"):
            apply_overrides({"mode": "batch"}, ["mode.inner=1"])

    def test_unknown_override_key_caught_at_build(self):
        doc = apply_overrides({}, ["solver.step_size=1"])
        with pytest.raises(ConfigError):
            build_run_config(doc)


class TestFiles:
    def test_yaml_round_trip(self, tmp_path):
        cfg = build_run_config(
            {"mode": "batch", "noise": {"bbox_sigma_px": 2.0}, "scene": {"n_objects": 3}}
        )
        p = tmp_path / "cfg.yaml"
        write_config_yaml(cfg, p)
        assert load_run_config(p) == cfg

    def test_document_round_trip(self):
        cfg = build_run_config({"scene": {"area": [1.1, 0.7]}, "match_threshold": 0.4})
        assert build_run_config(config_document(cfg)) == cfg

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_run_config(tmp_path / "absent.yaml")

    def test_invalid_yaml_raises(self, tmp_path):
        p = tmp_path / "bad.yaml"
        p.write_text("mode: [unclosed\n")
        with pytest.raises(ConfigError, match="not valid YAML"):
            load_run_config(p)

    def test_non_mapping_file_raises(self, tmp_path):
        p = tmp_path / "list.yaml"
        p.write_text("- a\n- b\n")
        with pytest.raises(ConfigError, match="mapping"):
            load_run_config(p)

    def test_empty_file_is_defaults(self, tmp_path):
        p = tmp_path / "empty.yaml"
        p.write_text("")
        assert load_run_config(p) == RunConfig()


class TestFactorPolicy:
    def test_flags_and_noise_propagate(self):
        cfg = build_run_config(
            {
                "flags": {"orientation_prior": False},
                "noise": {"bbox_sigma_px": 3.0, "odom_sigma_rot": 0.02},
            }
        )
        policy = cfg.factor_policy((640, 480))
        assert policy.bbox_sigma_px == 3.0
        assert policy.odom_sigma_rot == 0.02
        assert policy.enable_size_prior
        assert not policy.enable_orientation_prior
        assert policy.image_size == (640.0, 480.0)

    def test_image_size_optional(self):
        assert RunConfig().factor_policy().image_size is None

    def test_prior_config_shared(self):
        cfg = build_run_config({"prior": {"kz": 3.0}})
        assert cfg.factor_policy().prior_config.kz == 3.0

    def test_paths_defaults(self):
        p = Paths()
        assert p.dataset is None and p.output_dir == "out"

    def test_flags_independent(self):
        f = Flags(size_prior=False, orientation_prior=True, centroid_factor=False)
        assert (f.size_prior, f.orientation_prior, f.centroid_factor) == (
            False,
            True,
            False,
        )
