import pytest
import yaml

from queryvis.config import (DataConfig, ModelConfig, RunConfig, SourceConfig,
                             SyntheticConfig, desk_config, paper_scale_config,
                             tiny_config)


def valid_config(**model_kw):
    model = ModelConfig(**model_kw)
    return RunConfig(model=model, data=DataConfig(
        sources=[SourceConfig(synthetic=SyntheticConfig(num_videos=1))]))


class TestValidation:
    def test_presets_validate(self):
        for cfg in (tiny_config(), desk_config(), paper_scale_config()):
            cfg.validate()

    def test_dim_not_divisible_by_heads(self):
        with pytest.raises(ValueError, match="divisible"):
            valid_config(dim=30, num_heads=4).validate()

    def test_decreasing_strides(self):
        with pytest.raises(ValueError, match="strides"):
            valid_config(strides=(16, 8)).validate()

    def test_needs_coarse_stride_for_masks(self):
        with pytest.raises(ValueError, match="stride"):
            valid_config(strides=(2, 4)).validate()

    def test_unknown_aggregation(self):
        with pytest.raises(ValueError, match="aggregation"):
            valid_config(aggregation="median").validate()

    def test_source_must_pick_one_kind(self):
        cfg = valid_config()
        cfg.data.sources = [SourceConfig()]
        with pytest.raises(ValueError, match="exactly one"):
            cfg.validate()
        cfg.data.sources = [SourceConfig(annotations="a.json",
                                         synthetic=SyntheticConfig())]
        with pytest.raises(ValueError, match="exactly one"):
            cfg.validate()

    def test_needs_a_source(self):
        cfg = valid_config()
        cfg.data.sources = []
        with pytest.raises(ValueError, match="source"):
            cfg.validate()

    def test_focal_classification_stub_unimplemented(self):
        cfg = valid_config()
        cfg.loss.classification = "focal"
        with pytest.raises(ValueError, match="not implemented"):
            cfg.validate()


class TestSerialization:
    def test_yaml_round_trip(self, tmp_path):
        cfg = desk_config()
        cfg.model.aggregation = "average"
        cfg.steps = 42
        path = tmp_path / "cfg.yaml"
        with open(path, "w") as f:
            yaml.safe_dump(cfg.to_dict(), f)
        loaded = RunConfig.from_yaml(path)
        assert loaded.to_dict() == cfg.to_dict()
        assert loaded.model.aggregation == "average"
        assert tuple(loaded.model.strides) == tuple(cfg.model.strides)

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError, match="unknown config keys"):
            RunConfig.from_dict({"model": {"dimension": 64},
                                 "data": {"sources": [{"synthetic": {}}]}})

    def test_partial_dict_uses_defaults(self):
        cfg = RunConfig.from_dict({
            "data": {"sources": [{"synthetic": {"num_videos": 2}}]}})
        assert cfg.model.dim == 64
        assert cfg.data.sources[0].synthetic.num_videos == 2

    def test_override_helper(self):
        cfg = tiny_config(**{"model.num_queries": 7, "steps": 3})
        assert cfg.model.num_queries == 7
        assert cfg.steps == 3
        with pytest.raises(ValueError, match="override"):
            tiny_config(**{"model.not_a_field": 1})


class TestEnvOverrides:
    def test_out_dir_env(self, monkeypatch, tmp_path):
        cfg = tiny_config()
        monkeypatch.setenv("QUERYVIS_OUT_DIR", str(tmp_path / "env_runs"))
        assert cfg.resolved_out_dir() == tmp_path / "env_runs"
        monkeypatch.delenv("QUERYVIS_OUT_DIR")
        assert str(cfg.resolved_out_dir()) == cfg.out_dir

    def test_data_root_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv("QUERYVIS_DATA_ROOT", str(tmp_path))
        assert RunConfig.resolve_data_path("d/ann.json") == tmp_path / "d/ann.json"
        absolute = tmp_path / "abs.json"
        assert RunConfig.resolve_data_path(str(absolute)) == absolute
