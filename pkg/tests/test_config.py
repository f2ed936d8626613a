"""配置模块测试"""

import tempfile
from pathlib import Path

import pytest
import yaml
from pydantic import ValidationError

from src.config import Config, ProjectConfig
from src.dynamics import InputKind


def _write(data) -> str:
    with tempfile.NamedTemporaryFile(
        mode="w", suffix=".yaml", delete=False, encoding="utf-8"
    ) as f:
        yaml.dump(data, f, allow_unicode=True)
        return f.name


class TestConfig:
    """Config类测试"""

    def test_load_from_file(self, sample_config_dict):
        """测试从文件加载配置"""
        temp_path = _write(sample_config_dict)
        try:
            config = Config(temp_path)
            assert config.get("system.name") == "saturation-cascade"
            assert config.get("abstraction.eta") == 0.02
        finally:
            Path(temp_path).unlink()

    def test_get_nested_value(self, sample_config_dict):
        """测试获取嵌套配置值"""
        temp_path = _write(sample_config_dict)
        try:
            config = Config(temp_path)
            assert config.get("synthesis.scheduler") == "auu"
            assert len(config.get("synthesis.obstacles")) == 2
            assert config.get_nested("runtime") == {"threads": 1, "seed": 0}
        finally:
            Path(temp_path).unlink()

    def test_get_with_default(self, sample_config_dict):
        """测试使用默认值"""
        temp_path = _write(sample_config_dict)
        try:
            config = Config(temp_path)
            assert config.get("nonexistent.key", "default") == "default"
            assert config.get("logging.log_dir", "logs") == "logs"
        finally:
            Path(temp_path).unlink()

    def test_missing_file(self):
        """测试配置文件不存在"""
        with pytest.raises(FileNotFoundError):
            Config("no/such/config.yaml")

    def test_top_level_must_be_mapping(self):
        """测试顶层不是映射时报错"""
        temp_path = _write([1, 2, 3])
        try:
            with pytest.raises(ValueError):
                Config(temp_path)
        finally:
            Path(temp_path).unlink()

    def test_set_creates_sections(self):
        """测试 set 创建缺失的段落"""
        temp_path = _write({})
        try:
            config = Config(temp_path)
            config.set("abstraction.tau", 0.2)
            assert config.get("abstraction.tau") == 0.2
        finally:
            Path(temp_path).unlink()


class TestOverrides:
    """命令行覆盖项测试"""

    def test_apply_overrides(self, sample_config_dict):
        """测试覆盖项写入对应配置键，None 不覆盖"""
        temp_path = _write(sample_config_dict)
        try:
            config = Config(temp_path)
            config.apply_overrides(eta=0.05, tau=0.2, seed=7, threads=None, epsilon=None)
            settings = config.validate()
            assert settings.abstraction.eta == 0.05
            assert settings.abstraction.tau == 0.2
            assert settings.runtime.seed == 7
            assert settings.runtime.threads == 1
            assert settings.abstraction.epsilon == 0.1
        finally:
            Path(temp_path).unlink()

    def test_unknown_override(self, sample_config_dict):
        """测试不支持的覆盖项"""
        temp_path = _write(sample_config_dict)
        try:
            with pytest.raises(ValueError):
                Config(temp_path).apply_overrides(mu=0.1)
        finally:
            Path(temp_path).unlink()


class TestValidation:
    """配置验证测试"""

    def test_validate_config(self, sample_config_dict):
        """测试配置验证"""
        temp_path = _write(sample_config_dict)
        try:
            settings = Config(temp_path).validate()
            assert isinstance(settings, ProjectConfig)
            assert settings.system.gain == [16.0]
            assert settings.abstraction.grid_spec().eta == 0.02
            assert settings.synthesis.automaton().initial == 1
            assert len(settings.region_spec().obstacles) == 2
        finally:
            Path(temp_path).unlink()

    def test_defaults(self):
        """测试空配置使用默认值"""
        settings = ProjectConfig.model_validate({})
        assert settings.system.name == "saturation-cascade"
        assert settings.abstraction.eta == 0.009
        assert settings.abstraction.step is None
        assert settings.simulation.input.kind == InputKind.ZERO
        assert settings.synthesis.scheduler == "auu"
        assert settings.runtime.threads is None

    def test_unknown_key(self, sample_config_dict):
        """测试未知键报错"""
        sample_config_dict["abstraction"]["grid"] = 3
        with pytest.raises(ValidationError):
            ProjectConfig.model_validate(sample_config_dict)

    def test_out_of_range(self, sample_config_dict):
        """测试取值越界"""
        sample_config_dict["abstraction"]["eta"] = -0.1
        with pytest.raises(ValidationError):
            ProjectConfig.model_validate(sample_config_dict)

    def test_target_outside_domain(self, sample_config_dict):
        """测试目标集超出抽象定义域"""
        sample_config_dict["synthesis"]["target"] = {"lo": [-2.0, -2.0], "hi": [2.0, 2.0]}
        with pytest.raises(ValueError):
            ProjectConfig.model_validate(sample_config_dict)

    def test_initial_mode_out_of_range(self, sample_config_dict):
        """测试调度初始状态超出自动机状态数"""
        sample_config_dict["synthesis"]["initial_mode"] = 3
        with pytest.raises(ValueError):
            ProjectConfig.model_validate(sample_config_dict)

    def test_system_selector_required(self, sample_config_dict):
        """测试 system 段必须给出 name 或 factory"""
        sample_config_dict["system"] = {"name": None}
        with pytest.raises(ValidationError):
            ProjectConfig.model_validate(sample_config_dict)

    def test_piecewise_input(self, sample_config_dict):
        """测试分段常值输入配置"""
        sample_config_dict["simulation"]["input"] = {
            "kind": "piecewise-constant",
            "values": [[1.0], [0.0]],
            "segment_duration": 0.5,
        }
        settings = ProjectConfig.model_validate(sample_config_dict)
        assert settings.simulation.input.kind == InputKind.PIECEWISE_CONSTANT
        assert settings.simulation.input.value_at(0.7, 1)[0] == 0.0
