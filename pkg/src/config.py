"""
配置管理模块
"""

import os
from typing import Any, Dict, List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .abstraction import GridSpec
from .data_models import Box
from .dynamics import DEFAULT_STEP, InputSignal
from .synthesis import RegionSpec, SchedulerAutomaton


class _Section(BaseModel):
    """配置段落基类: 未知键一律报错"""

    model_config = ConfigDict(extra="forbid")


class AffinePsiConfig(_Section):
    """仿射镇定函数 ψ(y) = K·y + c"""

    gain: List[List[float]]
    offset: Optional[List[float]] = None


class SystemConfig(_Section):
    name: Optional[str] = Field(default="saturation-cascade", description="内置系统名称")
    factory: Optional[str] = Field(default=None, description='用户系统工厂 "module:callable"')
    gain: Optional[List[float]] = Field(default=None, description="反步增益 (覆盖登记值)")
    psi: Optional[AffinePsiConfig] = Field(default=None, description="镇定函数 (覆盖登记值)")

    @model_validator(mode="after")
    def check_selector(self) -> "SystemConfig":
        if not self.name and not self.factory:
            raise ValueError("system 段必须给出 name 或 factory")
        return self


class SimulationConfig(_Section):
    x0: Optional[List[List[float]]] = Field(default=None, description="初始状态 (缺省取系统登记值)")
    horizon: float = Field(default=2.0, ge=0)
    step: float = Field(default=DEFAULT_STEP, gt=0)
    input: InputSignal = Field(default_factory=InputSignal.zero)
    plot: bool = True


class VerificationConfig(_Section):
    state_box: Box = Field(default_factory=lambda: Box.cube(2.0, 2))
    input_box: Box = Field(default_factory=lambda: Box.cube(10.0, 1))
    eta_state_box: Box = Field(default_factory=lambda: Box.cube(2.0, 1))
    eta_input_box: Box = Field(default_factory=lambda: Box.cube(10.0, 1))
    n_samples: int = Field(default=100_000, gt=0)
    contraction_samples: int = Field(default=20_000, gt=0)
    pair_samples: int = Field(default=1000, gt=0)
    tol: float = Field(default=1e-9, ge=0)
    method: Literal["sobol", "uniform"] = "sobol"
    bound_horizon: float = Field(default=2.0, gt=0)
    bound_step: float = Field(default=0.01, gt=0)


class AbstractionConfig(_Section):
    domain: Box = Field(default_factory=lambda: Box.cube(1.0, 2))
    eta: float = Field(default=0.009, gt=0)
    inputs: Box = Field(default_factory=lambda: Box.cube(10.0, 1))
    mu: float = Field(default=0.5, gt=0)
    tau: float = Field(default=0.1, gt=0)
    step: Optional[float] = Field(default=None, gt=0, description="积分步长 (缺省 τ/100)")
    epsilon: float = Field(default=0.1, gt=0)
    epsilon_runs: int = Field(default=200, gt=0)
    epsilon_run_length: int = Field(default=50, gt=0)

    def grid_spec(self) -> GridSpec:
        return GridSpec(
            domain=self.domain, eta=self.eta, inputs=self.inputs, mu=self.mu, tau=self.tau
        )


class SynthesisConfig(_Section):
    target: Box = Field(default_factory=lambda: Box.cube(0.05, 2))
    obstacles: List[Box] = Field(default_factory=list)
    scheduler: str = Field(default="auu", description="调度模式 (a: 可用, u: 不可用)")
    initial_mode: int = Field(default=1, ge=0, description="自动机初始状态 (从 0 编号)")
    replay_slots: int = Field(default=200, gt=0)
    replay_step: Optional[float] = Field(default=None, gt=0)
    initial_conditions: Optional[List[List[float]]] = None

    def automaton(self) -> SchedulerAutomaton:
        return SchedulerAutomaton.from_pattern(self.scheduler, self.initial_mode)


class OutputConfig(_Section):
    output_dir: str = "output"


class LoggingConfig(_Section):
    level: Literal["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"] = "INFO"
    log_dir: Optional[str] = "logs"
    max_log_size: int = 10485760
    backup_count: int = 5


class RuntimeConfig(_Section):
    threads: Optional[int] = Field(default=None, gt=0, description="线程数 (缺省为机器并行度)")
    seed: int = 0


class ProjectConfig(_Section):
    """完整配置"""

    system: SystemConfig = Field(default_factory=SystemConfig)
    simulation: SimulationConfig = Field(default_factory=SimulationConfig)
    verification: VerificationConfig = Field(default_factory=VerificationConfig)
    abstraction: AbstractionConfig = Field(default_factory=AbstractionConfig)
    synthesis: SynthesisConfig = Field(default_factory=SynthesisConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)
    logging: LoggingConfig = Field(default_factory=LoggingConfig)
    runtime: RuntimeConfig = Field(default_factory=RuntimeConfig)

    @model_validator(mode="after")
    def check_regions(self) -> "ProjectConfig":
        """目标集与障碍物必须位于抽象定义域内，调度初始状态必须存在"""
        self.region_spec()
        self.synthesis.automaton()
        return self

    def region_spec(self) -> RegionSpec:
        return RegionSpec(
            target=self.synthesis.target,
            obstacles=self.synthesis.obstacles,
            domain=self.abstraction.domain,
        )


# 命令行覆盖项 -> 配置键
OVERRIDE_KEYS = {
    "eta": "abstraction.eta",
    "tau": "abstraction.tau",
    "epsilon": "abstraction.epsilon",
    "seed": "runtime.seed",
    "threads": "runtime.threads",
}


class Config:
    """
    配置管理类 - 从YAML文件加载和管理配置
    """

    def __init__(self, config_path: str = "config/config.yaml"):
        """
        初始化配置

        Args:
            config_path: 配置文件路径
        """
        self.config_path = config_path
        self._config: Dict[str, Any] = {}
        self.load()

    def load(self) -> None:
        """从YAML文件加载配置"""
        if not os.path.exists(self.config_path):
            raise FileNotFoundError(f"配置文件不存在: {self.config_path}")

        with open(self.config_path, "r", encoding="utf-8") as f:
            self._config = yaml.safe_load(f) or {}
        if not isinstance(self._config, dict):
            raise ValueError(f"配置文件顶层必须是映射: {self.config_path}")

    def get(self, key: str, default: Any = None) -> Any:
        """
        获取配置值 (支持嵌套键，用点号分隔)

        Args:
            key: 配置键 (如 "abstraction.eta")
            default: 默认值

        Returns:
            配置值
        """
        keys = key.split(".")
        value = self._config

        for k in keys:
            if isinstance(value, dict):
                value = value.get(k)
                if value is None:
                    return default
            else:
                return default

        return value if value is not None else default

    def set(self, key: str, value: Any) -> None:
        """设置配置值 (点号分隔的嵌套键，中间段落不存在时创建)"""
        keys = key.split(".")
        node = self._config
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ValueError(f"配置键 {key} 的上级不是段落")
        node[keys[-1]] = value

    def get_nested(self, section: str) -> Dict[str, Any]:
        """
        获取嵌套配置段落

        Args:
            section: 配置段落名称

        Returns:
            配置字典
        """
        return self._config.get(section, {})

    def apply_overrides(self, **overrides: Any) -> None:
        """应用命令行覆盖项 (值为 None 的忽略)"""
        for name, value in overrides.items():
            if name not in OVERRIDE_KEYS:
                raise ValueError(f"不支持的覆盖项: {name}")
            if value is not None:
                self.set(OVERRIDE_KEYS[name], value)

    def validate(self) -> ProjectConfig:
        """
        验证配置的完整性和有效性

        Returns:
            解析后的配置模型

        Raises:
            pydantic.ValidationError: 未知键、类型错误或取值越界
        """
        return ProjectConfig.model_validate(self._config)

    def __repr__(self) -> str:
        """配置的字符串表示"""
        return f"<Config: {self.config_path}>"
