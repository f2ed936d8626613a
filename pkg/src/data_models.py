"""
数据模型定义
使用 Pydantic 进行数据验证 (盒子集合与各类检验报告)
"""

from typing import Any, Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator


class Box(BaseModel):
    """轴对齐闭盒子 [lo, hi]"""

    lo: List[float] = Field(..., description="各轴下界")
    hi: List[float] = Field(..., description="各轴上界")

    @model_validator(mode="after")
    def check_bounds(self) -> "Box":
        """验证维数一致且下界不大于上界"""
        if len(self.lo) != len(self.hi):
            raise ValueError(f"盒子上下界维数不一致: {len(self.lo)} vs {len(self.hi)}")
        if not self.lo:
            raise ValueError("盒子维数不能为零")
        if any(a > b for a, b in zip(self.lo, self.hi)):
            raise ValueError(f"盒子下界大于上界: lo={self.lo}, hi={self.hi}")
        return self

    @classmethod
    def cube(cls, half_width: float, dim: int) -> "Box":
        """以原点为中心的立方体"""
        return cls(lo=[-half_width] * dim, hi=[half_width] * dim)

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.lo, dtype=float)

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.hi, dtype=float)

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        """点是否在闭盒子内 (points 形状 (..., dim))"""
        points = np.asarray(points, dtype=float)
        return np.all((points >= self.lower - tol) & (points <= self.upper + tol), axis=-1)

    def contains_box(self, other: "Box") -> bool:
        return bool(np.all(other.lower >= self.lower) and np.all(other.upper <= self.upper))

    def scale(self, unit: np.ndarray) -> np.ndarray:
        """把 [0,1]^dim 中的点映射到盒子内"""
        return self.lower + np.asarray(unit) * (self.upper - self.lower)


class VerificationReport(BaseModel):
    """采样验证报告 (JSON 键: pass, n_samples, max_violation, worst_point)"""

    model_config = ConfigDict(populate_by_name=True)

    name: str = Field(default="", description="检验名称")
    passed: bool = Field(..., alias="pass", description="是否通过")
    n_samples: int = Field(..., description="采样点数")
    n_skipped: int = Field(default=0, description="被跳过的采样点数 (重合点或不可微点)")
    max_violation: float = Field(..., description="最大违反量")
    worst_point: List[float] = Field(default_factory=list, description="最坏采样点")
    worst_index: int = Field(default=-1, description="最坏采样点序号")
    warnings: List[str] = Field(default_factory=list, description="警告信息")
    details: Dict[str, Any] = Field(default_factory=dict, description="附加信息")

    def to_json_dict(self) -> Dict[str, Any]:
        return self.model_dump(by_alias=True)


class BoundCheckReport(BaseModel):
    """轨迹对界检验报告"""

    passed: bool = Field(..., description="是否通过")
    worst_ratio: float = Field(..., description="最大 LHS/RHS 比值")
    worst_pair: int = Field(default=-1, description="最坏轨迹对序号")
    worst_time: float = Field(default=0.0, description="最坏时刻")
    n_pairs: int = Field(default=0, description="轨迹对数量")
    n_times: int = Field(default=0, description="检验的时间点总数")


class CertificateSuiteReport(BaseModel):
    """一组证书检验的汇总"""

    passed: bool = Field(..., description="全部通过")
    reports: List[VerificationReport] = Field(default_factory=list)
    bound_checks: Dict[str, BoundCheckReport] = Field(default_factory=dict)
    gain_warnings: List[str] = Field(default_factory=list, description="增益门限警告")
    fitted: Dict[str, float] = Field(default_factory=dict, description="拟合得到的常数")

    def to_json_dict(self) -> Dict[str, Any]:
        return self.model_dump(by_alias=True)


class AbstractionBuildReport(BaseModel):
    """有限抽象构建报告 (同时作为 JSON 元数据)"""

    n_states: int
    n_inputs: int
    tau: float
    eta: float
    mu: float
    blocked_count: int = Field(default=0, description="BLOCKED 转移数")
    divergence_count: int = Field(default=0, description="积分发散的转移数")
    threads: int = Field(default=1, description="使用的线程数")


class EpsilonReport(BaseModel):
    """抽象精度 ε 的经验检验报告"""

    passed: bool
    epsilon: float
    max_deviation: float = Field(..., description="具体轨迹与抽象轨迹的最大欧氏偏差")
    n_runs: int
    run_length: int
    blocked_runs: int = Field(default=0, description="因 BLOCKED 提前结束的运行数")
    worst_run: int = -1
    worst_step: int = -1


class ReplayReport(BaseModel):
    """闭环回放报告"""

    success: bool = Field(..., description="全程位于获胜集且未离开定义域")
    n_slots: int = Field(..., description="回放的时隙数")
    failure_step: Optional[int] = Field(None, description="失败时隙")
    failure_reason: Optional[str] = Field(None, description="失败原因")
    entered_target_step: Optional[int] = Field(None, description="量化状态首次进入目标集的时隙")
    stayed_in_target: bool = Field(default=False, description="进入后量化状态是否一直留在目标集")
    max_target_distance: float = Field(
        default=0.0, description="进入目标集之后具体状态到目标集的最大距离 (无穷范数)"
    )
    hit_obstacle: bool = Field(default=False, description="具体状态是否进入过障碍物")
    scheduler_compliant: bool = Field(default=True, description="不可用时隙输入是否全为零")
