"""
控制系统动力学模块
向量场、分段常值输入信号、定步长RK4轨迹积分，以及增量稳定性的经验检验
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator

from .data_models import BoundCheckReport
from .exceptions import DimensionMismatchError, DivergenceError, InvalidSetError

if TYPE_CHECKING:
    from .lyapunov import ExponentialBound

logger = logging.getLogger(__name__)

# 任一状态分量超过该阈值即判为发散
DIVERGENCE_THRESHOLD = 1e9
# 有限差分步长
FD_STEP = 1e-6
# 默认积分步长 (tau/100)
DEFAULT_STEP = 1e-3

ArrayFunc = Callable[[np.ndarray, np.ndarray], np.ndarray]


def batch_shape(x: np.ndarray, u: np.ndarray) -> Tuple[int, ...]:
    """状态与输入前导轴广播后的批量形状"""
    return np.broadcast_shapes(x.shape[:-1], u.shape[:-1])


def difference_jacobian(
    func: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    h: float = FD_STEP,
    mode: str = "central",
) -> np.ndarray:
    """
    有限差分雅可比矩阵 (支持批量)

    Args:
        func: 映射 (..., d) -> (..., k)
        x: 求导点, 形状 (..., d)
        h: 差分步长
        mode: central / forward / backward

    Returns:
        形状 (..., k, d) 的雅可比矩阵
    """
    x = np.asarray(x, dtype=float)
    shift = np.eye(x.shape[-1]) * h
    base = x[..., None, :]
    if mode == "central":
        diff = (func(base + shift) - func(base - shift)) / (2.0 * h)
    elif mode == "forward":
        diff = (func(base + shift) - func(base)) / h
    elif mode == "backward":
        diff = (func(base) - func(base - shift)) / h
    else:
        raise ValueError(f"未知差分方式: {mode}")
    return np.swapaxes(diff, -1, -2)


@dataclass(frozen=True)
class VectorField:
    """
    控制系统右端 f(x, u)

    func 按批量约定求值: x 形状 (..., n)，u 形状 (..., m)，返回 (..., n)。
    jac_x / jac_u 为可选的解析雅可比，返回 (..., n, n) / (..., n, m)。
    """

    state_dim: int
    input_dim: int
    func: ArrayFunc
    jac_x: Optional[ArrayFunc] = None
    jac_u: Optional[ArrayFunc] = None
    name: str = "field"

    def __post_init__(self) -> None:
        if self.state_dim <= 0:
            raise ValueError(f"状态维数必须为正: {self.state_dim}")
        if self.input_dim < 0:
            raise ValueError(f"输入维数不能为负: {self.input_dim}")

    def evaluate(self, x, u) -> np.ndarray:
        """在 (x, u) 处求值"""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if x.shape[-1] != self.state_dim or u.shape[-1] != self.input_dim:
            raise DimensionMismatchError(
                f"{self.name}: 期望状态/输入维数 ({self.state_dim}, {self.input_dim})，"
                f"实际 ({x.shape[-1]}, {u.shape[-1]})"
            )
        out = np.asarray(self.func(x, u), dtype=float)
        if out.shape[-1] != self.state_dim:
            raise DimensionMismatchError(
                f"{self.name}: 输出维数 {out.shape[-1]} 与状态维数 {self.state_dim} 不一致"
            )
        return np.broadcast_to(out, batch_shape(x, u) + (self.state_dim,))

    def jacobian_x(self, x, u) -> np.ndarray:
        """∂f/∂x，无解析式时用中心差分"""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if self.jac_x is not None:
            return np.asarray(self.jac_x(x, u), dtype=float)
        return difference_jacobian(lambda z: self.evaluate(z, u[..., None, :]), x)

    def jacobian_u(self, x, u) -> np.ndarray:
        """∂f/∂u，无解析式时用中心差分"""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if self.jac_u is not None:
            return np.asarray(self.jac_u(x, u), dtype=float)
        if self.input_dim == 0:
            return np.zeros(batch_shape(x, u) + (self.state_dim, 0))
        return difference_jacobian(lambda w: self.evaluate(x[..., None, :], w), u)

    def one_sided_jacobians(self, x, u, h: float = FD_STEP) -> Tuple[np.ndarray, np.ndarray]:
        """前向/后向差分的 ∂f/∂x，用于检测不可微点"""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        func = lambda z: self.evaluate(z, u[..., None, :])  # noqa: E731
        return (
            difference_jacobian(func, x, h, mode="forward"),
            difference_jacobian(func, x, h, mode="backward"),
        )


def check_jacobians(
    field: VectorField, points: np.ndarray, inputs: np.ndarray, rel_tol: float = 1e-4
) -> float:
    """
    比较解析雅可比与中心差分

    Args:
        field: 带解析雅可比的向量场
        points: 采样状态 (N, n)
        inputs: 采样输入 (N, m)
        rel_tol: 相对容差 (仅用于日志)

    Returns:
        最大相对误差
    """
    points = np.asarray(points, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    worst = 0.0
    checks = []
    if field.jac_x is not None:
        approx = difference_jacobian(lambda z: field.evaluate(z, inputs[..., None, :]), points)
        checks.append((field.jac_x(points, inputs), approx))
    if field.jac_u is not None and field.input_dim > 0:
        approx = difference_jacobian(lambda w: field.evaluate(points[..., None, :], w), inputs)
        checks.append((field.jac_u(points, inputs), approx))
    for exact, approx in checks:
        exact = np.asarray(exact, dtype=float)
        scale = np.maximum(np.abs(exact), 1.0)
        worst = max(worst, float(np.max(np.abs(exact - approx) / scale)))
    if worst > rel_tol:
        logger.warning(f"{field.name}: 解析雅可比与差分不一致，最大相对误差 {worst:.3e}")
    return worst


class InputKind(str, Enum):
    """输入信号类型"""

    CONSTANT = "constant"
    PIECEWISE_CONSTANT = "piecewise-constant"
    ZERO = "zero"


class InputSignal(BaseModel):
    """分段常值输入信号 (右连续，超出最后一段后保持末值)"""

    kind: InputKind = Field(default=InputKind.ZERO, description="信号类型")
    values: List[List[float]] = Field(default_factory=list, description="每段的输入值")
    segment_duration: Optional[float] = Field(None, description="每段持续时间 (秒)")

    @model_validator(mode="after")
    def check_segments(self) -> "InputSignal":
        """检查各类型信号的字段组合"""
        if self.kind == InputKind.CONSTANT and len(self.values) != 1:
            raise ValueError("常值信号必须恰好给出一个输入值")
        if self.kind == InputKind.PIECEWISE_CONSTANT:
            if not self.values:
                raise ValueError("分段常值信号至少需要一段")
            if self.segment_duration is None or self.segment_duration <= 0:
                raise ValueError("分段持续时间必须为正")
        return self

    @classmethod
    def zero(cls) -> "InputSignal":
        return cls(kind=InputKind.ZERO)

    @classmethod
    def constant(cls, value: Sequence[float]) -> "InputSignal":
        return cls(kind=InputKind.CONSTANT, values=[[float(v) for v in np.atleast_1d(value)]])

    @classmethod
    def piecewise(
        cls, values: Sequence[Sequence[float]], segment_duration: float
    ) -> "InputSignal":
        rows = [[float(v) for v in np.atleast_1d(row)] for row in values]
        return cls(
            kind=InputKind.PIECEWISE_CONSTANT, values=rows, segment_duration=segment_duration
        )

    def value_at(self, t: float, input_dim: int) -> np.ndarray:
        """t 时刻的输入值"""
        if self.kind == InputKind.ZERO:
            return np.zeros(input_dim)
        if self.kind == InputKind.CONSTANT:
            value = np.asarray(self.values[0], dtype=float)
        else:
            index = int(np.floor(t / self.segment_duration + 1e-9))
            value = np.asarray(self.values[min(max(index, 0), len(self.values) - 1)], dtype=float)
        if value.shape != (input_dim,):
            raise DimensionMismatchError(f"输入值维数 {value.shape} 与系统输入维数 {input_dim} 不一致")
        return value

    def sup_distance(self, other: "InputSignal", horizon: float, input_dim: int) -> float:
        """‖υ − υ'‖∞ 在 [0, horizon] 上的值"""
        times = {0.0}
        for signal in (self, other):
            if signal.kind == InputKind.PIECEWISE_CONSTANT:
                k = np.arange(len(signal.values)) * signal.segment_duration
                times.update(float(t) for t in k if t <= horizon)
        return max(
            float(np.linalg.norm(self.value_at(t, input_dim) - other.value_at(t, input_dim)))
            for t in sorted(times)
        )


@dataclass(frozen=True)
class Trajectory:
    """轨迹 ξ_{xυ}(t)"""

    times: np.ndarray
    states: np.ndarray

    def __post_init__(self) -> None:
        if len(self.times) != len(self.states):
            raise DimensionMismatchError("时间序列与状态序列长度不一致")

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    def to_frame(self) -> pd.DataFrame:
        """转换为表格 (列: t, x1..xn)"""
        frame = pd.DataFrame(
            self.states, columns=[f"x{i + 1}" for i in range(self.states.shape[1])]
        )
        frame.insert(0, "t", self.times)
        return frame


def saturation(x):
    """饱和函数 sat，截断到 [-1, 1]"""
    return np.clip(x, -1.0, 1.0)


def project_box(u, lo, hi) -> np.ndarray:
    """
    向盒子 U = [lo, hi] 的欧氏投影 (最近点函数)

    Raises:
        InvalidSetError: 某分量 lo > hi
    """
    u = np.asarray(u, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(lo > hi):
        raise InvalidSetError(f"盒子下界大于上界: lo={lo}, hi={hi}")
    return np.minimum(np.maximum(u, lo), hi)


def _step_count(duration: float, step: float) -> int:
    """检查 duration 是 step 的整数倍并返回步数"""
    if step <= 0:
        raise ValueError(f"积分步长必须为正: {step}")
    if duration < 0:
        raise ValueError(f"积分时长不能为负: {duration}")
    count = int(round(duration / step))
    if abs(count * step - duration) > 1e-9 * max(1.0, duration):
        raise ValueError(f"时长 {duration} 不是步长 {step} 的整数倍")
    return count


def rk4_step(field: VectorField, x: np.ndarray, u: np.ndarray, h: float) -> np.ndarray:
    """经典四阶龙格-库塔一步 (输入在步内保持常值)"""
    k1 = field.evaluate(x, u)
    k2 = field.evaluate(x + 0.5 * h * k1, u)
    k3 = field.evaluate(x + 0.5 * h * k2, u)
    k4 = field.evaluate(x + h * k3, u)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _diverged(x: np.ndarray) -> np.ndarray:
    return ~np.all(np.isfinite(x) & (np.abs(x) <= DIVERGENCE_THRESHOLD), axis=-1)


def integrate(
    field: VectorField,
    x0,
    u: Optional[InputSignal] = None,
    horizon: float = 1.0,
    step: float = DEFAULT_STEP,
) -> Trajectory:
    """
    定步长RK4积分

    Args:
        field: 向量场
        x0: 初始状态
        u: 分段常值输入 (默认零输入)，分段边界必须落在积分网格上
        horizon: 积分时长 (step 的整数倍)
        step: 积分步长

    Returns:
        轨迹 (末时刻等于 horizon)

    Raises:
        DivergenceError: 出现非有限状态或分量超过阈值
    """
    u = u or InputSignal.zero()
    n_steps = _step_count(horizon, step)
    if u.kind == InputKind.PIECEWISE_CONSTANT:
        _step_count(u.segment_duration, step)

    x = np.asarray(x0, dtype=float).copy()
    if x.shape != (field.state_dim,):
        raise DimensionMismatchError(f"初始状态维数 {x.shape} 与 {field.state_dim} 不一致")

    times = np.linspace(0.0, horizon, n_steps + 1)
    states = np.empty((n_steps + 1, field.state_dim))
    states[0] = x
    with np.errstate(all="ignore"):
        for k in range(n_steps):
            x = rk4_step(field, x, u.value_at(k * step, field.input_dim), step)
            if _diverged(x):
                raise DivergenceError(float(times[k + 1]))
            states[k + 1] = x
    return Trajectory(times=times, states=states)


def integrate_batch(
    field: VectorField, x0: np.ndarray, u: np.ndarray, duration: float, step: float = DEFAULT_STEP
) -> Tuple[np.ndarray, np.ndarray]:
    """
    批量积分: 每一行一个初始状态，输入在整个时长内保持常值

    Args:
        field: 向量场
        x0: 初始状态 (N, n)
        u: 常值输入 (N, m) 或 (m,)
        duration: 积分时长
        step: 积分步长

    Returns:
        (末状态 (N, n), 未发散掩码 (N,))，发散行的末状态为 nan
    """
    n_steps = _step_count(duration, step)
    x = np.array(x0, dtype=float)
    u = np.asarray(u, dtype=float)
    ok = np.ones(x.shape[0], dtype=bool)
    with np.errstate(all="ignore"):
        for _ in range(n_steps):
            x = rk4_step(field, x, u, step)
            bad = _diverged(x)
            if bad.any():
                ok &= ~bad
                x[bad] = 0.0
    x[~ok] = np.nan
    return x, ok


def check_delta_iss_empirical(
    field: VectorField,
    pairs: Sequence[Tuple[Sequence[float], Sequence[float], InputSignal, InputSignal]],
    bound: "ExponentialBound",
    horizon: float,
    step: float = DEFAULT_STEP,
    tol: float = 1e-9,
) -> BoundCheckReport:
    """
    经验检验增量输入-状态稳定不等式

    d(ξ_{xυ}(t), ξ_{x'υ'}(t)) ≤ C·e^{−λt}·d(x,x') + γ·‖υ−υ'‖∞

    Args:
        field: 向量场
        pairs: (x, x', υ, υ') 列表
        bound: 指数界 (含距离度量)
        horizon: 检验时长
        step: 积分步长
        tol: 相对容差

    Returns:
        最坏比值 LHS/RHS 的报告
    """
    worst_ratio, worst_pair, worst_time = 0.0, -1, 0.0
    n_times = 0
    for index, (x, xp, v, vp) in enumerate(pairs):
        first = integrate(field, x, v, horizon, step)
        second = integrate(field, xp, vp, horizon, step)
        lhs = bound.distance(first.states, second.states)
        gap = v.sup_distance(vp, horizon, field.input_dim)
        rhs = bound.C * np.exp(-bound.lambda_decay * first.times) * lhs[0] + bound.gamma * gap
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(rhs > 0, lhs / rhs, np.where(lhs <= 1e-15, 0.0, np.inf))
        k = int(np.argmax(ratio))
        n_times += len(ratio)
        if ratio[k] > worst_ratio:
            worst_ratio, worst_pair, worst_time = float(ratio[k]), index, float(first.times[k])

    passed = worst_ratio <= 1.0 + tol
    if not passed:
        logger.warning(f"增量稳定界被违反: 比值 {worst_ratio:.6g} (轨迹对 {worst_pair}, t={worst_time})")
    return BoundCheckReport(
        passed=passed,
        worst_ratio=worst_ratio,
        worst_pair=worst_pair,
        worst_time=worst_time,
        n_pairs=len(pairs),
        n_times=n_times,
    )
