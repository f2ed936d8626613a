"""
收缩度量模块
逐点检验收缩度量条件 (状态、状态与输入)，构造反步分块度量，拟合收缩率，检验常值度量下的轨迹界
"""

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Optional, Sequence, Tuple

import numpy as np

from .data_models import BoundCheckReport, Box, VerificationReport
from .dynamics import DEFAULT_STEP, FD_STEP, InputSignal, VectorField, check_delta_iss_empirical
from .exceptions import ContractViolationError, DimensionMismatchError
from .lyapunov import ExponentialBound, _check_symmetric, eigen_symmetric, sample_unit
from .parallel import map_ranges

if TYPE_CHECKING:
    from .backstepping import StabilizingFunction

logger = logging.getLogger(__name__)

# 前向/后向差分雅可比之差超过该值视为不可微点
KINK_TOL = 1e-2


@dataclass(frozen=True, eq=False)
class MetricField:
    """
    黎曼度量 G(x)

    func 按批量约定求值: x 形状 (..., n)，返回 (..., n, n)。
    jac 为可选的解析导数，返回 (..., n, n, n)，最后一轴为对 x_k 的偏导。
    """

    state_dim: int
    func: Callable[[np.ndarray], np.ndarray]
    jac: Optional[Callable[[np.ndarray], np.ndarray]] = None
    is_constant: bool = False
    name: str = "G"

    @classmethod
    def constant(cls, G, name: str = "G") -> "MetricField":
        matrix = _check_symmetric(G)
        values = eigen_symmetric(matrix)
        if values[0] <= 0:
            raise ContractViolationError(f"{name}: 常值度量不是正定矩阵 (最小特征值 {values[0]:.3e})")
        n = matrix.shape[0]
        return cls(
            state_dim=n,
            func=lambda x: np.broadcast_to(matrix, np.shape(x)[:-1] + (n, n)),
            jac=lambda x: np.zeros(np.shape(x)[:-1] + (n, n, n)),
            is_constant=True,
            name=name,
        )

    def evaluate(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.state_dim:
            raise DimensionMismatchError(f"{self.name}: 期望维数 {self.state_dim}，实际 {x.shape[-1]}")
        return np.asarray(self.func(x), dtype=float)

    def derivative_along(self, x, v, h: float = FD_STEP) -> np.ndarray:
        """方向导数 Σ_k (∂G/∂x_k)·v_k"""
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        if self.jac is not None:
            return np.einsum("...ijk,...k->...ij", np.asarray(self.jac(x), dtype=float), v)
        return (self.evaluate(x + h * v) - self.evaluate(x - h * v)) / (2.0 * h)

    def lower_bound(self, box: Box, n_samples: int = 1000, seed: int = 0) -> float:
        """盒子上的一致下界 ω̲ = min λ_min(G(x)) (采样估计)"""
        points = box.scale(sample_unit(box.dim, n_samples, seed))
        matrices = self.evaluate(points)
        return float(np.min(np.linalg.eigvalsh(0.5 * (matrices + np.swapaxes(matrices, -1, -2)))))

    def check_positive_definite(
        self, box: Box, n_samples: int = 1000, seed: int = 0, name: str = "positive_definite"
    ) -> VerificationReport:
        """逐点检验 G(x) 对称正定"""
        points = box.scale(sample_unit(box.dim, n_samples, seed))
        matrices = self.evaluate(points)
        asymmetry = np.max(np.abs(matrices - np.swapaxes(matrices, -1, -2)), axis=(-1, -2))
        smallest = np.linalg.eigvalsh(0.5 * (matrices + np.swapaxes(matrices, -1, -2)))[..., 0]
        violation = np.maximum(-smallest, asymmetry - 1e-12)
        index = int(np.argmax(violation))
        worst = float(violation[index])
        return VerificationReport(
            name=name,
            passed=bool(np.all(smallest > 0) and np.all(asymmetry <= 1e-12)),
            n_samples=n_samples,
            max_violation=worst,
            worst_point=points[index].tolist(),
            worst_index=index,
            details={"lower_bound": float(np.min(smallest))},
        )


@dataclass(frozen=True, eq=False)
class ConstantMetric:
    """常值收缩度量 G 及其收缩率 λ̂、输入系数 α"""

    G: np.ndarray
    lambda_hat: float
    alpha: float = 0.0
    name: str = "G"
    metric_field: MetricField = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.lambda_hat <= 0:
            raise ValueError(f"收缩率 λ̂ 必须为正: {self.lambda_hat}")
        if self.alpha < 0:
            raise ValueError(f"输入系数 α 不能为负: {self.alpha}")
        metric_field = MetricField.constant(self.G, name=self.name)
        object.__setattr__(self, "G", _check_symmetric(self.G))
        object.__setattr__(self, "metric_field", metric_field)

    def distance(self, x, y) -> np.ndarray:
        """d_G(x,y) = √((x−y)ᵀG(x−y))"""
        delta = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
        return np.sqrt(np.maximum(np.sum((delta @ self.G) * delta, axis=-1), 0.0))

    def bound(self) -> ExponentialBound:
        """轨迹界 e^{−λ̂t/2}·d_G + (α/λ̂)·‖Δυ‖∞"""
        return ExponentialBound(
            C=1.0,
            lambda_decay=self.lambda_hat / 2.0,
            gamma=self.alpha / self.lambda_hat,
            metric=self.G.tolist(),
        )


def _symmetrize(matrix: np.ndarray) -> np.ndarray:
    return 0.5 * (matrix + np.swapaxes(matrix, -1, -2))


def smooth_mask(field: VectorField, x, u, tol: float = KINK_TOL) -> np.ndarray:
    """前向/后向差分雅可比一致的样本 (True 表示可微)"""
    forward, backward = field.one_sided_jacobians(x, u)
    return np.max(np.abs(forward - backward), axis=(-1, -2)) <= tol


def curvature_matrix(field: VectorField, metric: MetricField, x, u) -> np.ndarray:
    """
    F(x,u) = (∂f/∂x)ᵀG(x) + G(x)(∂f/∂x) + (∂G/∂x)f(x,u)，对称化后返回

    不可微点的结果没有意义，调用方应先用 smooth_mask 过滤。
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if metric.state_dim != field.state_dim:
        raise DimensionMismatchError(
            f"度量维数 {metric.state_dim} 与状态维数 {field.state_dim} 不一致"
        )
    jac = field.jacobian_x(x, u)
    G = metric.evaluate(x)
    F = np.swapaxes(jac, -1, -2) @ G + G @ jac
    if not metric.is_constant:
        F = F + metric.derivative_along(x, field.evaluate(x, u))
    return _symmetrize(F)


def _generalized_max(matrix: np.ndarray, metric: np.ndarray) -> np.ndarray:
    """批量计算相对 G 的最大广义特征值"""
    chol = np.linalg.cholesky(_symmetrize(metric))
    inv = np.linalg.inv(chol)
    reduced = inv @ matrix @ np.swapaxes(inv, -1, -2)
    return np.linalg.eigvalsh(_symmetrize(reduced))[..., -1]


def _input_gain(field: VectorField, metric: MetricField, x, u) -> np.ndarray:
    """2·σ_max(G^{1/2}·∂f/∂u) = 2·√λ_max(BᵀGB)"""
    if field.input_dim == 0:
        return np.zeros(np.shape(x)[:-1])
    B = field.jacobian_u(x, u)
    gram = np.swapaxes(B, -1, -2) @ metric.evaluate(x) @ B
    return 2.0 * np.sqrt(np.maximum(np.linalg.eigvalsh(_symmetrize(gram))[..., -1], 0.0))


def _sample_states_inputs(
    field: VectorField,
    state_box: Box,
    input_box: Optional[Box],
    n_samples: int,
    seed: int,
    method: str,
) -> Tuple[np.ndarray, np.ndarray]:
    n, m = field.state_dim, field.input_dim
    if state_box.dim != n:
        raise DimensionMismatchError(f"状态采样盒子维数 {state_box.dim} 与 {n} 不一致")
    if m > 0 and (input_box is None or input_box.dim != m):
        raise DimensionMismatchError("需要与输入维数一致的输入采样盒子")
    unit = sample_unit(n + m, n_samples, seed, method)
    x = state_box.scale(unit[:, :n])
    u = input_box.scale(unit[:, n:]) if m > 0 else np.zeros((n_samples, 0))
    return x, u


def _pointwise(
    field: VectorField,
    metric: MetricField,
    x: np.ndarray,
    u: np.ndarray,
    threads: Optional[int],
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """每个样本的 (最大广义特征值 λ_max(F, G)，输入增益 2σ_max，可微掩码)"""

    def chunk(start: int, stop: int):
        xs, us = x[start:stop], u[start:stop]
        smooth = smooth_mask(field, xs, us)
        rate = _generalized_max(curvature_matrix(field, metric, xs, us), metric.evaluate(xs))
        return rate, _input_gain(field, metric, xs, us), smooth

    parts = map_ranges(chunk, len(x), threads)
    rate, gain, smooth = (np.concatenate([p[k] for p in parts]) for k in range(3))
    return rate, gain, smooth


def _contraction_report(
    name: str,
    violation: np.ndarray,
    smooth: np.ndarray,
    points: np.ndarray,
    tol: float,
    details: dict,
) -> VerificationReport:
    excluded = int((~smooth).sum())
    masked = np.where(smooth, violation, -np.inf)
    if masked.size and np.any(smooth):
        index = int(np.argmax(masked))
        worst = float(masked[index])
        worst_point = points[index].tolist()
    else:
        index, worst, worst_point = -1, float("-inf"), []
    warnings = []
    if excluded:
        message = f"{name}: {excluded} 个样本位于向量场不可微点，已排除"
        logger.warning(message)
        warnings.append(message)
    passed = worst <= tol
    if not passed:
        logger.warning(f"{name}: 收缩条件被违反，最大违反量 {worst:.3e}，位于 {worst_point}")
    return VerificationReport(
        name=name,
        passed=passed,
        n_samples=len(violation),
        n_skipped=excluded,
        max_violation=worst,
        worst_point=worst_point,
        worst_index=index,
        warnings=warnings,
        details=details,
    )


def check_contraction_states(
    field: VectorField,
    metric: MetricField,
    lambda_hat: float,
    state_box: Box,
    input_box: Optional[Box] = None,
    n_samples: int = 10_000,
    tol: float = 1e-9,
    seed: int = 0,
    method: str = "sobol",
    threads: Optional[int] = 1,
    name: str = "contraction_states",
) -> VerificationReport:
    """
    逐点检验 F(x,u) + λ̂G(x) ⪯ 0

    违反量为相对 G 的最大广义特征值 λ_max(F + λ̂G, G)。
    """
    x, u = _sample_states_inputs(field, state_box, input_box, n_samples, seed, method)
    rate, _, smooth = _pointwise(field, metric, x, u, threads)
    return _contraction_report(
        name,
        rate + lambda_hat,
        smooth,
        np.hstack([x, u]),
        tol,
        {"lambda_hat": lambda_hat},
    )


def check_contraction_states_inputs(
    field: VectorField,
    metric: MetricField,
    lambda_hat: float,
    alpha: float,
    state_box: Box,
    input_box: Optional[Box] = None,
    n_samples: int = 10_000,
    tol: float = 1e-9,
    seed: int = 0,
    method: str = "sobol",
    threads: Optional[int] = 1,
    name: str = "contraction_states_inputs",
) -> VerificationReport:
    """
    逐点检验 (a) F + λ̂G ⪯ 0 且 (b) 2·σ_max(G^{1/2}·∂f/∂u) ≤ α

    对任意 X, Y 的二次不等式取 Y = 0 得 (a)，对单位 Y 取输入项最大值得 (b)。
    """
    x, u = _sample_states_inputs(field, state_box, input_box, n_samples, seed, method)
    rate, gain, smooth = _pointwise(field, metric, x, u, threads)
    violation = np.maximum(rate + lambda_hat, gain - alpha)
    return _contraction_report(
        name,
        violation,
        smooth,
        np.hstack([x, u]),
        tol,
        {"lambda_hat": lambda_hat, "alpha": alpha, "max_input_gain": float(np.max(gain))},
    )


def fit_contraction_rate(
    field: VectorField,
    metric: MetricField,
    state_box: Box,
    input_box: Optional[Box] = None,
    n_samples: int = 10_000,
    seed: int = 0,
    threads: Optional[int] = 1,
) -> Tuple[float, float]:
    """
    拟合采样点上成立的最大收缩率 λ̂ 与最小输入系数 α

    Returns:
        (lambda_hat, alpha)；lambda_hat ≤ 0 表示采样范围内不收缩
    """
    x, u = _sample_states_inputs(field, state_box, input_box, n_samples, seed, "sobol")
    rate, gain, smooth = _pointwise(field, metric, x, u, threads)
    if not np.any(smooth):
        raise ValueError("所有样本都位于不可微点，无法拟合收缩率")
    lambda_hat = float(-np.max(rate[smooth]))
    alpha = float(np.max(gain[smooth])) if field.input_dim > 0 else 0.0
    logger.info(f"拟合收缩率 λ̂ = {lambda_hat:.6g}，输入系数 α = {alpha:.6g}")
    return lambda_hat, alpha


def build_block_metric(G_hat: MetricField, psi: "StabilizingFunction") -> MetricField:
    """
    反步分块度量

    G̃(x) = [[Ĝ(y) + Jᵀ J, −Jᵀ], [−J, I]]，J = ∂ψ/∂y
    """
    if G_hat.state_dim != psi.n_eta:
        raise DimensionMismatchError(
            f"Ĝ 维数 {G_hat.state_dim} 与 ψ 定义域维数 {psi.n_eta} 不一致"
        )
    n_eta, n_zeta = psi.n_eta, psi.n_zeta

    def func(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = x[..., :n_eta]
        J = np.broadcast_to(psi.jacobian(y), x.shape[:-1] + (n_zeta, n_eta))
        Jt = np.swapaxes(J, -1, -2)
        top = np.concatenate([G_hat.evaluate(y) + Jt @ J, -Jt], axis=-1)
        bottom = np.concatenate(
            [-J, np.broadcast_to(np.eye(n_zeta), x.shape[:-1] + (n_zeta, n_zeta))], axis=-1
        )
        return np.concatenate([top, bottom], axis=-2)

    if G_hat.is_constant and psi.linear_gain is not None:
        return MetricField.constant(func(np.zeros(n_eta + n_zeta)), name="G_block")
    return MetricField(state_dim=n_eta + n_zeta, func=func, name="G_block")


def required_gain_contraction(lambda_hat: float, alpha: float) -> float:
    """分块度量要求的反步增益门限 α²/(8λ̂)"""
    if lambda_hat <= 0:
        raise ValueError(f"收缩率 λ̂ 必须为正: {lambda_hat}")
    if alpha < 0:
        raise ValueError(f"输入系数 α 不能为负: {alpha}")
    return alpha**2 / (8.0 * lambda_hat)


def check_contraction_bound(
    field: VectorField,
    metric: ConstantMetric,
    pairs: Sequence[Tuple[Sequence[float], Sequence[float], InputSignal, InputSignal]],
    horizon: float,
    step: float = DEFAULT_STEP,
    tol: float = 1e-9,
) -> BoundCheckReport:
    """
    检验常值度量下的轨迹界

    d_G(ξ_{xυ}(t), ξ_{x'υ'}(t)) ≤ e^{−λ̂t/2}·d_G(x,x') + (α/λ̂)·‖υ−υ'‖∞
    """
    if metric.G.shape[0] != field.state_dim:
        raise DimensionMismatchError("度量维数与状态维数不一致")
    return check_delta_iss_empirical(field, pairs, metric.bound(), horizon, step, tol)
