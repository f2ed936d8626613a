"""
增量李雅普诺夫函数模块
二次型与平方根型候选函数、反步组合、以及三条定义条件的采样验证
"""

import logging
import warnings
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field
from scipy.stats import qmc

from .data_models import Box, VerificationReport
from .dynamics import VectorField, difference_jacobian
from .exceptions import (
    ContractViolationError,
    DimensionMismatchError,
    UnsupportedConfigurationError,
)
from .parallel import map_ranges

if TYPE_CHECKING:
    from .backstepping import StabilizingFunction

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-12
# 平方根型在重合点附近不可微，V 低于该值的样本跳过
COINCIDENCE_TOL = 1e-12


def _check_symmetric(matrix: np.ndarray) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise DimensionMismatchError(f"需要方阵，实际形状 {matrix.shape}")
    scale = max(1.0, float(np.max(np.abs(matrix))) if matrix.size else 1.0)
    if np.max(np.abs(matrix - matrix.T), initial=0.0) > SYMMETRY_TOL * scale:
        raise ContractViolationError("矩阵不对称")
    return matrix


def jacobi_eigen(
    matrix, tol: float = 1e-12, max_sweeps: int = 100
) -> Tuple[np.ndarray, np.ndarray]:
    """
    对称矩阵特征分解 (循环 Jacobi 旋转)

    Args:
        matrix: 对称矩阵
        tol: 非对角 Frobenius 范数的相对收敛阈值
        max_sweeps: 最大扫描次数

    Returns:
        (升序特征值, 对应特征向量按列排列的正交矩阵 Q)，满足 M = Q diag(w) Qᵀ

    Raises:
        ContractViolationError: 输入不对称
    """
    a = _check_symmetric(matrix)
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    q = np.eye(n)
    scale = max(1.0, float(np.linalg.norm(a)))

    for _ in range(max_sweeps):
        off = np.sqrt(max(float(np.sum(a * a) - np.sum(np.diag(a) ** 2)), 0.0))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for r in range(p + 1, n):
                apr = a[p, r]
                if apr == 0.0:
                    continue
                theta = (a[r, r] - a[p, p]) / (2.0 * apr)
                t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[r, r] = c
                rot[p, r] = s
                rot[r, p] = -s
                a = rot.T @ a @ rot
                a[p, r] = a[r, p] = 0.0
                q = q @ rot

    values = np.diag(a).copy()
    order = np.argsort(values, kind="stable")
    return values[order], q[:, order]


def eigen_symmetric(matrix) -> np.ndarray:
    """对称矩阵的升序特征值"""
    return jacobi_eigen(matrix)[0]


def generalized_eigen(matrix, metric) -> np.ndarray:
    """相对正定矩阵 G 的广义特征值 (升序)，即 L⁻¹ M L⁻ᵀ 的特征值，G = L Lᵀ"""
    chol = np.linalg.cholesky(_check_symmetric(metric))
    inv = np.linalg.inv(chol)
    reduced = inv @ _check_symmetric(matrix) @ inv.T
    return eigen_symmetric(0.5 * (reduced + reduced.T))


def _quadratic(delta: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    return np.sum((delta @ matrix) * delta, axis=-1)


@dataclass(frozen=True, eq=False)
class QuadraticIncrementalForm:
    """
    二次增量型 V(x,x') = (x−x')ᵀP(x−x')

    kappa 为衰减率 κ，kappa_hat 为输入增益系数 κ̂ (σ(r) = κ̂·r²)。
    """

    P: np.ndarray
    kappa: float = 1.0
    kappa_hat: float = 0.0
    name: str = "V"
    eigenvalues: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        matrix = _check_symmetric(self.P)
        values = eigen_symmetric(matrix)
        if values[0] <= 0:
            raise ContractViolationError(f"{self.name}: P 不是正定矩阵 (最小特征值 {values[0]:.3e})")
        if self.kappa <= 0:
            raise ValueError(f"衰减率 κ 必须为正: {self.kappa}")
        if self.kappa_hat < 0:
            raise ValueError(f"输入增益 κ̂ 不能为负: {self.kappa_hat}")
        object.__setattr__(self, "P", matrix)
        object.__setattr__(self, "eigenvalues", values)

    @property
    def dim(self) -> int:
        return self.P.shape[0]

    @property
    def lambda_min(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def lambda_max(self) -> float:
        return float(self.eigenvalues[-1])

    def value(self, x, xp) -> np.ndarray:
        return _quadratic(np.asarray(x, dtype=float) - np.asarray(xp, dtype=float), self.P)

    def gradients(self, x, xp) -> Tuple[np.ndarray, np.ndarray]:
        """(∂V/∂x, ∂V/∂x')"""
        grad = 2.0 * (np.asarray(x, dtype=float) - np.asarray(xp, dtype=float)) @ self.P
        return grad, -grad

    def sigma(self, r, kappa_hat: Optional[float] = None) -> np.ndarray:
        gain = self.kappa_hat if kappa_hat is None else kappa_hat
        return gain * np.asarray(r, dtype=float) ** 2

    def coincident(self, x, xp) -> np.ndarray:
        return np.zeros(np.broadcast_shapes(np.shape(x)[:-1], np.shape(xp)[:-1]), dtype=bool)

    def sandwich(
        self, distance, metric_values: Tuple[float, float]
    ) -> Tuple[np.ndarray, np.ndarray]:
        low, high = metric_values
        distance = np.asarray(distance, dtype=float)
        return low * distance**2, high * distance**2


@dataclass(frozen=True, eq=False)
class SqrtForm:
    """
    平方根型 V̂(x,x') = √V(x,x')

    衰减率默认取 base.kappa/2；kappa_hat 为线性输入增益 (σ(r) = κ̂·r)。
    """

    base: QuadraticIncrementalForm
    kappa: Optional[float] = None
    kappa_hat: float = 0.0
    name: str = "V_hat"

    def __post_init__(self) -> None:
        if self.kappa is None:
            object.__setattr__(self, "kappa", self.base.kappa / 2.0)

    @property
    def dim(self) -> int:
        return self.base.dim

    @property
    def lambda_min(self) -> float:
        return self.base.lambda_min

    @property
    def lambda_max(self) -> float:
        return self.base.lambda_max

    @property
    def lipschitz_constant(self) -> float:
        """|V̂(x,y) − V̂(x,z)| ≤ λ_max/√λ_min · ‖y−z‖"""
        return self.lambda_max / np.sqrt(self.lambda_min)

    def value(self, x, xp) -> np.ndarray:
        return np.sqrt(np.maximum(self.base.value(x, xp), 0.0))

    def gradients(self, x, xp) -> Tuple[np.ndarray, np.ndarray]:
        root = self.value(x, xp)
        gx, gxp = self.base.gradients(x, xp)
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(root > 0, 0.5 / root, 0.0)[..., None]
        return gx * scale, gxp * scale

    def sigma(self, r, kappa_hat: Optional[float] = None) -> np.ndarray:
        gain = self.kappa_hat if kappa_hat is None else kappa_hat
        return gain * np.asarray(r, dtype=float)

    def coincident(self, x, xp) -> np.ndarray:
        return self.base.value(x, xp) < COINCIDENCE_TOL

    def sandwich(
        self, distance, metric_values: Tuple[float, float]
    ) -> Tuple[np.ndarray, np.ndarray]:
        low, high = metric_values
        distance = np.asarray(distance, dtype=float)
        return np.sqrt(low) * distance, np.sqrt(high) * distance


@dataclass(frozen=True, eq=False)
class ComposedForm:
    """
    反步组合型 Ṽ(x,x') = V̂(y,y') + ‖(z−ψ(y)) − (z'−ψ(y'))‖²

    ψ 仿射时 matrix 为组合后二次型的矩阵，否则为 None (非二次型，只能逐点求值)。
    """

    V_hat: QuadraticIncrementalForm
    psi: "StabilizingFunction"
    matrix: Optional[np.ndarray] = None
    kappa: float = 1.0
    kappa_hat: float = 0.0

    @property
    def is_quadratic(self) -> bool:
        return self.matrix is not None

    @property
    def dim(self) -> int:
        return self.psi.n_eta + self.psi.n_zeta

    def _split(self, x) -> Tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=float)
        return x[..., : self.psi.n_eta], x[..., self.psi.n_eta :]

    def value(self, x, xp) -> np.ndarray:
        y, z = self._split(x)
        yp, zp = self._split(xp)
        residual = (z - self.psi.evaluate(y)) - (zp - self.psi.evaluate(yp))
        return self.V_hat.value(y, yp) + np.sum(residual**2, axis=-1)

    def gradients(self, x, xp) -> Tuple[np.ndarray, np.ndarray]:
        if self.is_quadratic:
            return self.as_quadratic().gradients(x, xp)
        x = np.asarray(x, dtype=float)
        xp = np.asarray(xp, dtype=float)
        gx = difference_jacobian(lambda s: self.value(s, xp[..., None, :])[..., None], x)
        gxp = difference_jacobian(lambda s: self.value(x[..., None, :], s)[..., None], xp)
        return gx[..., 0, :], gxp[..., 0, :]

    def sigma(self, r, kappa_hat: Optional[float] = None) -> np.ndarray:
        gain = self.kappa_hat if kappa_hat is None else kappa_hat
        return gain * np.asarray(r, dtype=float) ** 2

    def coincident(self, x, xp) -> np.ndarray:
        return np.zeros(np.broadcast_shapes(np.shape(x)[:-1], np.shape(xp)[:-1]), dtype=bool)

    def as_quadratic(
        self, kappa: Optional[float] = None, kappa_hat: Optional[float] = None
    ) -> QuadraticIncrementalForm:
        """转换为显式二次型 (仅当 ψ 仿射)"""
        if self.matrix is None:
            raise UnsupportedConfigurationError("ψ 非仿射，组合后的函数不是二次型")
        return QuadraticIncrementalForm(
            P=self.matrix,
            kappa=self.kappa if kappa is None else kappa,
            kappa_hat=self.kappa_hat if kappa_hat is None else kappa_hat,
            name="V_composed",
        )


IncrementalForm = Union[QuadraticIncrementalForm, SqrtForm, ComposedForm]


class ExponentialBound(BaseModel):
    """
    指数型增量稳定界 β(r,t) = C·e^{−λt}·r，γ(r) = γ·r

    metric 为 None 时使用欧氏距离，否则使用常值矩阵 G 加权距离 √(ΔᵀGΔ)。
    """

    C: float = Field(default=1.0, ge=1.0, description="超调系数")
    lambda_decay: float = Field(..., gt=0, description="衰减率 (1/s)")
    gamma: float = Field(default=0.0, ge=0, description="线性输入增益")
    metric: Optional[list] = Field(default=None, description="常值加权矩阵 G")

    @classmethod
    def from_sqrt_form(cls, form: SqrtForm, kappa: float, gain: float) -> "ExponentialBound":
        """由平方根型证书 (衰减率 kappa，线性增益 gain) 导出的界，距离即 V̂ 本身"""
        return cls(C=1.0, lambda_decay=kappa, gamma=gain / kappa, metric=form.base.P.tolist())

    def beta(self, r, t):
        return self.C * np.exp(-self.lambda_decay * np.asarray(t)) * np.asarray(r)

    def distance(self, x, y) -> np.ndarray:
        delta = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
        if self.metric is None:
            return np.linalg.norm(delta, axis=-1)
        return np.sqrt(np.maximum(_quadratic(delta, np.asarray(self.metric, dtype=float)), 0.0))


def compose_lyapunov(
    V_hat: QuadraticIncrementalForm,
    psi: "StabilizingFunction",
    kappa: Optional[float] = None,
    kappa_hat: float = 1.0,
) -> ComposedForm:
    """
    按反步组合构造整体增量李雅普诺夫函数

    Args:
        V_hat: η 子系统上的二次型
        psi: 镇定函数
        kappa: 组合后的衰减率 (默认沿用 V_hat.kappa)
        kappa_hat: 组合后的输入增益 (σ(r) = κ̂·r²)

    Returns:
        组合型；ψ 仿射时带显式矩阵
        [[P̂ + KᵀK, −Kᵀ], [−K, I]]，K 为 ψ 的线性部分

    Raises:
        DimensionMismatchError: V_hat 维数与 ψ 定义域维数不一致
    """
    if V_hat.dim != psi.n_eta:
        raise DimensionMismatchError(f"V̂ 维数 {V_hat.dim} 与 ψ 定义域维数 {psi.n_eta} 不一致")
    matrix = None
    if psi.linear_gain is not None:
        gain = np.asarray(psi.linear_gain, dtype=float)
        matrix = np.block(
            [[V_hat.P + gain.T @ gain, -gain.T], [-gain, np.eye(psi.n_zeta)]]
        )
    else:
        logger.info("ψ 非仿射，组合结果按一般函数逐点求值")
    return ComposedForm(
        V_hat=V_hat,
        psi=psi,
        matrix=matrix,
        kappa=V_hat.kappa if kappa is None else kappa,
        kappa_hat=kappa_hat,
    )


def required_gain(kappa: float, kappa_hat: float) -> float:
    """组合李雅普诺夫函数要求的反步增益下界 (κ + κ̂ + 1)/2"""
    if kappa <= 0:
        raise ValueError(f"衰减率 κ 必须为正: {kappa}")
    if kappa_hat < 0:
        raise ValueError(f"输入增益 κ̂ 不能为负: {kappa_hat}")
    return (kappa + kappa_hat + 1.0) / 2.0


def sample_unit(dim: int, n_samples: int, seed: int = 0, method: str = "sobol") -> np.ndarray:
    """
    [0,1]^dim 上的采样点

    Args:
        dim: 维数
        n_samples: 点数
        seed: 随机种子
        method: sobol (加扰 Sobol 序列) 或 uniform

    Returns:
        形状 (n_samples, dim)
    """
    if method == "sobol":
        sampler = qmc.Sobol(d=dim, scramble=True, seed=seed)
        with warnings.catch_warnings():
            # 非 2 的幂次点数只影响平衡性
            warnings.simplefilter("ignore", UserWarning)
            return sampler.random(n_samples)
    if method == "uniform":
        return np.random.default_rng(seed).random((n_samples, dim))
    raise ValueError(f"未知采样方式: {method}")


def _reduce_worst(values: np.ndarray, points: np.ndarray) -> Tuple[float, int, list]:
    """最大值归约，并列时取最小序号"""
    if values.size == 0:
        return float("-inf"), -1, []
    index = int(np.argmax(values))
    return float(values[index]), index, points[index].tolist()


def verify_condition_iii(
    field: VectorField,
    form: IncrementalForm,
    kappa: Optional[float] = None,
    kappa_hat: Optional[float] = None,
    state_box: Optional[Box] = None,
    input_box: Optional[Box] = None,
    n_samples: int = 100_000,
    tol: float = 1e-9,
    seed: int = 0,
    method: str = "sobol",
    threads: Optional[int] = 1,
    name: str = "condition_iii",
) -> VerificationReport:
    """
    采样验证衰减条件 (∂V/∂x)f(x,u) + (∂V/∂x')f(x',u') ≤ −κV + σ(‖u−u'‖)

    Args:
        field: (闭环) 向量场
        form: 增量型 (二次型、平方根型或组合型)
        kappa: 衰减率 (默认取 form.kappa)
        kappa_hat: 输入增益 (默认取 form.kappa_hat)
        state_box: x, x' 的采样盒子
        input_box: u, u' 的采样盒子 (输入维数为 0 时可省略)
        n_samples: 采样点数
        tol: 容差
        seed: 随机种子
        method: sobol 或 uniform
        threads: 线程数
        name: 报告名称

    Returns:
        验证报告，最坏点为 (x, x', u, u') 拼接
    """
    n, m = field.state_dim, field.input_dim
    if form.dim != n:
        raise DimensionMismatchError(f"增量型维数 {form.dim} 与状态维数 {n} 不一致")
    if state_box is None or state_box.dim != n:
        raise DimensionMismatchError("需要与状态维数一致的采样盒子")
    if m > 0 and (input_box is None or input_box.dim != m):
        raise DimensionMismatchError("需要与输入维数一致的输入采样盒子")
    kappa = form.kappa if kappa is None else kappa
    kappa_hat = form.kappa_hat if kappa_hat is None else kappa_hat

    unit = sample_unit(2 * n + 2 * m, n_samples, seed, method)
    x = state_box.scale(unit[:, :n])
    xp = state_box.scale(unit[:, n : 2 * n])
    if m > 0:
        u = input_box.scale(unit[:, 2 * n : 2 * n + m])
        up = input_box.scale(unit[:, 2 * n + m :])
    else:
        u = up = np.zeros((n_samples, 0))

    def chunk(start: int, stop: int) -> Tuple[np.ndarray, np.ndarray]:
        xs, xps, us, ups = x[start:stop], xp[start:stop], u[start:stop], up[start:stop]
        value = form.value(xs, xps)
        gx, gxp = form.gradients(xs, xps)
        rate = np.sum(gx * field.evaluate(xs, us), axis=-1) + np.sum(
            gxp * field.evaluate(xps, ups), axis=-1
        )
        gap = np.linalg.norm(us - ups, axis=-1)
        violation = rate - (-kappa * value + form.sigma(gap, kappa_hat))
        skipped = form.coincident(xs, xps)
        return np.where(skipped, -np.inf, violation), skipped

    parts = map_ranges(chunk, n_samples, threads)
    violation = np.concatenate([p[0] for p in parts])
    skipped = int(sum(int(p[1].sum()) for p in parts))
    points = np.hstack([x, xp, u, up])
    worst, index, worst_point = _reduce_worst(violation, points)
    passed = worst <= tol

    if not passed:
        logger.warning(f"{name}: 衰减条件被违反，最大违反量 {worst:.3e}，位于 {worst_point}")
    else:
        logger.info(f"{name}: 衰减条件在 {n_samples} 个样本上成立 (最大 {worst:.3e})")
    return VerificationReport(
        name=name,
        passed=passed,
        n_samples=n_samples,
        n_skipped=skipped,
        max_violation=worst,
        worst_point=worst_point,
        worst_index=index,
        details={"kappa": kappa, "kappa_hat": kappa_hat},
    )


def verify_condition_i(
    form: Union[QuadraticIncrementalForm, SqrtForm],
    x: np.ndarray,
    xp: np.ndarray,
    tol: float = 1e-9,
    metric: Optional[np.ndarray] = None,
    name: str = "condition_i",
) -> VerificationReport:
    """
    验证夹逼条件 α̲(d(x,x')) ≤ V(x,x') ≤ α̅(d(x,x'))

    二次型取 α̲(r) = λ_min·r²、α̅(r) = λ_max·r²；平方根型取 √λ_min·r、√λ_max·r。
    给定 metric 时距离为 √(ΔᵀGΔ)，特征值换为相对 G 的广义特征值。

    Args:
        form: 增量型
        x, xp: 采样点对 (N, n)
        tol: 容差
        metric: 常值加权矩阵 G (None 表示欧氏距离)
        name: 报告名称

    Returns:
        验证报告
    """
    quadratic = form.base if isinstance(form, SqrtForm) else form
    x = np.atleast_2d(np.asarray(x, dtype=float))
    xp = np.atleast_2d(np.asarray(xp, dtype=float))
    delta = x - xp
    if metric is None:
        bounds = (quadratic.lambda_min, quadratic.lambda_max)
        distance = np.linalg.norm(delta, axis=-1)
    else:
        values = generalized_eigen(quadratic.P, metric)
        bounds = (float(values[0]), float(values[-1]))
        distance = np.sqrt(np.maximum(_quadratic(delta, np.asarray(metric, dtype=float)), 0.0))

    value = form.value(x, xp)
    lower, upper = form.sandwich(distance, bounds)
    violation = np.maximum(lower - value, value - upper)
    worst, index, worst_point = _reduce_worst(violation, np.hstack([x, xp]))
    return VerificationReport(
        name=name,
        passed=worst <= tol,
        n_samples=len(value),
        max_violation=worst,
        worst_point=worst_point,
        worst_index=index,
        details={"lower_coefficient": bounds[0], "upper_coefficient": bounds[1]},
    )


def verify_lipschitz(
    form: SqrtForm,
    box: Box,
    n_samples: int = 1000,
    seed: int = 0,
    tol: float = 1e-9,
    name: str = "lipschitz",
) -> VerificationReport:
    """在随机三元组上验证 |V̂(x,y) − V̂(x,z)| ≤ λ_max/√λ_min·‖y−z‖"""
    n = form.dim
    unit = sample_unit(3 * n, n_samples, seed, method="uniform")
    x, y, z = (box.scale(unit[:, k * n : (k + 1) * n]) for k in range(3))
    lhs = np.abs(form.value(x, y) - form.value(x, z))
    violation = lhs - form.lipschitz_constant * np.linalg.norm(y - z, axis=-1)
    worst, index, worst_point = _reduce_worst(violation, np.hstack([x, y, z]))
    return VerificationReport(
        name=name,
        passed=worst <= tol,
        n_samples=n_samples,
        max_violation=worst,
        worst_point=worst_point,
        worst_index=index,
        details={"lipschitz_constant": form.lipschitz_constant},
    )


def sample_pairs(box: Box, n_samples: int, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """盒子内的均匀随机点对"""
    unit = sample_unit(2 * box.dim, n_samples, seed, method="uniform")
    return box.scale(unit[:, : box.dim]), box.scale(unit[:, box.dim :])


def gradient_error(form: IncrementalForm, x: np.ndarray, xp: np.ndarray, h: float = 1e-6) -> float:
    """解析梯度与中心差分的最大相对误差"""
    x = np.asarray(x, dtype=float)
    xp = np.asarray(xp, dtype=float)
    gx, gxp = form.gradients(x, xp)
    fx = difference_jacobian(lambda s: form.value(s, xp[..., None, :])[..., None], x, h)[..., 0, :]
    fxp = difference_jacobian(
        lambda s: form.value(x[..., None, :], s)[..., None], xp, h
    )[..., 0, :]
    scale = np.maximum(np.maximum(np.abs(gx), np.abs(gxp)), 1.0)
    return float(max(np.max(np.abs(gx - fx) / scale), np.max(np.abs(gxp - fxp) / scale)))
