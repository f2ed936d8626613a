"""
反步设计模块
级联系统 η̇ = f(η,ζ), ζ̇ = υ 的反馈律综合、坐标变换、输入预变换，以及多积分器链的递归综合
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import sympy as sp

from .contraction import required_gain_contraction
from .dynamics import VectorField, batch_shape, difference_jacobian
from .exceptions import DimensionMismatchError, UnsupportedConfigurationError
from .lyapunov import required_gain

logger = logging.getLogger(__name__)

LawFunc = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def _lambdify_components(
    exprs: Sequence[sp.Expr], symbols: Sequence[sp.Symbol]
) -> Callable[[np.ndarray], np.ndarray]:
    """把表达式列表编译为批量函数 (..., len(symbols)) -> (..., len(exprs))"""
    funcs = [sp.lambdify(list(symbols), expr, modules="numpy") for expr in exprs]

    def evaluate(values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        args = [values[..., i] for i in range(values.shape[-1])]
        shape = values.shape[:-1]
        return np.stack(
            [np.broadcast_to(np.asarray(fn(*args), dtype=float), shape) for fn in funcs], axis=-1
        )

    return evaluate


@dataclass(frozen=True, eq=False)
class StabilizingFunction:
    """
    镇定函数 ψ: η -> ζ 及其雅可比 ∂ψ/∂y

    linear_gain/offset 非空表示 ψ(y) = K·y + c (仿射)；expr 为可选的符号表达式。
    """

    n_eta: int
    n_zeta: int
    func: Callable[[np.ndarray], np.ndarray]
    jac: Optional[Callable[[np.ndarray], np.ndarray]] = None
    linear_gain: Optional[np.ndarray] = None
    offset: Optional[np.ndarray] = None
    expr: Optional[Tuple[sp.Expr, ...]] = None
    eta_symbols: Optional[Tuple[sp.Symbol, ...]] = None

    @classmethod
    def linear(cls, K, c=None) -> "StabilizingFunction":
        """仿射镇定函数 ψ(y) = K·y + c"""
        gain = np.atleast_2d(np.asarray(K, dtype=float))
        n_zeta, n_eta = gain.shape
        offset = np.zeros(n_zeta) if c is None else np.asarray(c, dtype=float).reshape(n_zeta)
        return cls(
            n_eta=n_eta,
            n_zeta=n_zeta,
            func=lambda y: np.asarray(y, dtype=float) @ gain.T + offset,
            jac=lambda y: np.broadcast_to(gain, np.shape(y)[:-1] + gain.shape),
            linear_gain=gain,
            offset=offset,
        )

    @classmethod
    def zero(cls, n_eta: int, n_zeta: int) -> "StabilizingFunction":
        return cls.linear(np.zeros((n_zeta, n_eta)))

    @classmethod
    def from_symbolic(
        cls, exprs: Sequence, eta_symbols: Sequence[sp.Symbol]
    ) -> "StabilizingFunction":
        """由 sympy 表达式构造，雅可比符号求导；表达式全为一次时同时记录仿射系数"""
        exprs = tuple(sp.sympify(e) for e in exprs)
        eta_symbols = tuple(eta_symbols)
        jacobian = sp.Matrix(exprs).jacobian(sp.Matrix(eta_symbols))
        n_zeta, n_eta = len(exprs), len(eta_symbols)
        jac_func = _lambdify_components(list(jacobian), eta_symbols)

        gain = offset = None
        if all(entry.is_number for entry in jacobian):
            gain = np.asarray(jacobian, dtype=float)
            offset = np.asarray([e.subs({s: 0 for s in eta_symbols}) for e in exprs], dtype=float)

        return cls(
            n_eta=n_eta,
            n_zeta=n_zeta,
            func=_lambdify_components(exprs, eta_symbols),
            jac=lambda y: jac_func(y).reshape(np.shape(y)[:-1] + (n_zeta, n_eta)),
            linear_gain=gain,
            offset=offset,
            expr=exprs,
            eta_symbols=eta_symbols,
        )

    def evaluate(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.shape[-1] != self.n_eta:
            raise DimensionMismatchError(f"ψ 期望输入维数 {self.n_eta}，实际 {y.shape[-1]}")
        out = np.asarray(self.func(y), dtype=float)
        return np.broadcast_to(out, y.shape[:-1] + (self.n_zeta,))

    def jacobian(self, y) -> np.ndarray:
        """∂ψ/∂y，形状 (..., n_zeta, n_eta)，无解析式时用中心差分"""
        y = np.asarray(y, dtype=float)
        if self.jac is not None:
            return np.asarray(self.jac(y), dtype=float)
        return difference_jacobian(self.evaluate, y)

    def check_jacobian(self, points: np.ndarray, rel_tol: float = 1e-4) -> float:
        """解析雅可比与中心差分的最大相对误差"""
        exact = self.jacobian(points)
        approx = difference_jacobian(self.evaluate, np.asarray(points, dtype=float))
        worst = float(np.max(np.abs(exact - approx) / np.maximum(np.abs(exact), 1.0)))
        if worst > rel_tol:
            logger.warning(f"ψ 的解析雅可比与差分不一致，最大相对误差 {worst:.3e}")
        return worst

    def describe(self) -> Dict[str, Any]:
        if self.expr is not None:
            return {"kind": "symbolic", "expr": [str(e) for e in self.expr]}
        if self.linear_gain is not None:
            return {
                "kind": "affine",
                "gain": self.linear_gain.tolist(),
                "offset": self.offset.tolist() if self.offset is not None else None,
            }
        return {"kind": "callable"}


@dataclass(frozen=True, eq=False)
class SymbolicCascade:
    """级联系统的符号描述 (递归综合需要)"""

    eta_symbols: Tuple[sp.Symbol, ...]
    zeta_symbols: Tuple[Tuple[sp.Symbol, ...], ...]
    eta_rhs: Tuple[sp.Expr, ...]
    drift: Optional[Tuple[sp.Expr, ...]] = None

    @property
    def all_symbols(self) -> Tuple[sp.Symbol, ...]:
        return self.eta_symbols + tuple(s for layer in self.zeta_symbols for s in layer)


@dataclass(frozen=True, eq=False)
class CascadeSystem:
    """
    级联系统 η̇ = f(η, ζ₁), ζ̇ᵢ = ζᵢ₊₁, ζ̇ₖ = drift(η, ζ) + υ

    eta_field 的输入维数即 n_zeta；drift 缺省为零。
    状态排列为 (η, ζ₁, ..., ζₖ)，总维数 n_eta + layers·n_zeta。
    """

    eta_field: VectorField
    layers: int = 1
    zeta_drift: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    symbolic: Optional[SymbolicCascade] = None
    name: str = "cascade"

    def __post_init__(self) -> None:
        if self.layers < 1:
            raise ValueError(f"积分器层数必须至少为 1: {self.layers}")
        if self.eta_field.input_dim == 0:
            raise DimensionMismatchError("η 子系统必须以 ζ 为输入")

    @property
    def n_eta(self) -> int:
        return self.eta_field.state_dim

    @property
    def n_zeta(self) -> int:
        return self.eta_field.input_dim

    @property
    def state_dim(self) -> int:
        return self.n_eta + self.layers * self.n_zeta

    @classmethod
    def from_symbolic(
        cls,
        eta_symbols: Sequence[sp.Symbol],
        zeta_symbols: Sequence[Sequence[sp.Symbol]],
        eta_rhs: Sequence,
        drift: Optional[Sequence] = None,
        name: str = "cascade",
    ) -> "CascadeSystem":
        """
        由符号表达式构造

        Args:
            eta_symbols: η 分量符号
            zeta_symbols: 每层 ζ 的分量符号
            eta_rhs: f(η, ζ₁) 的表达式
            drift: 最后一层的漂移项表达式 (可选)
            name: 系统名称
        """
        eta_symbols = tuple(eta_symbols)
        zeta_layers = tuple(tuple(layer) for layer in zeta_symbols)
        if any(len(layer) != len(zeta_layers[0]) for layer in zeta_layers):
            raise DimensionMismatchError("各层 ζ 维数必须一致")
        eta_rhs = tuple(sp.sympify(e) for e in eta_rhs)
        symbolic = SymbolicCascade(
            eta_symbols=eta_symbols,
            zeta_symbols=zeta_layers,
            eta_rhs=eta_rhs,
            drift=tuple(sp.sympify(e) for e in drift) if drift is not None else None,
        )
        n_eta, n_zeta = len(eta_symbols), len(zeta_layers[0])
        rhs = _lambdify_components(eta_rhs, eta_symbols + zeta_layers[0])
        eta_field = VectorField(
            state_dim=n_eta,
            input_dim=n_zeta,
            func=lambda y, z: rhs(_join(y, z)),
            name=f"{name}_eta",
        )
        zeta_drift = None
        if symbolic.drift is not None:
            drift_func = _lambdify_components(symbolic.drift, symbolic.all_symbols)
            zeta_drift = lambda eta, zeta: drift_func(_join(eta, zeta))  # noqa: E731
        return cls(
            eta_field=eta_field,
            layers=len(zeta_layers),
            zeta_drift=zeta_drift,
            symbolic=symbolic,
            name=name,
        )

    def split(self, x) -> Tuple[np.ndarray, np.ndarray]:
        """状态拆分为 (η, ζ)，ζ 为各层拼接"""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.state_dim:
            raise DimensionMismatchError(f"{self.name}: 期望状态维数 {self.state_dim}，实际 {x.shape[-1]}")
        return x[..., : self.n_eta], x[..., self.n_eta :]

    def drift(self, eta: np.ndarray, zeta: np.ndarray) -> np.ndarray:
        if self.zeta_drift is None:
            return np.zeros(np.broadcast_shapes(eta.shape[:-1], zeta.shape[:-1]) + (self.n_zeta,))
        return np.asarray(self.zeta_drift(eta, zeta), dtype=float)


def _join(*parts: np.ndarray) -> np.ndarray:
    """按批量形状广播后沿最后一轴拼接"""
    shape = np.broadcast_shapes(*(np.shape(p)[:-1] for p in parts))
    return np.concatenate(
        [np.broadcast_to(np.asarray(p, dtype=float), shape + (np.shape(p)[-1],)) for p in parts],
        axis=-1,
    )


@dataclass(frozen=True, eq=False)
class FeedbackLaw:
    """
    反馈律 υ = k(η, ζ, υ̂)，对 υ̂ 仿射且系数为单位阵

    gain 为综合使用的增益 (递归综合时为各层增益)，provenance 记录构造方式。
    """

    func: LawFunc
    gain: Tuple[float, ...]
    provenance: str
    n_eta: int
    n_zeta: int
    layers: int = 1
    gain_warnings: List[str] = field(default_factory=list)
    description: Dict[str, Any] = field(default_factory=dict)

    def evaluate(self, eta, zeta, vhat) -> np.ndarray:
        eta = np.asarray(eta, dtype=float)
        zeta = np.asarray(zeta, dtype=float)
        vhat = np.asarray(vhat, dtype=float)
        if (
            eta.shape[-1] != self.n_eta
            or zeta.shape[-1] != self.layers * self.n_zeta
            or vhat.shape[-1] != self.n_zeta
        ):
            raise DimensionMismatchError(
                f"反馈律维数不一致: η {eta.shape[-1]}, ζ {zeta.shape[-1]}, υ̂ {vhat.shape[-1]}"
            )
        return np.asarray(self.func(eta, zeta, vhat), dtype=float)

    __call__ = evaluate

    def describe(self) -> Dict[str, Any]:
        """JSON 描述 (不序列化代码)"""
        return {
            "construction": self.provenance,
            "lambda": list(self.gain) if len(self.gain) > 1 else self.gain[0],
            "layers": self.layers,
            **self.description,
            "gain_warnings": list(self.gain_warnings),
        }


def _gain_gate(
    lam: float,
    lyapunov_rates: Optional[Sequence[Tuple[float, float]]],
    contraction_rates: Optional[Sequence[Tuple[float, float]]],
) -> List[str]:
    """增益门限检查，不满足时只警告"""
    messages = []
    for kappa, kappa_hat in lyapunov_rates or []:
        threshold = required_gain(kappa, kappa_hat)
        if lam < threshold:
            messages.append(
                f"增益 λ = {lam} 低于李雅普诺夫组合门限 {threshold} (κ = {kappa}, κ̂ = {kappa_hat})"
            )
    for lambda_hat, alpha in contraction_rates or []:
        threshold = required_gain_contraction(lambda_hat, alpha)
        if lam <= threshold:
            messages.append(
                f"增益 λ = {lam} 不大于收缩度量组合门限 {threshold:.6g} (λ̂ = {lambda_hat}, α = {alpha})"
            )
    for message in messages:
        logger.warning(message)
    return messages


def synthesize_law(
    sys: CascadeSystem,
    psi: StabilizingFunction,
    lam: float,
    lyapunov_rates: Optional[Sequence[Tuple[float, float]]] = None,
    contraction_rates: Optional[Sequence[Tuple[float, float]]] = None,
) -> FeedbackLaw:
    """
    单层反步反馈律

    k(η,ζ,υ̂) = −λ(ζ − ψ(η)) + (∂ψ/∂y)(η)·f(η,ζ) + υ̂

    Args:
        sys: 单层级联系统
        psi: 镇定函数
        lam: 增益 λ > 0
        lyapunov_rates: 已登记的 (κ, κ̂) 证书，用于增益门限提示
        contraction_rates: 已登记的 (λ̂, α) 度量，用于增益门限提示

    Returns:
        反馈律
    """
    if lam <= 0:
        raise ValueError(f"增益 λ 必须为正: {lam}")
    if sys.layers != 1:
        raise ValueError(f"多层级联系统 (layers={sys.layers}) 请使用 synthesize_recursive")
    if psi.n_eta != sys.n_eta or psi.n_zeta != sys.n_zeta:
        raise DimensionMismatchError(
            f"ψ 维数 ({psi.n_eta}->{psi.n_zeta}) 与系统 ({sys.n_eta}, {sys.n_zeta}) 不一致"
        )
    warnings = _gain_gate(lam, lyapunov_rates, contraction_rates)
    f = sys.eta_field

    def law(eta: np.ndarray, zeta: np.ndarray, vhat: np.ndarray) -> np.ndarray:
        correction = np.einsum("...ij,...j->...i", psi.jacobian(eta), f.evaluate(eta, zeta))
        return -lam * (zeta - psi.evaluate(eta)) + correction + vhat

    logger.info(f"{sys.name}: 综合反步反馈律，λ = {lam}")
    return FeedbackLaw(
        func=law,
        gain=(float(lam),),
        provenance="backstepping",
        n_eta=sys.n_eta,
        n_zeta=sys.n_zeta,
        gain_warnings=warnings,
        description={"psi": psi.describe(), "pre_transform": None},
    )


def apply_input_transform(
    law: FeedbackLaw,
    pre: Callable[[np.ndarray, np.ndarray], np.ndarray],
    spec: Optional[str] = None,
) -> FeedbackLaw:
    """
    输入预变换 υ = k(η,ζ,υ̂) − pre(η,ζ)

    Args:
        law: 原反馈律
        pre: 状态的函数 (η, ζ) -> (..., n_zeta)
        spec: pre 的文字描述 (写入 describe())
    """

    def transformed(eta: np.ndarray, zeta: np.ndarray, vhat: np.ndarray) -> np.ndarray:
        return law.func(eta, zeta, vhat) - np.asarray(pre(eta, zeta), dtype=float)

    description = dict(law.description)
    description["pre_transform"] = spec if spec is not None else "callable"
    return FeedbackLaw(
        func=transformed,
        gain=law.gain,
        provenance=law.provenance,
        n_eta=law.n_eta,
        n_zeta=law.n_zeta,
        layers=law.layers,
        gain_warnings=list(law.gain_warnings),
        description=description,
    )


def _input_matrix(sys: CascadeSystem) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """∂f/∂υ = [0; ...; 0; I]，输入只作用于最后一层积分器"""
    block = np.zeros((sys.state_dim, sys.n_zeta))
    block[-sys.n_zeta :, :] = np.eye(sys.n_zeta)

    def jac_u(x: np.ndarray, v: np.ndarray) -> np.ndarray:
        return np.broadcast_to(block, batch_shape(np.asarray(x), np.asarray(v)) + block.shape)

    return jac_u


def open_loop_field(sys: CascadeSystem) -> VectorField:
    """原系统 (输入为 υ)"""
    n_eta, n_zeta, layers = sys.n_eta, sys.n_zeta, sys.layers

    def func(x: np.ndarray, v: np.ndarray) -> np.ndarray:
        shape = batch_shape(x, v)
        x = np.broadcast_to(x, shape + (x.shape[-1],))
        v = np.broadcast_to(v, shape + (n_zeta,))
        eta, zeta = sys.split(x)
        parts = [sys.eta_field.evaluate(eta, zeta[..., :n_zeta])]
        for i in range(1, layers):
            parts.append(zeta[..., i * n_zeta : (i + 1) * n_zeta])
        parts.append(sys.drift(eta, zeta) + v)
        return np.concatenate(parts, axis=-1)

    return VectorField(
        state_dim=sys.state_dim,
        input_dim=n_zeta,
        func=func,
        jac_u=_input_matrix(sys),
        name=f"{sys.name}_open",
    )


def closed_loop_field(sys: CascadeSystem, law: FeedbackLaw) -> VectorField:
    """代入反馈律后的闭环系统，外部输入为 υ̂"""
    if law.n_eta != sys.n_eta or law.n_zeta != sys.n_zeta or law.layers != sys.layers:
        raise DimensionMismatchError("反馈律与级联系统维数不一致")
    plant = open_loop_field(sys)

    def func(x: np.ndarray, vhat: np.ndarray) -> np.ndarray:
        shape = batch_shape(x, vhat)
        x = np.broadcast_to(x, shape + (x.shape[-1],))
        vhat = np.broadcast_to(vhat, shape + (sys.n_zeta,))
        eta, zeta = sys.split(x)
        return plant.evaluate(x, law.evaluate(eta, zeta, vhat))

    # k 对 υ̂ 的系数为单位阵，闭环输入矩阵与开环相同
    return VectorField(
        state_dim=sys.state_dim,
        input_dim=sys.n_zeta,
        func=func,
        jac_u=_input_matrix(sys),
        name=f"{sys.name}_closed",
    )


def eta_subsystem_field(sys: CascadeSystem, psi: StabilizingFunction) -> VectorField:
    """镇定函数证书所针对的系统 ẏ = f(y, ψ(y) + ũ)"""
    f = sys.eta_field

    def jac_x(y: np.ndarray, w: np.ndarray) -> np.ndarray:
        u = psi.evaluate(y) + w
        return f.jacobian_x(y, u) + f.jacobian_u(y, u) @ psi.jacobian(y)

    def jac_u(y: np.ndarray, w: np.ndarray) -> np.ndarray:
        return f.jacobian_u(y, psi.evaluate(y) + w)

    return VectorField(
        state_dim=sys.n_eta,
        input_dim=sys.n_zeta,
        func=lambda y, w: f.evaluate(y, psi.evaluate(y) + w),
        jac_x=jac_x if f.jac_x is not None else None,
        jac_u=jac_u if f.jac_u is not None else None,
        name=f"{sys.name}_eta_loop",
    )


def transform_coordinates(x, psi: StabilizingFunction) -> np.ndarray:
    """φ(y, z) = (y, z − ψ(y))，只变换第一层 ζ"""
    x = np.array(x, dtype=float)
    y = x[..., : psi.n_eta]
    x[..., psi.n_eta : psi.n_eta + psi.n_zeta] -= psi.evaluate(y)
    return x


def inverse_transform_coordinates(chi, psi: StabilizingFunction) -> np.ndarray:
    """φ⁻¹(χ₁, χ₂) = (χ₁, χ₂ + ψ(χ₁))"""
    chi = np.array(chi, dtype=float)
    y = chi[..., : psi.n_eta]
    chi[..., psi.n_eta : psi.n_eta + psi.n_zeta] += psi.evaluate(y)
    return chi


def synthesize_recursive(
    sys: CascadeSystem, psi: StabilizingFunction, lambdas: Sequence[float]
) -> FeedbackLaw:
    """
    多积分器链的递归反步综合

    第 i 层把上一层的虚拟控制 ψᵢ₋₁ 当作镇定函数:
    ψᵢ = −λᵢ(ζᵢ − ψᵢ₋₁) + (∂ψᵢ₋₁/∂(η,ζ₁..ζᵢ₋₁))·Fᵢ₋₁，最终 υ = ψₖ + υ̂。
    全导数项由 sympy 按链式法则精确求出。

    Raises:
        UnsupportedConfigurationError: 系统或 ψ 没有符号表达式
    """
    lambdas = [float(v) for v in lambdas]
    if len(lambdas) != sys.layers:
        raise ValueError(f"增益个数 {len(lambdas)} 与积分器层数 {sys.layers} 不一致")
    if any(v <= 0 for v in lambdas):
        raise ValueError(f"各层增益必须为正: {lambdas}")
    if sys.layers == 1:
        return synthesize_law(sys, psi, lambdas[0])
    if sys.symbolic is None or psi.expr is None:
        raise UnsupportedConfigurationError("递归反步需要系统与 ψ 的符号表达式 (差分链会放大噪声)")

    symbolic = sys.symbolic
    substitution = dict(zip(psi.eta_symbols, symbolic.eta_symbols))
    virtual = sp.Matrix([e.subs(substitution, simultaneous=True) for e in psi.expr])
    states = list(symbolic.eta_symbols)
    dynamics = sp.Matrix(symbolic.eta_rhs)

    for i, lam in enumerate(lambdas):
        layer = sp.Matrix(symbolic.zeta_symbols[i])
        total = virtual.jacobian(sp.Matrix(states)) * dynamics
        virtual = (-lam * (layer - virtual) + total).expand()
        states += list(symbolic.zeta_symbols[i])
        if i + 1 < len(lambdas):
            dynamics = dynamics.col_join(sp.Matrix(symbolic.zeta_symbols[i + 1]))

    exprs = list(virtual)
    compiled = _lambdify_components(exprs, symbolic.all_symbols)

    def law(eta: np.ndarray, zeta: np.ndarray, vhat: np.ndarray) -> np.ndarray:
        return compiled(_join(eta, zeta)) + vhat

    logger.info(f"{sys.name}: 递归反步综合完成，{sys.layers} 层，增益 {lambdas}")
    return FeedbackLaw(
        func=law,
        gain=tuple(lambdas),
        provenance="recursive-backstepping",
        n_eta=sys.n_eta,
        n_zeta=sys.n_zeta,
        layers=sys.layers,
        description={
            "psi": psi.describe(),
            "pre_transform": None,
            "law": [str(e) for e in exprs],
        },
    )
