"""
内置示例系统注册表
每个条目给出级联系统、镇定函数、增益、输入预变换以及已知的李雅普诺夫/收缩证书
"""

import importlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import sympy as sp

from .backstepping import (
    CascadeSystem,
    FeedbackLaw,
    StabilizingFunction,
    apply_input_transform,
    closed_loop_field,
    synthesize_law,
    synthesize_recursive,
)
from .contraction import ConstantMetric
from .data_models import Box
from .dynamics import VectorField, saturation
from .exceptions import UnsupportedConfigurationError
from .lyapunov import QuadraticIncrementalForm, SqrtForm, compose_lyapunov

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SystemSetup:
    """一个可复现的反步设计实例"""

    name: str
    system: CascadeSystem
    psi: StabilizingFunction
    gains: Tuple[float, ...]
    pre_transform: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    pre_transform_spec: Optional[str] = None
    eta_certificate: Optional[QuadraticIncrementalForm] = None
    closed_certificate: Optional[QuadraticIncrementalForm] = None
    sqrt_certificate: Optional[SqrtForm] = None
    eta_metric: Optional[ConstantMetric] = None
    closed_metric: Optional[ConstantMetric] = None
    initial_conditions: List[Tuple[float, ...]] = field(default_factory=list)
    domain: Optional[Box] = None

    def law(self, gains: Optional[Sequence[float]] = None) -> FeedbackLaw:
        """综合反馈律 (含输入预变换)，gains 缺省使用登记值"""
        gains = tuple(self.gains if gains is None else gains)
        if self.system.layers == 1:
            lyapunov_rates = (
                [(self.eta_certificate.kappa, self.eta_certificate.kappa_hat)]
                if self.eta_certificate is not None
                else None
            )
            contraction_rates = (
                [(self.eta_metric.lambda_hat, self.eta_metric.alpha)]
                if self.eta_metric is not None
                else None
            )
            law = synthesize_law(
                self.system, self.psi, gains[0], lyapunov_rates, contraction_rates
            )
        else:
            law = synthesize_recursive(self.system, self.psi, gains)
        if self.pre_transform is not None:
            law = apply_input_transform(law, self.pre_transform, self.pre_transform_spec)
        return law

    def closed_loop(self, gains: Optional[Sequence[float]] = None) -> VectorField:
        return closed_loop_field(self.system, self.law(gains))


def _saturation_eta_jac_x(y: np.ndarray, z: np.ndarray) -> np.ndarray:
    slope = np.where(np.abs(y) < 1.0, 2.0, 1.0)
    return slope[..., None]


def _saturation_eta_jac_u(y: np.ndarray, z: np.ndarray) -> np.ndarray:
    shape = np.broadcast_shapes(y.shape[:-1], z.shape[:-1])
    return np.full(shape + (1, 1), 5.0)


def _square_drift(eta: np.ndarray, zeta: np.ndarray) -> np.ndarray:
    return eta**2 + zeta**2


def saturation_cascade() -> SystemSetup:
    """
    饱和级联系统

    η̇ = sat(η) + η + 5ζ, ζ̇ = ζ² + η² + υ，原点处开环不稳定。
    镇定函数 ψ(η) = −η，增益 λ = 16，输入预变换 η² + ζ² 抵消漂移项。
    """
    eta_field = VectorField(
        state_dim=1,
        input_dim=1,
        func=lambda y, z: saturation(y) + y + 5.0 * z,
        jac_x=_saturation_eta_jac_x,
        jac_u=_saturation_eta_jac_u,
        name="saturation_eta",
    )
    system = CascadeSystem(
        eta_field=eta_field, zeta_drift=_square_drift, name="saturation-cascade"
    )
    psi = StabilizingFunction.linear([[-1.0]])

    eta_certificate = QuadraticIncrementalForm(P=np.eye(1), kappa=5.0, kappa_hat=25.0, name="V1")
    composed = compose_lyapunov(eta_certificate, psi, kappa=5.0, kappa_hat=1.0).as_quadratic()
    sqrt_certificate = SqrtForm(
        base=composed, kappa=2.5, kappa_hat=1.0 / composed.lambda_min, name="V_hat"
    )
    return SystemSetup(
        name="saturation-cascade",
        system=system,
        psi=psi,
        gains=(16.0,),
        pre_transform=_square_drift,
        pre_transform_spec="eta1**2 + zeta1**2",
        eta_certificate=eta_certificate,
        closed_certificate=composed,
        sqrt_certificate=sqrt_certificate,
        eta_metric=ConstantMetric(G=np.eye(1), lambda_hat=6.0, alpha=10.0, name="G_hat"),
        closed_metric=ConstantMetric(G=composed.P, lambda_hat=5.0, alpha=2.0, name="G_block"),
        initial_conditions=[(0.8, 0.9), (-0.8, -0.9)],
        domain=Box.cube(1.0, 2),
    )


def double_integrator_chain() -> SystemSetup:
    """η̇ = ζ₁, ζ̇₁ = ζ₂, ζ̇₂ = υ，两层递归反步，ψ(η) = −η，增益 (2, 2)"""
    eta, z1, z2 = sp.symbols("eta1 zeta1 zeta2")
    system = CascadeSystem.from_symbolic(
        eta_symbols=[eta], zeta_symbols=[[z1], [z2]], eta_rhs=[z1], name="double-integrator-chain"
    )
    psi = StabilizingFunction.from_symbolic([-eta], [eta])
    return SystemSetup(
        name="double-integrator-chain",
        system=system,
        psi=psi,
        gains=(2.0, 2.0),
        initial_conditions=[(1.0, 0.0, 0.0)],
        domain=Box.cube(2.0, 3),
    )


BUILTIN_SYSTEMS: Dict[str, Callable[[], SystemSetup]] = {
    "saturation-cascade": saturation_cascade,
    "double-integrator-chain": double_integrator_chain,
}


def load_system(name: Optional[str] = None, factory: Optional[str] = None) -> SystemSetup:
    """
    按名称取内置系统，或按 "module:callable" 导入用户工厂函数

    Raises:
        UnsupportedConfigurationError: 名称未登记或工厂无法导入
    """
    if factory:
        module_name, _, attr = factory.partition(":")
        if not module_name or not attr:
            raise UnsupportedConfigurationError(f"工厂格式应为 module:callable，实际 {factory}")
        try:
            builder = getattr(importlib.import_module(module_name), attr)
        except (ImportError, AttributeError) as e:
            raise UnsupportedConfigurationError(f"无法导入系统工厂 {factory}: {e}") from e
        setup = builder()
        if not isinstance(setup, SystemSetup):
            raise UnsupportedConfigurationError(f"系统工厂 {factory} 没有返回 SystemSetup")
        logger.info(f"使用用户系统: {setup.name}")
        return setup
    if name not in BUILTIN_SYSTEMS:
        raise UnsupportedConfigurationError(
            f"未知内置系统 {name!r}，可选: {', '.join(sorted(BUILTIN_SYSTEMS))}"
        )
    return BUILTIN_SYSTEMS[name]()
