"""
主程序入口
子命令: simulate | synthesize-law | verify | abstract | check-epsilon | synthesize | replay
"""

import argparse
import dataclasses
import logging
import os
import sys
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import ValidationError

from .abstraction import check_epsilon, compute_transitions, load_abstraction, save_abstraction
from .backstepping import StabilizingFunction, eta_subsystem_field
from .config import Config, ProjectConfig
from .contraction import (
    build_block_metric,
    check_contraction_bound,
    check_contraction_states_inputs,
    fit_contraction_rate,
)
from .data_exporter import ArtifactExporter, PhasePlot, point_label
from .data_models import CertificateSuiteReport
from .dynamics import InputSignal, check_delta_iss_empirical, integrate
from .exceptions import (
    CorruptFileError,
    DimensionMismatchError,
    DivergenceError,
    InvalidSetError,
    MissingArtifactError,
    UnsupportedConfigurationError,
)
from .logger import setup_logger
from .lyapunov import (
    ExponentialBound,
    sample_pairs,
    verify_condition_i,
    verify_condition_iii,
    verify_lipschitz,
)
from .synthesis import (
    ControllerTable,
    build_arena,
    closed_loop_replay,
    solve_reach_avoid_stay,
    stay_cells,
    verify_controller,
)
from .systems import SystemSetup, load_system

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2
EXIT_RUNTIME = 3


class Pipeline:
    """一次命令行调用的上下文: 配置、系统实例与产物导出"""

    def __init__(self, config: Config, settings: ProjectConfig):
        self.config = config
        self.settings = settings
        self.exporter = ArtifactExporter(config)
        self.setup = self._load_setup()

    def _load_setup(self) -> SystemSetup:
        system = self.settings.system
        setup = load_system(system.name, system.factory)
        if system.psi is not None:
            psi = StabilizingFunction.linear(system.psi.gain, system.psi.offset)
            setup = dataclasses.replace(setup, psi=psi)
        return setup

    @property
    def gains(self) -> Optional[List[float]]:
        return self.settings.system.gain

    @property
    def threads(self) -> Optional[int]:
        return self.settings.runtime.threads

    @property
    def seed(self) -> int:
        return self.settings.runtime.seed

    def closed_loop(self):
        return self.setup.closed_loop(self.gains)

    def initial_conditions(
        self, override: Optional[Sequence[float]], configured
    ) -> List[List[float]]:
        if override is not None:
            return [list(override)]
        if configured:
            return [list(x) for x in configured]
        if not self.setup.initial_conditions:
            raise UnsupportedConfigurationError(
                f"系统 {self.setup.name} 没有登记初始状态，请在配置中给出"
            )
        return [list(x) for x in self.setup.initial_conditions]

    def load_abstraction(self):
        path = self.exporter.abstraction_path
        if not os.path.exists(path):
            raise MissingArtifactError(path, "abstract")
        return load_abstraction(path, self.settings.abstraction.grid_spec())

    def load_controller(self, abstraction, n_modes: int) -> ControllerTable:
        path = self.exporter.controller_path
        if not os.path.exists(path):
            raise MissingArtifactError(path, "synthesize")
        try:
            frame = pd.read_csv(path)
        except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise CorruptFileError(path, str(e)) from e
        return ControllerTable.from_frame(
            frame, abstraction.n_states, n_modes, abstraction.input_grid.points
        )


def cmd_simulate(pipeline: Pipeline, args: argparse.Namespace) -> int:
    """闭环仿真，导出轨迹 CSV 与相图"""
    settings = pipeline.settings.simulation
    field = pipeline.closed_loop()
    horizon = settings.horizon if args.horizon is None else args.horizon
    domain = pipeline.settings.abstraction.domain
    trajectories = []
    for x0 in pipeline.initial_conditions(args.x0, settings.x0):
        if len(x0) == domain.dim and not domain.contains(x0):
            logger.warning(f"初始状态 {x0} 不在定义域内，仍然仿真")
        trajectory = integrate(field, x0, settings.input, horizon, settings.step)
        pipeline.exporter.export_trajectory(trajectory, point_label(x0))
        trajectories.append(trajectory.states)
    if settings.plot and field.state_dim >= 2 and domain.dim >= 2:
        plot = PhasePlot(domain=domain, trajectories=trajectories, title=pipeline.setup.name)
        pipeline.exporter.export_phase_plot(plot, "trajectories")
    return EXIT_OK


def cmd_synthesize_law(pipeline: Pipeline, args: argparse.Namespace) -> int:
    """综合反馈律并写出 JSON 描述"""
    law = pipeline.setup.law(pipeline.gains)
    description = {"system": pipeline.setup.name, **law.describe()}
    pipeline.exporter.export_report(description, "law")
    return EXIT_OK


def _initial_pairs(pipeline: Pipeline) -> List[tuple]:
    """登记的初始状态两两成对，零输入；另加一对同初值、输入相差 1 的轨迹"""
    points = pipeline.initial_conditions(None, pipeline.settings.synthesis.initial_conditions)
    m = pipeline.setup.system.n_zeta
    zero, one = InputSignal.zero(), InputSignal.constant(np.ones(m))
    pairs = [
        (points[i], points[j], zero, zero)
        for i in range(len(points))
        for j in range(i + 1, len(points))
    ]
    pairs.append((points[0], points[0], zero, one))
    return pairs


def _sampling_options(pipeline: Pipeline, n_samples: int) -> Dict[str, object]:
    settings = pipeline.settings.verification
    return {
        "n_samples": n_samples,
        "tol": settings.tol,
        "seed": pipeline.seed,
        "method": settings.method,
        "threads": pipeline.threads,
    }


def _verify_lyapunov(pipeline: Pipeline) -> CertificateSuiteReport:
    setup = pipeline.setup
    settings = pipeline.settings.verification
    common = _sampling_options(pipeline, settings.n_samples)
    if setup.closed_certificate is None:
        raise UnsupportedConfigurationError(f"系统 {setup.name} 没有登记李雅普诺夫证书")

    law = setup.law(pipeline.gains)
    field = pipeline.closed_loop()
    reports = []
    if setup.eta_certificate is not None:
        reports.append(
            verify_condition_iii(
                eta_subsystem_field(setup.system, setup.psi),
                setup.eta_certificate,
                state_box=settings.eta_state_box,
                input_box=settings.eta_input_box,
                name="eta_subsystem_decay",
                **common,
            )
        )
    reports.append(
        verify_condition_iii(
            field,
            setup.closed_certificate,
            state_box=settings.state_box,
            input_box=settings.input_box,
            name="closed_loop_decay",
            **common,
        )
    )
    x, xp = sample_pairs(settings.state_box, settings.pair_samples, pipeline.seed)
    reports.append(
        verify_condition_i(
            setup.closed_certificate, x, xp, settings.tol, name="closed_loop_sandwich"
        )
    )

    bound_checks = {}
    pairs = _initial_pairs(pipeline)
    if setup.sqrt_certificate is not None:
        sqrt_form = setup.sqrt_certificate
        reports.append(
            verify_condition_iii(
                field,
                sqrt_form,
                state_box=settings.state_box,
                input_box=settings.input_box,
                name="sqrt_decay",
                **common,
            )
        )
        reports.append(verify_condition_i(sqrt_form, x, xp, settings.tol, name="sqrt_sandwich"))
        reports.append(
            verify_lipschitz(
                sqrt_form, settings.state_box, settings.pair_samples, pipeline.seed, settings.tol
            )
        )
        bound = ExponentialBound.from_sqrt_form(sqrt_form, sqrt_form.kappa, sqrt_form.kappa_hat)
        bound_checks["sqrt_bound"] = check_delta_iss_empirical(
            field, pairs, bound, settings.bound_horizon, settings.bound_step
        )
    certificate = setup.closed_certificate
    # V(t) ≤ 1.05·e^{−κt}·V(0)，即 √V 以 κ/2 衰减、超调 √1.05
    decay = ExponentialBound(
        C=float(np.sqrt(1.05)), lambda_decay=certificate.kappa / 2.0, metric=certificate.P.tolist()
    )
    same_input = [p for p in pairs if p[2] == p[3]]
    bound_checks["quadratic_decay"] = check_delta_iss_empirical(
        field, same_input, decay, settings.bound_horizon, settings.bound_step
    )

    passed = all(r.passed for r in reports) and all(b.passed for b in bound_checks.values())
    return CertificateSuiteReport(
        passed=passed, reports=reports, bound_checks=bound_checks, gain_warnings=law.gain_warnings
    )


def _verify_contraction(pipeline: Pipeline) -> CertificateSuiteReport:
    setup = pipeline.setup
    settings = pipeline.settings.verification
    if setup.closed_metric is None:
        raise UnsupportedConfigurationError(f"系统 {setup.name} 没有登记收缩度量")
    common = _sampling_options(pipeline, settings.contraction_samples)

    law = setup.law(pipeline.gains)
    field = pipeline.closed_loop()
    reports = []
    block_metric = None
    if setup.eta_metric is not None:
        eta = setup.eta_metric
        reports.append(
            check_contraction_states_inputs(
                eta_subsystem_field(setup.system, setup.psi),
                eta.metric_field,
                eta.lambda_hat,
                eta.alpha,
                settings.eta_state_box,
                settings.eta_input_box,
                name="eta_subsystem_contraction",
                **common,
            )
        )
        block_metric = build_block_metric(eta.metric_field, setup.psi)
        reports.append(
            block_metric.check_positive_definite(
                settings.state_box,
                settings.pair_samples,
                pipeline.seed,
                name="block_metric_positive_definite",
            )
        )

    metric = setup.closed_metric
    reports.append(
        check_contraction_states_inputs(
            field,
            metric.metric_field,
            metric.lambda_hat,
            metric.alpha,
            settings.state_box,
            settings.input_box,
            name="closed_loop_contraction",
            **common,
        )
    )
    fit_metric = block_metric if block_metric is not None else metric.metric_field
    lambda_hat, alpha = fit_contraction_rate(
        field,
        fit_metric,
        settings.state_box,
        settings.input_box,
        settings.contraction_samples,
        pipeline.seed,
        pipeline.threads,
    )
    bound_checks = {
        "contraction_bound": check_contraction_bound(
            field, metric, _initial_pairs(pipeline), settings.bound_horizon, settings.bound_step
        )
    }
    passed = all(r.passed for r in reports) and all(b.passed for b in bound_checks.values())
    return CertificateSuiteReport(
        passed=passed,
        reports=reports,
        bound_checks=bound_checks,
        gain_warnings=law.gain_warnings,
        fitted={"lambda_hat": lambda_hat, "alpha": alpha},
    )


def cmd_verify(pipeline: Pipeline, args: argparse.Namespace) -> int:
    """证书采样验证，通过返回 0，否则返回 1"""
    if args.which == "lyapunov":
        report = _verify_lyapunov(pipeline)
    else:
        report = _verify_contraction(pipeline)
    pipeline.exporter.export_report(report, f"verify_{args.which}")
    for warning in report.gain_warnings:
        logger.warning(warning)
    logger.info(f"验证{'通过' if report.passed else '未通过'}: {args.which}")
    return EXIT_OK if report.passed else EXIT_FAILED


def cmd_abstract(pipeline: Pipeline, args: argparse.Namespace) -> int:
    """构建有限抽象并写出二进制文件与元数据"""
    settings = pipeline.settings.abstraction
    abstraction = compute_transitions(
        pipeline.closed_loop(), settings.grid_spec(), settings.step, pipeline.threads
    )
    save_abstraction(abstraction, pipeline.exporter.abstraction_path)
    return EXIT_OK


def cmd_check_epsilon(pipeline: Pipeline, args: argparse.Namespace) -> int:
    """经验检验抽象精度 ε"""
    settings = pipeline.settings.abstraction
    abstraction = pipeline.load_abstraction()
    report = check_epsilon(
        pipeline.closed_loop(),
        abstraction,
        settings.epsilon,
        settings.epsilon_runs,
        settings.epsilon_run_length,
        pipeline.seed,
        settings.step,
    )
    pipeline.exporter.export_report(report, "epsilon")
    return EXIT_OK if report.passed else EXIT_FAILED


def cmd_synthesize(pipeline: Pipeline, args: argparse.Namespace) -> int:
    """求解到达-避障-停留博弈并写出控制器表"""
    abstraction = pipeline.load_abstraction()
    scheduler = pipeline.settings.synthesis.automaton()
    region = pipeline.settings.region_spec()
    arena = build_arena(abstraction, scheduler)
    step = pipeline.settings.abstraction.step
    cells = stay_cells(pipeline.closed_loop(), abstraction, region, step)
    table = solve_reach_avoid_stay(arena, region, cells)
    problems = verify_controller(arena, table)
    pipeline.exporter.export_controller(table)

    grid = abstraction.state_grid
    starts = {}
    for x0 in pipeline.initial_conditions(None, pipeline.settings.synthesis.initial_conditions):
        s = int(grid.snap(x0))
        starts[point_label(x0)] = table.is_winning(s, scheduler.initial)
    summary = {
        "n_product_states": arena.n_product,
        "winning_states": int(table.winning.sum()),
        "invariant_states": int(table.invariant.sum()),
        "max_bfs_depth": int(table.depth.max()),
        "scheduler": scheduler.pattern,
        "initial_mode": scheduler.initial,
        "initial_conditions_winning": starts,
        "problems": problems,
    }
    pipeline.exporter.export_report(summary, "synthesis")
    if not table.winning.any():
        logger.warning("获胜集为空")
    return EXIT_OK if not problems and table.winning.any() else EXIT_FAILED


def cmd_replay(pipeline: Pipeline, args: argparse.Namespace) -> int:
    """从给定初始状态回放闭环"""
    settings = pipeline.settings.synthesis
    abstraction = pipeline.load_abstraction()
    scheduler = settings.automaton()
    table = pipeline.load_controller(abstraction, scheduler.n_states)
    region = pipeline.settings.region_spec()
    field = pipeline.closed_loop()
    step = settings.replay_step or pipeline.settings.abstraction.step or abstraction.tau / 100.0

    all_ok = True
    trajectories = []
    for x0 in pipeline.initial_conditions(args.x0, settings.initial_conditions):
        label = point_label(x0)
        report, log, trajectory = closed_loop_replay(
            field, table, abstraction, scheduler, region, x0, settings.replay_slots, step
        )
        pipeline.exporter.export_replay(log, label)
        pipeline.exporter.export_report(report, f"replay_{label}")
        trajectories.append(trajectory.states)
        all_ok &= report.success
    if field.state_dim >= 2:
        plot = PhasePlot(
            domain=region.domain,
            trajectories=trajectories,
            target=region.target,
            obstacles=region.obstacles,
            title=f"{pipeline.setup.name} ({scheduler.pattern})",
        )
        pipeline.exporter.export_phase_plot(plot, "replay")
    return EXIT_OK if all_ok else EXIT_FAILED


COMMANDS: Dict[str, Callable[[Pipeline, argparse.Namespace], int]] = {
    "simulate": cmd_simulate,
    "synthesize-law": cmd_synthesize_law,
    "verify": cmd_verify,
    "abstract": cmd_abstract,
    "check-epsilon": cmd_check_epsilon,
    "synthesize": cmd_synthesize,
    "replay": cmd_replay,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="config/config.yaml", help="配置文件路径")
    common.add_argument("--eta", type=float, help="状态量化精度 (覆盖配置)")
    common.add_argument("--tau", type=float, help="采样时间 (覆盖配置)")
    common.add_argument("--epsilon", type=float, help="抽象精度 ε (覆盖配置)")
    common.add_argument("--seed", type=int, help="随机种子 (覆盖配置)")
    common.add_argument("--threads", type=int, help="线程数 (覆盖配置)")

    parser = argparse.ArgumentParser(
        prog="deltaiss-synth", description="增量稳定反步设计与符号控制器综合"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    simulate = commands.add_parser("simulate", parents=[common], help="闭环仿真")
    simulate.add_argument("--x0", type=float, nargs="+", help="初始状态")
    simulate.add_argument("--horizon", type=float, help="仿真时长 (秒)")

    commands.add_parser("synthesize-law", parents=[common], help="综合反馈律")

    verify = commands.add_parser("verify", parents=[common], help="证书采样验证")
    verify.add_argument("which", choices=["lyapunov", "contraction"])

    commands.add_parser("abstract", parents=[common], help="构建有限抽象")
    commands.add_parser("check-epsilon", parents=[common], help="经验检验抽象精度")
    commands.add_parser("synthesize", parents=[common], help="综合控制器")

    replay = commands.add_parser("replay", parents=[common], help="闭环回放")
    replay.add_argument("--x0", type=float, nargs="+", help="初始状态")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    主程序

    Args:
        argv: 命令行参数 (缺省取 sys.argv)

    Returns:
        返回码 (0: 成功/通过, 1: 验证未通过, 2: 用法或配置错误, 3: 运行时错误)
    """
    args = build_parser().parse_args(argv)
    try:
        config = Config(args.config)
        config.apply_overrides(
            eta=args.eta, tau=args.tau, epsilon=args.epsilon, seed=args.seed, threads=args.threads
        )
        settings = config.validate()
    except (FileNotFoundError, ValidationError, ValueError) as e:
        logging.error(f"配置错误: {e}")
        return EXIT_USAGE

    log_config = settings.logging
    setup_logger(
        name=__package__ or "src",
        log_dir=log_config.log_dir,
        level=log_config.level,
        max_bytes=log_config.max_log_size,
        backup_count=log_config.backup_count,
    )
    logger.info("=" * 50)
    logger.info(f"命令: {args.command}，配置文件: {args.config}")
    logger.info("=" * 50)

    try:
        pipeline = Pipeline(config, settings)
        return COMMANDS[args.command](pipeline, args)
    except MissingArtifactError as e:
        logger.error(str(e))
        return EXIT_RUNTIME
    except (DivergenceError, CorruptFileError, DimensionMismatchError) as e:
        logger.error(f"运行时错误: {e}")
        return EXIT_RUNTIME
    except (UnsupportedConfigurationError, InvalidSetError, ValidationError, ValueError) as e:
        logger.error(f"配置错误: {e}")
        return EXIT_USAGE
    except Exception as e:
        logger.error(f"程序执行出错: {e}", exc_info=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
