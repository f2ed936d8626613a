"""控制器综合模块测试"""

import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

from src.abstraction import BLOCKED, CellSuccessors
from src.data_models import Box
from src.exceptions import DimensionMismatchError, InvalidSetError
from src.synthesis import (
    CONTROLLER_COLUMNS,
    ControllerTable,
    GameArena,
    RegionSpec,
    SchedulerAutomaton,
    closed_loop_replay,
    solve_invariance,
    solve_reach_avoid_stay,
    solve_robust_invariance,
    verify_controller,
)
from tests.conftest import TEST_ETA, TEST_STEP


def _line_arena(transitions, scheduler=None) -> GameArena:
    """状态 s 位于 x = s 的一维手工博弈，输入值为 0, 1, ..."""
    transitions = np.asarray(transitions)
    n_states, n_inputs = transitions.shape
    return GameArena.from_transitions(
        transitions,
        scheduler or SchedulerAutomaton.always_available(),
        zero_index=0,
        state_points=np.arange(n_states, dtype=float)[:, None],
        input_values=np.arange(n_inputs, dtype=float)[:, None],
    )


@pytest.fixture
def line_region():
    """目标为状态 3，障碍为状态 1"""
    return RegionSpec(
        target=Box(lo=[2.5], hi=[3.0]),
        obstacles=[Box(lo=[0.5], hi=[1.5])],
        domain=Box(lo=[0.0], hi=[3.0]),
    )


@pytest.fixture
def pair_region():
    """目标为状态 2 与 3，没有障碍物"""
    return RegionSpec(target=Box(lo=[1.5], hi=[3.0]), domain=Box(lo=[0.0], hi=[3.0]))


class TestScheduler:
    """调度自动机测试"""

    def test_from_pattern(self):
        """测试 a/u 模式解析"""
        scheduler = SchedulerAutomaton.from_pattern("AUU", initial=1)
        assert scheduler.outputs == [True, False, False]
        assert scheduler.pattern == "auu"
        assert scheduler.initial == 1
        assert not scheduler.available(1)
        assert scheduler.slot(0) == "a"

    def test_cyclic_next(self):
        """测试循环推进"""
        scheduler = SchedulerAutomaton.from_pattern("auu")
        assert [scheduler.next(q) for q in range(3)] == [1, 2, 0]

    def test_invalid_pattern(self):
        """测试非法模式"""
        with pytest.raises(ValueError):
            SchedulerAutomaton.from_pattern("abc")
        with pytest.raises(ValueError):
            SchedulerAutomaton.from_pattern("")

    def test_initial_out_of_range(self):
        """测试初始状态越界"""
        with pytest.raises(ValidationError):
            SchedulerAutomaton.from_pattern("au", initial=2)


class TestRegionSpec:
    """区域规格测试"""

    def test_membership(self, region):
        """测试目标集与障碍物判定"""
        points = np.array([[0.0, 0.0], [0.3, 0.3], [-0.3, -0.3], [0.5, -0.5]])
        assert region.in_target(points).tolist() == [True, False, False, False]
        assert region.in_obstacle(points).tolist() == [False, True, True, False]

    def test_target_distance(self, region):
        """测试到目标集的无穷范数距离"""
        distance = region.target_distance(np.array([[0.1, 0.0], [0.0, 0.0], [-0.3, 0.15]]))
        np.testing.assert_allclose(distance, [0.05, 0.0, 0.25])

    def test_target_outside_domain(self):
        """测试目标集超出定义域"""
        with pytest.raises(ValidationError):
            RegionSpec(target=Box.cube(2.0, 2), domain=Box.cube(1.0, 2))

    def test_dimension_mismatch(self):
        """测试维数不一致"""
        with pytest.raises(ValidationError):
            RegionSpec(
                target=Box.cube(0.1, 2),
                obstacles=[Box.cube(0.5, 3)],
                domain=Box.cube(1.0, 2),
            )


class TestArena:
    """乘积博弈测试"""

    def test_product_indexing(self):
        """测试乘积编号 p = s·Q + q 与自动机推进"""
        scheduler = SchedulerAutomaton.from_pattern("au")
        arena = _line_arena([[1, 0], [0, BLOCKED]], scheduler)
        assert arena.n_product == 4
        assert arena.n_modes == 2
        # (s=0, q=0) 输入 1 → (s=0, q=1)
        assert arena.succ[0, 1] == 1
        # (s=0, q=1) 不可用，只允许零输入
        assert arena.succ[1, 0] == 2 * 1 + 0
        assert arena.succ[1, 1] == -1
        assert arena.admissible[1].tolist() == [True, False]
        # BLOCKED 转移没有后继
        assert arena.succ[2, 1] == -1

    def test_lift(self):
        """测试掩码提升"""
        arena = _line_arena([[0], [1]], SchedulerAutomaton.from_pattern("auu"))
        assert arena.lift([True, False]).tolist() == [True] * 3 + [False] * 3

    def test_invalid_zero_index(self):
        """测试零输入编号越界"""
        with pytest.raises(InvalidSetError):
            GameArena.from_transitions(
                np.zeros((2, 2), dtype=int),
                SchedulerAutomaton.always_available(),
                zero_index=5,
                state_points=np.zeros((2, 1)),
                input_values=np.zeros((2, 1)),
            )

    def test_unavailable_slots_only_zero(self, saturation_arena, saturation_abstraction):
        """测试 auu 调度下不可用时隙只允许零输入"""
        zero = saturation_abstraction.zero_input_index()
        for q in (1, 2):
            rows = np.arange(q, saturation_arena.n_product, saturation_arena.n_modes)
            admissible = saturation_arena.admissible[rows]
            assert admissible[:, zero].all()
            assert admissible.sum() == len(rows)


class TestFixpoints:
    """不动点求解测试"""

    def test_invariance_empty(self):
        """测试没有受控不变集时获胜集为空"""
        arena = _line_arena([[1], [BLOCKED]])
        winning, strategy = solve_invariance(arena, np.array([True, True]))
        assert not winning.any()
        assert (strategy == -1).all()

    def test_invariance_lowest_witness(self):
        """测试策略为编号最小的见证输入"""
        arena = _line_arena([[BLOCKED, 0, 1], [1, 1, 0]])
        winning, strategy = solve_invariance(arena, np.array([True, True]))
        assert winning.all()
        assert strategy.tolist() == [1, 0]

    def test_reach_avoid_stay(self, line_region):
        """测试手工博弈的到达-避障-停留控制器与 BFS 深度"""
        arena = _line_arena([[1, 2], [1, 1], [3, 1], [3, 1]])
        table = solve_reach_avoid_stay(arena, line_region)
        assert table.winning.tolist() == [True, False, True, True]
        assert table.inputs.tolist() == [1, -1, 0, 0]
        assert table.depth.tolist() == [2, -1, 1, 0]
        assert table.invariant.tolist() == [False, False, False, True]
        assert verify_controller(arena, table) == []

    def test_obstacle_never_winning(self, line_region):
        """测试障碍物状态即使能到达目标也不在获胜集"""
        arena = _line_arena([[3, 3], [3, 3], [3, 3], [3, 3]])
        table = solve_reach_avoid_stay(arena, line_region)
        assert table.winning.tolist() == [True, False, True, True]


class TestControllerTable:
    """控制器表测试"""

    def test_frame_round_trip(self, line_region):
        """测试表格写出后读回"""
        arena = _line_arena([[1, 2], [1, 1], [3, 1], [3, 1]])
        table = solve_reach_avoid_stay(arena, line_region)
        frame = table.to_frame()
        assert list(frame.columns) == CONTROLLER_COLUMNS
        assert frame["state_index"].tolist() == [0, 2, 3]
        assert frame["input_value"].tolist() == [1.0, 0.0, 0.0]
        restored = ControllerTable.from_frame(frame, 4, 1, arena.input_values)
        np.testing.assert_array_equal(restored.inputs, table.inputs)
        np.testing.assert_array_equal(restored.depth, table.depth)
        np.testing.assert_array_equal(restored.invariant, table.invariant)

    def test_missing_columns(self):
        """测试缺少列"""
        frame = pd.DataFrame({"state_index": [0]})
        with pytest.raises(DimensionMismatchError):
            ControllerTable.from_frame(frame, 4, 1, np.zeros((2, 1)))

    def test_state_out_of_range(self, line_region):
        """测试状态编号超出抽象范围"""
        arena = _line_arena([[1, 2], [1, 1], [3, 1], [3, 1]])
        frame = solve_reach_avoid_stay(arena, line_region).to_frame()
        with pytest.raises(DimensionMismatchError):
            ControllerTable.from_frame(frame, 3, 1, arena.input_values)

    def test_lookup(self, saturation_controller, saturation_abstraction):
        """测试原点在所有自动机状态下都取获胜"""
        origin = int(saturation_abstraction.state_grid.index_of(np.zeros(2)))
        for q in range(3):
            assert saturation_controller.is_winning(origin, q)
            assert saturation_controller.depth[origin * 3 + q] == 0


class TestSaturationController:
    """饱和级联系统在 auu 调度下的控制器"""

    def test_exhaustive_check(self, saturation_arena, saturation_controller):
        """测试控制器通过穷举检查"""
        assert verify_controller(saturation_arena, saturation_controller) == []

    def test_initial_condition_winning(self, saturation_controller, saturation_abstraction):
        """测试 (0.8, 0.9) 在初始自动机状态下获胜"""
        s = int(saturation_abstraction.state_grid.snap(np.array([0.8, 0.9])))
        assert saturation_controller.is_winning(s, 1)

    def test_unavailable_slots_use_zero(self, saturation_controller, saturation_abstraction):
        """测试不可用时隙的控制输入均为零"""
        zero = saturation_abstraction.zero_input_index()
        table = saturation_controller
        for q in (1, 2):
            rows = np.arange(q, len(table.inputs), 3)
            chosen = table.inputs[rows][table.winning[rows]]
            assert (chosen == zero).all()

    def test_tampered_controller_detected(self, saturation_arena, saturation_controller):
        """测试不可用时隙使用非零输入被发现"""
        inputs = saturation_controller.inputs.copy()
        rows = np.flatnonzero(saturation_controller.winning)
        victim = rows[rows % 3 == 1][0]
        inputs[victim] = saturation_arena.n_inputs - 1
        tampered = ControllerTable(
            inputs=inputs,
            depth=saturation_controller.depth,
            invariant=saturation_controller.invariant,
            n_modes=3,
            input_values=saturation_controller.input_values,
        )
        problems = verify_controller(saturation_arena, tampered)
        assert any(p.startswith("输入不可用") for p in problems)


class TestRobustCore:
    """鲁棒停留核心测试"""

    def test_robust_witness_differs(self, pair_region):
        """测试单元后继越出安全集的输入不再作为见证"""
        arena = _line_arena([[1, 1], [2, 3], [2, 3], [3, 3]])
        cells = CellSuccessors(
            states=np.array([2, 3]),
            successors=np.array([[[2, 1], [3, 3]], [[3, 3], [3, 3]]]),
        )
        safe = arena.lift(pair_region.in_target(arena.state_points))
        _, nominal = solve_invariance(arena, safe)
        winning, robust = solve_robust_invariance(arena, safe, cells)
        assert nominal.tolist() == [-1, -1, 0, 0]
        assert winning.tolist() == [False, False, True, True]
        assert robust.tolist() == [-1, -1, 1, 0]

    def test_blocked_cell_not_winning(self, pair_region):
        """测试单元后继 BLOCKED 的状态不在鲁棒核心中"""
        arena = _line_arena([[1, 1], [2, 3], [3, 3], [3, 3]])
        cells = CellSuccessors(
            states=np.array([2, 3]),
            successors=np.array([[[BLOCKED, BLOCKED]], [[3, 3]]]).repeat(2, axis=1),
        )
        safe = arena.lift(pair_region.in_target(arena.state_points))
        winning, _ = solve_robust_invariance(arena, safe, cells)
        assert winning.tolist() == [False, False, False, True]

    def test_uncovered_states_excluded(self, pair_region):
        """测试没有单元后继的安全状态被排除"""
        arena = _line_arena([[1], [2], [3], [3]])
        cells = CellSuccessors(states=np.array([3]), successors=np.array([[[3]]]))
        safe = arena.lift(pair_region.in_target(arena.state_points))
        winning, _ = solve_robust_invariance(arena, safe, cells)
        assert winning.tolist() == [False, False, False, True]

    def test_reach_uses_robust_core(self, pair_region):
        """测试到达阶段以鲁棒核心为目标"""
        arena = _line_arena([[1, 1], [2, 3], [2, 3], [3, 3]])
        cells = CellSuccessors(
            states=np.array([2, 3]),
            successors=np.array([[[2, 1], [3, 3]], [[3, 3], [3, 3]]]),
        )
        table = solve_reach_avoid_stay(arena, pair_region, cells)
        assert table.invariant.tolist() == [False, False, True, True]
        assert table.inputs.tolist() == [0, 0, 1, 0]
        assert table.depth.tolist() == [2, 1, 0, 0]
        assert verify_controller(arena, table) == []

    def test_saturation_core_closed_under_cells(
        self, saturation_arena, saturation_controller, saturation_cells, region
    ):
        """测试饱和系统的鲁棒核心: 非空、位于 W 内、单元后继仍在核心中"""
        table = saturation_controller
        core = np.flatnonzero(table.invariant)
        assert len(core) > 0
        states = core // 3
        assert region.in_target(saturation_arena.state_points[states]).all()
        rows = saturation_cells.rows_of(states, saturation_arena.n_states)
        successors = saturation_cells.successors[rows, table.inputs[core]]
        assert (successors != BLOCKED).all()
        next_mode = saturation_arena.succ[core, table.inputs[core]] % 3
        assert table.invariant[successors * 3 + next_mode[:, None]].all()

    def test_robust_core_inside_nominal(self, saturation_arena, saturation_controller, region):
        """测试鲁棒核心包含于名义不动点"""
        nominal = solve_reach_avoid_stay(saturation_arena, region)
        robust = saturation_controller.invariant
        assert not (robust & ~nominal.invariant).any()
        assert robust.sum() <= nominal.invariant.sum()


class TestReplay:
    """闭环回放测试"""

    @pytest.mark.parametrize("x0", [[0.8, 0.9], [-0.8, -0.9]])
    def test_replay_reaches_and_stays(
        self,
        saturation_closed_loop,
        saturation_controller,
        saturation_abstraction,
        auu_scheduler,
        region,
        x0,
    ):
        """测试进入目标集后至少 100 个时隙量化状态不离开 W，且避开障碍物"""
        report, log, trajectory = closed_loop_replay(
            saturation_closed_loop,
            saturation_controller,
            saturation_abstraction,
            auu_scheduler,
            region,
            x0,
            n_slots=200,
            step=TEST_STEP,
        )
        assert report.success
        assert report.failure_reason is None
        assert report.entered_target_step is not None
        assert report.n_slots - report.entered_target_step >= 100
        assert report.stayed_in_target
        assert not report.hit_obstacle
        assert report.max_target_distance <= TEST_ETA / 2
        assert report.scheduler_compliant
        assert list(log.columns) == ["t", "x1", "x2", "u", "slot"]
        assert log["slot"].tolist()[:4] == ["u", "u", "a", "u"]
        assert (log.loc[log["slot"] == "u", "u"] == 0.0).all()
        assert trajectory.times[-1] == pytest.approx(200 * 0.1)

    def test_quantized_states_stay_in_target(
        self,
        saturation_closed_loop,
        saturation_controller,
        saturation_abstraction,
        auu_scheduler,
        region,
    ):
        """测试进入后日志中每个采样点量化到 W 内的格点"""
        report, log, _ = closed_loop_replay(
            saturation_closed_loop,
            saturation_controller,
            saturation_abstraction,
            auu_scheduler,
            region,
            [0.8, 0.9],
            n_slots=200,
            step=TEST_STEP,
        )
        grid = saturation_abstraction.state_grid
        after = log[["x1", "x2"]].to_numpy()[report.entered_target_step :]
        assert len(after) >= 100
        assert region.in_target(grid.point(grid.snap(after))).all()

    def test_obstacle_on_path_fails(
        self,
        saturation_closed_loop,
        saturation_controller,
        saturation_abstraction,
        auu_scheduler,
        region,
    ):
        """测试回放路径上出现障碍物时判为失败"""
        _, log, _ = closed_loop_replay(
            saturation_closed_loop,
            saturation_controller,
            saturation_abstraction,
            auu_scheduler,
            region,
            [0.8, 0.9],
            n_slots=10,
            step=TEST_STEP,
        )
        on_path = log[["x1", "x2"]].to_numpy()[3]
        blocked = RegionSpec(
            target=region.target,
            obstacles=[
                *region.obstacles,
                Box(
                    lo=np.clip(on_path - 0.005, -1.0, 1.0).tolist(),
                    hi=np.clip(on_path + 0.005, -1.0, 1.0).tolist(),
                ),
            ],
            domain=region.domain,
        )
        report, _, _ = closed_loop_replay(
            saturation_closed_loop,
            saturation_controller,
            saturation_abstraction,
            auu_scheduler,
            blocked,
            [0.8, 0.9],
            n_slots=200,
            step=TEST_STEP,
        )
        assert report.hit_obstacle
        assert not report.success
        assert report.failure_step is None
        assert report.failure_reason == "轨迹碰到障碍物"

    def test_too_short_to_enter(
        self,
        saturation_closed_loop,
        saturation_controller,
        saturation_abstraction,
        auu_scheduler,
        region,
    ):
        """测试时隙数不足以进入不变核心时判为失败"""
        report, _, _ = closed_loop_replay(
            saturation_closed_loop,
            saturation_controller,
            saturation_abstraction,
            auu_scheduler,
            region,
            [0.8, 0.9],
            n_slots=1,
            step=TEST_STEP,
        )
        assert report.entered_target_step is None
        assert not report.stayed_in_target
        assert not report.success
        assert report.failure_reason is not None

    def test_replay_outside_domain(
        self,
        saturation_closed_loop,
        saturation_controller,
        saturation_abstraction,
        auu_scheduler,
        region,
    ):
        """测试初始状态在定义域外时立即失败"""
        report, log, _ = closed_loop_replay(
            saturation_closed_loop,
            saturation_controller,
            saturation_abstraction,
            auu_scheduler,
            region,
            [1.5, 0.0],
            n_slots=10,
            step=TEST_STEP,
        )
        assert not report.success
        assert report.failure_step == 0
        assert log.empty
