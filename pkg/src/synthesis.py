"""
控制器综合模块
有限抽象与调度自动机的乘积博弈，不动点求解到达-避障-停留规格，控制器表与闭环回放
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator

from .abstraction import BLOCKED, CellSuccessors, SymbolicAbstraction, cell_successors
from .data_models import Box, ReplayReport
from .dynamics import DEFAULT_STEP, InputSignal, Trajectory, VectorField, integrate
from .exceptions import DimensionMismatchError, DivergenceError, InvalidSetError

logger = logging.getLogger(__name__)

CONTROLLER_COLUMNS = ["state_index", "automaton_state", "input_index", "input_value", "bfs_depth"]
REGION_TOL = 1e-12


class SchedulerAutomaton(BaseModel):
    """
    循环调度自动机 q₀ → q₁ → ... → q₀

    outputs[q] 为 True 表示该时隙分配给控制任务 (a)，False 表示不可用 (u)。
    """

    outputs: List[bool] = Field(..., min_length=1, description="各状态是否可用")
    initial: int = Field(default=0, ge=0, description="初始状态 (从 0 编号)")

    @model_validator(mode="after")
    def check_initial(self) -> "SchedulerAutomaton":
        if self.initial >= len(self.outputs):
            raise ValueError(f"初始状态 {self.initial} 超出自动机状态数 {len(self.outputs)}")
        return self

    @classmethod
    def from_pattern(cls, pattern: str, initial: int = 0) -> "SchedulerAutomaton":
        """由 a/u 字符串构造，如 "auu" """
        pattern = pattern.strip().lower()
        if not pattern or set(pattern) - {"a", "u"}:
            raise ValueError(f"调度模式只能由 a/u 组成: {pattern!r}")
        return cls(outputs=[c == "a" for c in pattern], initial=initial)

    @classmethod
    def always_available(cls) -> "SchedulerAutomaton":
        return cls(outputs=[True], initial=0)

    @property
    def n_states(self) -> int:
        return len(self.outputs)

    @property
    def pattern(self) -> str:
        return "".join("a" if v else "u" for v in self.outputs)

    def next(self, q: int) -> int:
        return (q + 1) % self.n_states

    def available(self, q: int) -> bool:
        return self.outputs[q]

    def slot(self, q: int) -> str:
        return "a" if self.outputs[q] else "u"


class RegionSpec(BaseModel):
    """到达-避障-停留规格: 目标集 W、障碍物列表、定义域 D"""

    target: Box
    obstacles: List[Box] = Field(default_factory=list)
    domain: Box

    @model_validator(mode="after")
    def check_inside_domain(self) -> "RegionSpec":
        dims = {self.target.dim} | {o.dim for o in self.obstacles}
        if dims != {self.domain.dim}:
            raise ValueError("目标集、障碍物与定义域的维数必须一致")
        if not self.domain.contains_box(self.target):
            raise ValueError("目标集必须包含在定义域内")
        for obstacle in self.obstacles:
            if not self.domain.contains_box(obstacle):
                raise ValueError(f"障碍物 lo={obstacle.lo}, hi={obstacle.hi} 不在定义域内")
        return self

    def in_target(self, points) -> np.ndarray:
        return self.target.contains(points, REGION_TOL)

    def in_obstacle(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        hit = np.zeros(points.shape[:-1], dtype=bool)
        for obstacle in self.obstacles:
            hit |= obstacle.contains(points, REGION_TOL)
        return hit

    def target_distance(self, points) -> np.ndarray:
        """到目标集的无穷范数距离"""
        points = np.asarray(points, dtype=float)
        gap = np.maximum(self.target.lower - points, points - self.target.upper)
        return np.max(np.maximum(gap, 0.0), axis=-1)


@dataclass(frozen=True, eq=False)
class GameArena:
    """
    乘积博弈 (抽象状态 s × 自动机状态 q)，乘积编号 p = s·Q + q

    succ[p, j] 为后继乘积状态，未定义 (BLOCKED 或输入不可用) 时为 -1。
    """

    succ: np.ndarray
    admissible: np.ndarray
    n_modes: int
    zero_index: int
    state_points: np.ndarray
    input_values: np.ndarray

    @property
    def n_product(self) -> int:
        return self.succ.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.succ.shape[1]

    @property
    def n_states(self) -> int:
        return self.n_product // self.n_modes

    @classmethod
    def from_transitions(
        cls,
        transitions: np.ndarray,
        scheduler: SchedulerAutomaton,
        zero_index: int,
        state_points: np.ndarray,
        input_values: np.ndarray,
    ) -> "GameArena":
        transitions = np.asarray(transitions, dtype=np.int64)
        n_states, n_inputs = transitions.shape
        if not 0 <= zero_index < n_inputs:
            raise InvalidSetError(f"零输入编号 {zero_index} 超出输入范围")
        Q = scheduler.n_states
        next_mode = np.array([scheduler.next(q) for q in range(Q)], dtype=np.int64)
        available = np.array(scheduler.outputs, dtype=bool)

        admissible = np.broadcast_to(
            available[None, :, None] | (np.arange(n_inputs) == zero_index)[None, None, :],
            (n_states, Q, n_inputs),
        )
        lifted = transitions[:, None, :] * Q + next_mode[None, :, None]
        succ = np.where(admissible & (transitions[:, None, :] != BLOCKED), lifted, -1)
        return cls(
            succ=succ.reshape(n_states * Q, n_inputs),
            admissible=np.ascontiguousarray(admissible).reshape(n_states * Q, n_inputs),
            n_modes=Q,
            zero_index=zero_index,
            state_points=np.asarray(state_points, dtype=float),
            input_values=np.asarray(input_values, dtype=float),
        )

    def lift(self, mask: np.ndarray) -> np.ndarray:
        """抽象状态上的掩码提升到乘积状态"""
        return np.repeat(np.asarray(mask, dtype=bool), self.n_modes)


def build_arena(
    abstraction: SymbolicAbstraction,
    scheduler: SchedulerAutomaton,
    zero_input_index: Optional[int] = None,
) -> GameArena:
    """
    组合有限抽象与调度自动机

    可用时隙允许所有格点输入，不可用时隙只允许零输入；((s,q), u) → (s', next(q))
    当且仅当抽象中 s →ᵘ s' 且 u 在 q 处可用。

    Raises:
        InvalidSetError: 输入网格中没有零输入
    """
    zero = abstraction.zero_input_index() if zero_input_index is None else zero_input_index
    arena = GameArena.from_transitions(
        abstraction.transitions,
        scheduler,
        zero,
        abstraction.state_grid.points,
        abstraction.input_grid.points,
    )
    logger.info(
        f"乘积博弈: {arena.n_product} 个乘积状态 (调度模式 {scheduler.pattern})，{arena.n_inputs} 个输入"
    )
    return arena


def _good_moves(arena: GameArena, rows: np.ndarray, inside: np.ndarray) -> np.ndarray:
    """rows 中每个状态的各输入是否落入 inside"""
    succ = arena.succ[rows]
    return (succ >= 0) & inside[np.maximum(succ, 0)]


def solve_invariance(arena: GameArena, safe: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    最大受控不变集 νZ.{p ∈ safe : ∃u, succ(p,u) ∈ Z}

    Returns:
        (获胜集掩码, 策略)；策略为编号最小的见证输入，获胜集外为 -1
    """
    winning = np.asarray(safe, dtype=bool).copy()
    iteration = 0
    while True:
        rows = np.flatnonzero(winning)
        keep = _good_moves(arena, rows, winning).any(axis=1)
        iteration += 1
        if keep.all():
            break
        winning[rows[~keep]] = False
    strategy = np.full(arena.n_product, -1, dtype=np.int64)
    rows = np.flatnonzero(winning)
    if len(rows):
        strategy[rows] = np.argmax(_good_moves(arena, rows, winning), axis=1)
    logger.debug(f"不变集不动点 {iteration} 次迭代收敛，获胜集大小 {len(rows)}")
    return winning, strategy


def _robust_moves(
    arena: GameArena, cells: CellSuccessors, rows: np.ndarray, inside: np.ndarray
) -> np.ndarray:
    """rows 中每个状态的各输入: 抽象后继与单元的全部后继格点都落入 inside"""
    good = _good_moves(arena, rows, inside)
    position = cells.rows_of(rows // arena.n_modes, arena.n_states)
    known = position >= 0
    good[~known] = False
    successors = cells.successors[position[known]]
    next_mode = np.maximum(arena.succ[rows[known]], 0) % arena.n_modes
    lifted = np.maximum(successors, 0) * arena.n_modes + next_mode[:, :, None]
    covered = (successors[:, :, 0] != BLOCKED) & inside[lifted].all(axis=-1)
    good[known] &= covered
    return good


def solve_robust_invariance(
    arena: GameArena, safe: np.ndarray, cells: CellSuccessors
) -> Tuple[np.ndarray, np.ndarray]:
    """
    鲁棒受控不变集 νZ.{p ∈ safe : ∃u, 单元后继 cell(p,u) ⊆ Z}

    具体状态量化到 p 时，其真实后继的量化值落在 cell(p,u) 中，因此回放一旦进入 Z 就不再离开。
    cells 未覆盖的状态视为不安全。

    Returns:
        (获胜集掩码, 策略)；策略为编号最小的见证输入，获胜集外为 -1
    """
    winning = np.asarray(safe, dtype=bool).copy()
    winning &= arena.lift(np.isin(np.arange(arena.n_states), cells.states))
    iteration = 0
    while True:
        rows = np.flatnonzero(winning)
        keep = _robust_moves(arena, cells, rows, winning).any(axis=1)
        iteration += 1
        if keep.all():
            break
        winning[rows[~keep]] = False
    strategy = np.full(arena.n_product, -1, dtype=np.int64)
    rows = np.flatnonzero(winning)
    if len(rows):
        strategy[rows] = np.argmax(_robust_moves(arena, cells, rows, winning), axis=1)
    logger.debug(f"鲁棒不变集不动点 {iteration} 次迭代收敛，获胜集大小 {len(rows)}")
    return winning, strategy


def stay_cells(
    field: VectorField,
    abstraction: SymbolicAbstraction,
    region: RegionSpec,
    step: Optional[float] = None,
) -> CellSuccessors:
    """W∖障碍物 内格点单元的后继集合，供鲁棒停留核心使用"""
    points = abstraction.state_grid.points
    states = np.flatnonzero(region.in_target(points) & ~region.in_obstacle(points))
    return cell_successors(field, abstraction, states, step)


@dataclass(frozen=True, eq=False)
class ControllerTable:
    """
    控制器表，按乘积状态编号

    inputs[p] 为选定输入编号，depth[p] 为 BFS 深度 (不变核心为 0)，获胜集外均为 -1。
    """

    inputs: np.ndarray
    depth: np.ndarray
    invariant: np.ndarray
    n_modes: int
    input_values: np.ndarray

    @property
    def winning(self) -> np.ndarray:
        return self.depth >= 0

    def lookup(self, state: int, mode: int) -> int:
        return int(self.inputs[state * self.n_modes + mode])

    def is_winning(self, state: int, mode: int) -> bool:
        return bool(self.depth[state * self.n_modes + mode] >= 0)

    def to_frame(self) -> pd.DataFrame:
        """表格形式 (列: state_index, automaton_state, input_index, input_value, bfs_depth)"""
        rows = np.flatnonzero(self.winning)
        chosen = self.inputs[rows]
        values = self.input_values[chosen]
        if values.shape[1] == 1:
            value_column = values[:, 0]
        else:
            value_column = [";".join(repr(float(v)) for v in row) for row in values]
        return pd.DataFrame(
            {
                "state_index": rows // self.n_modes,
                "automaton_state": rows % self.n_modes,
                "input_index": chosen,
                "input_value": value_column,
                "bfs_depth": self.depth[rows],
            },
            columns=CONTROLLER_COLUMNS,
        )

    @classmethod
    def from_frame(
        cls, frame: pd.DataFrame, n_states: int, n_modes: int, input_values: np.ndarray
    ) -> "ControllerTable":
        missing = set(CONTROLLER_COLUMNS) - set(frame.columns)
        if missing:
            raise DimensionMismatchError(f"控制器表缺少列: {sorted(missing)}")
        p = frame["state_index"].to_numpy(dtype=np.int64) * n_modes + frame[
            "automaton_state"
        ].to_numpy(dtype=np.int64)
        if len(p) and (p.min() < 0 or p.max() >= n_states * n_modes):
            raise DimensionMismatchError("控制器表中的状态编号超出抽象范围")
        inputs = np.full(n_states * n_modes, -1, dtype=np.int64)
        depth = np.full(n_states * n_modes, -1, dtype=np.int64)
        inputs[p] = frame["input_index"].to_numpy(dtype=np.int64)
        depth[p] = frame["bfs_depth"].to_numpy(dtype=np.int64)
        return cls(
            inputs=inputs,
            depth=depth,
            invariant=depth == 0,
            n_modes=n_modes,
            input_values=np.asarray(input_values, dtype=float),
        )


def solve_reach_avoid_stay(
    arena: GameArena, region: RegionSpec, cells: Optional[CellSuccessors] = None
) -> ControllerTable:
    """
    两阶段不动点求解到达-避障-停留

    (1) I = W∖障碍物 内的最大受控不变集；给出 cells 时改用鲁棒不变集，
        量化回放进入 I 后保证留在 W 内；
    (2) R = μY.(I ∪ {p ∉ 障碍物 : ∃u, succ(p,u) ∈ Y})，按 BFS 层推进，
        新发现状态选编号最小的进入上一层的输入 (即 BFS 深度最小)。
    I 内使用不变策略，其余获胜状态使用到达策略。
    """
    target = region.in_target(arena.state_points)
    obstacle = region.in_obstacle(arena.state_points)
    allowed = arena.lift(~obstacle)
    safe = arena.lift(target & ~obstacle)
    if cells is None:
        core, core_strategy = solve_invariance(arena, safe)
    else:
        core, core_strategy = solve_robust_invariance(arena, safe, cells)

    inputs = np.where(core, core_strategy, -1)
    depth = np.where(core, 0, -1).astype(np.int64)
    reached = core.copy()
    layer = 0
    while True:
        candidates = np.flatnonzero(allowed & ~reached)
        if len(candidates) == 0:
            break
        good = _good_moves(arena, candidates, reached)
        found = good.any(axis=1)
        if not found.any():
            break
        layer += 1
        rows = candidates[found]
        inputs[rows] = np.argmax(good[found], axis=1)
        depth[rows] = layer
        reached[rows] = True
        logger.debug(f"BFS 第 {layer} 层新增 {len(rows)} 个状态")

    logger.info(
        f"综合完成: 不变核心 {int(core.sum())} 个乘积状态，获胜集 {int(reached.sum())} 个，"
        f"最大 BFS 深度 {layer}"
    )
    return ControllerTable(
        inputs=inputs.astype(np.int64),
        depth=depth,
        invariant=core,
        n_modes=arena.n_modes,
        input_values=arena.input_values,
    )


def verify_controller(arena: GameArena, table: ControllerTable) -> List[str]:
    """
    穷举检查控制器: 输入可用、转移有定义、后继仍在获胜集、不变核心闭合、核心外 BFS 深度严格下降

    Returns:
        问题描述列表 (空表示通过)
    """
    problems: List[str] = []
    rows = np.flatnonzero(table.winning)
    chosen = table.inputs[rows]
    if np.any(chosen < 0) or np.any(chosen >= arena.n_inputs):
        problems.append("获胜状态缺少有效输入")
        return problems
    admissible = arena.admissible[rows, chosen]
    succ = arena.succ[rows, chosen]
    for label, bad in (
        ("输入不可用", ~admissible),
        ("转移未定义", succ < 0),
    ):
        if bad.any():
            problems.append(f"{label}: 乘积状态 {rows[bad][:10].tolist()}")
    defined = succ >= 0
    rows, succ = rows[defined], succ[defined]
    leaving = ~table.winning[succ]
    if leaving.any():
        problems.append(f"后继离开获胜集: 乘积状态 {rows[leaving][:10].tolist()}")
    core = table.invariant[rows]
    escaping = core & ~table.invariant[succ]
    if escaping.any():
        problems.append(f"后继离开不变核心: 乘积状态 {rows[escaping][:10].tolist()}")
    no_progress = ~core & (table.depth[succ] >= table.depth[rows])
    if no_progress.any():
        problems.append(f"BFS 深度未下降: 乘积状态 {rows[no_progress][:10].tolist()}")
    for problem in problems:
        logger.warning(f"控制器检查: {problem}")
    return problems


def closed_loop_replay(
    field: VectorField,
    table: ControllerTable,
    abstraction: SymbolicAbstraction,
    scheduler: SchedulerAutomaton,
    region: RegionSpec,
    x0: Sequence[float],
    n_slots: int,
    step: float = DEFAULT_STEP,
) -> Tuple[ReplayReport, pd.DataFrame, Trajectory]:
    """
    闭环回放

    每个采样时刻把具体状态量化到最近格点，查表得到输入 (不可用时隙强制为零)，
    在 τ 内保持常值输入积分。量化后的乘积状态首次落入不变核心的时隙记为进入时刻，
    此后量化状态须一直留在 W 内。离开 D、离开获胜集、碰到障碍物、未进入或未停留都判为失败。

    Returns:
        (回放报告, 时隙日志 (列: t, x1.., u, slot), 细粒度轨迹)
    """
    grid = abstraction.state_grid
    zero = abstraction.zero_input_index()
    tau = abstraction.tau
    input_values = abstraction.input_grid.points
    x = np.asarray(x0, dtype=float).copy()
    q = scheduler.initial

    records = []
    times: List[np.ndarray] = [np.array([0.0])]
    states: List[np.ndarray] = [x[None, :]]
    failure_step: Optional[int] = None
    failure_reason: Optional[str] = None
    entered: Optional[int] = None
    stayed = True
    max_distance = 0.0
    hit_obstacle = False
    compliant = True

    for k in range(n_slots + 1):
        t = k * tau
        if region.in_obstacle(x):
            hit_obstacle = True
        if entered is not None:
            max_distance = max(max_distance, float(region.target_distance(x)))
        if not abstraction.spec.domain.contains(x):
            failure_step, failure_reason = k, "状态离开定义域"
            break
        s = int(grid.snap(x))
        if entered is None and table.invariant[s * table.n_modes + q]:
            entered = k
        if entered is not None and not region.in_target(grid.point(s)):
            stayed = False
        if k == n_slots:
            break
        if not table.is_winning(s, q):
            failure_step, failure_reason = k, "状态离开获胜集"
            break

        index = table.lookup(s, q)
        if not scheduler.available(q):
            if index != zero:
                compliant = False
            index = zero
        u = input_values[index]
        record = {"t": t, **{f"x{i + 1}": float(v) for i, v in enumerate(x)}}
        record["u"] = float(u[0]) if len(u) == 1 else ";".join(repr(float(v)) for v in u)
        record["slot"] = scheduler.slot(q)
        records.append(record)

        try:
            segment = integrate(field, x, InputSignal.constant(u), tau, step)
        except DivergenceError as e:
            failure_step, failure_reason = k, f"积分发散 (t={t + e.time:.6g})"
            break
        times.append(segment.times[1:] + t)
        states.append(segment.states[1:])
        x = segment.final_state.copy()
        q = scheduler.next(q)

    stayed = stayed and entered is not None
    if failure_step is None:
        if hit_obstacle:
            failure_reason = "轨迹碰到障碍物"
        elif entered is None:
            failure_reason = "未进入不变核心"
        elif not stayed:
            failure_reason = "进入后离开目标集"
    success = failure_step is None and failure_reason is None
    report = ReplayReport(
        success=success,
        n_slots=len(records),
        failure_step=failure_step,
        failure_reason=failure_reason,
        entered_target_step=entered,
        stayed_in_target=stayed,
        max_target_distance=max_distance,
        hit_obstacle=hit_obstacle,
        scheduler_compliant=compliant,
    )
    if success:
        logger.info(f"回放完成: 第 {entered} 个时隙进入目标集，停留 {stayed}")
    else:
        where = "" if failure_step is None else f"第 {failure_step} 个时隙"
        logger.warning(f"回放失败: {where}{failure_reason}")
    columns = ["t"] + [f"x{i + 1}" for i in range(field.state_dim)] + ["u", "slot"]
    log = pd.DataFrame(records, columns=columns)
    trajectory = Trajectory(times=np.concatenate(times), states=np.concatenate(states))
    return report, log, trajectory
