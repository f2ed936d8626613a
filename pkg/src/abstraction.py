"""
符号抽象模块
在量化状态/输入网格上构造采样时间 τ 的确定性有限抽象，经验检验精度 ε，并提供二进制存取
"""

import itertools
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from .data_models import AbstractionBuildReport, Box, EpsilonReport
from .dynamics import VectorField, integrate_batch
from .exceptions import CorruptFileError, DimensionMismatchError, InvalidSetError
from .parallel import map_ranges

logger = logging.getLogger(__name__)

BLOCKED = -1
FILE_MAGIC = b"INCRABS1"
BLOCKED_U32 = 0xFFFFFFFF
# 网格端点计算时对 lo/η、hi/η 的舍入容差
LATTICE_TOL = 1e-9


class GridSpec(BaseModel):
    """量化参数: 定义域 D、状态量化 η、输入集 Ū、输入量化 μ、采样时间 τ"""

    domain: Box = Field(..., description="状态定义域 D")
    eta: float = Field(..., gt=0, description="状态量化精度")
    inputs: Box = Field(..., description="输入集 Ū")
    mu: float = Field(..., gt=0, description="输入量化精度")
    tau: float = Field(..., gt=0, description="采样时间 (秒)")

    def same_as(self, other: "GridSpec") -> bool:
        mine, theirs = self._values(), other._values()
        return len(mine) == len(theirs) and np.allclose(mine, theirs, rtol=1e-12, atol=0.0)

    def _values(self) -> np.ndarray:
        return np.concatenate(
            [
                self.domain.lower,
                self.domain.upper,
                [self.eta],
                self.inputs.lower,
                self.inputs.upper,
                [self.mu, self.tau],
            ]
        )


def _round_half_away(values: np.ndarray) -> np.ndarray:
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


@dataclass(frozen=True, eq=False)
class Grid:
    """
    格点集 {k·q : k 为整数, 点在盒子内}

    点按行优先 (最后一轴变化最快) 编号，index ↔ point 双向映射。
    """

    box: Box
    quantum: float
    k_min: np.ndarray
    k_max: np.ndarray

    @classmethod
    def from_box(cls, box: Box, quantum: float) -> "Grid":
        if quantum <= 0:
            raise ValueError(f"量化精度必须为正: {quantum}")
        k_min = np.ceil(box.lower / quantum - LATTICE_TOL).astype(np.int64)
        k_max = np.floor(box.upper / quantum + LATTICE_TOL).astype(np.int64)
        if np.any(k_max < k_min):
            raise InvalidSetError(f"盒子 lo={box.lo}, hi={box.hi} 内没有量化精度 {quantum} 的格点")
        return cls(box=box, quantum=quantum, k_min=k_min, k_max=k_max)

    @property
    def dim(self) -> int:
        return len(self.k_min)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(int(v) for v in self.k_max - self.k_min + 1)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def axes(self) -> List[np.ndarray]:
        return [np.arange(lo, hi + 1) * self.quantum for lo, hi in zip(self.k_min, self.k_max)]

    @property
    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def point(self, index) -> np.ndarray:
        k = np.stack(np.unravel_index(np.asarray(index), self.shape), axis=-1)
        return (k + self.k_min) * self.quantum

    def snap(self, values) -> np.ndarray:
        """
        最近格点的编号 (每轴四舍五入，恰在中点时远离零)

        超出格点范围的分量截断到边界格点。
        """
        return self.ravel(self.lattice(values))

    def lattice(self, values) -> np.ndarray:
        """最近格点的多重下标 (从 0 起，截断到边界)"""
        values = np.asarray(values, dtype=float)
        k = _round_half_away(values / self.quantum).astype(np.int64)
        return np.clip(k, self.k_min, self.k_max) - self.k_min

    def ravel(self, lattice: np.ndarray) -> np.ndarray:
        return np.ravel_multi_index(tuple(np.moveaxis(lattice, -1, 0)), self.shape)

    def index_of(self, values) -> np.ndarray:
        """与格点重合 (容差 1e-9·η) 的点的编号，不重合时为 -1"""
        values = np.asarray(values, dtype=float)
        index = self.snap(values)
        exact = np.all(np.abs(self.point(index) - values) <= 1e-9 * self.quantum, axis=-1)
        return np.where(exact, index, -1)


def build_grid(spec: GridSpec) -> Tuple[Grid, Grid]:
    """
    按量化参数枚举状态与输入格点

    Returns:
        (状态网格, 输入网格)

    Raises:
        InvalidSetError: 网格为空
    """
    states = Grid.from_box(spec.domain, spec.eta)
    inputs = Grid.from_box(spec.inputs, spec.mu)
    logger.info(f"网格: {states.size} 个状态 {states.shape}，{inputs.size} 个输入")
    return states, inputs


@dataclass(frozen=True, eq=False)
class SymbolicAbstraction:
    """确定性有限抽象，transitions[s, j] 为后继状态编号或 BLOCKED (-1)"""

    spec: GridSpec
    state_grid: Grid
    input_grid: Grid
    transitions: np.ndarray
    report: AbstractionBuildReport

    @property
    def n_states(self) -> int:
        return self.state_grid.size

    @property
    def n_inputs(self) -> int:
        return self.input_grid.size

    @property
    def tau(self) -> float:
        return self.spec.tau

    def successor(self, state: int, input_index: int) -> int:
        return int(self.transitions[state, input_index])

    def zero_input_index(self) -> int:
        """零输入在输入网格中的编号"""
        index = int(self.input_grid.index_of(np.zeros(self.input_grid.dim)))
        if index < 0:
            raise InvalidSetError("输入网格中没有零输入")
        return index


def compute_transitions(
    field: VectorField,
    spec: GridSpec,
    step: Optional[float] = None,
    threads: Optional[int] = 1,
) -> SymbolicAbstraction:
    """
    对每个 (格点状态, 格点输入) 在常值输入下积分 τ 秒，取最近格点为后继

    Args:
        field: 闭环向量场 (输入为 ῡ)
        spec: 量化参数
        step: 积分步长 (须整除 τ，默认 τ/100)
        threads: 线程数，按输入列划分任务

    Returns:
        有限抽象；终点离开 D 或积分发散的转移记为 BLOCKED
    """
    states, inputs = build_grid(spec)
    if field.state_dim != states.dim or field.input_dim != inputs.dim:
        raise DimensionMismatchError(
            f"向量场维数 ({field.state_dim}, {field.input_dim}) 与网格维数 "
            f"({states.dim}, {inputs.dim}) 不一致"
        )
    step = spec.tau / 100.0 if step is None else step
    points = states.points
    input_points = inputs.points

    def columns(start: int, stop: int) -> Tuple[np.ndarray, int]:
        block = np.empty((len(points), stop - start), dtype=np.int64)
        diverged = 0
        for j in range(start, stop):
            end, ok = integrate_batch(field, points, input_points[j], spec.tau, step)
            inside = ok & spec.domain.contains(np.where(ok[:, None], end, 0.0))
            successor = np.full(len(points), BLOCKED, dtype=np.int64)
            successor[inside] = states.snap(end[inside])
            block[:, j - start] = successor
            diverged += int((~ok).sum())
            logger.debug(f"输入列 {j + 1}/{len(input_points)} 完成")
        return block, diverged

    parts = map_ranges(columns, len(input_points), threads, chunk_size=1)
    transitions = np.concatenate([p[0] for p in parts], axis=1)
    report = AbstractionBuildReport(
        n_states=states.size,
        n_inputs=inputs.size,
        tau=spec.tau,
        eta=spec.eta,
        mu=spec.mu,
        blocked_count=int((transitions == BLOCKED).sum()),
        divergence_count=sum(p[1] for p in parts),
        threads=threads or 0,
    )
    logger.info(
        f"抽象构建完成: {report.n_states} 状态 × {report.n_inputs} 输入，"
        f"BLOCKED {report.blocked_count}，发散 {report.divergence_count}"
    )
    return SymbolicAbstraction(spec, states, inputs, transitions, report)


@dataclass(frozen=True, eq=False)
class CellSuccessors:
    """
    部分格点单元的后继集合

    successors[i, j] 为 states[i] 的单元在输入 j 下可能到达的格点编号，
    不足 K 个时重复首元素；任一顶点的转移 BLOCKED 时整行为 BLOCKED。
    """

    states: np.ndarray
    successors: np.ndarray

    def rows_of(self, states: np.ndarray, n_states: int) -> np.ndarray:
        """states 在本表中的行号，不在表中时为 -1"""
        position = np.full(n_states, -1, dtype=np.int64)
        position[self.states] = np.arange(len(self.states))
        return position[np.asarray(states, dtype=np.int64)]


def cell_successors(
    field: VectorField,
    abstraction: SymbolicAbstraction,
    states,
    step: Optional[float] = None,
) -> CellSuccessors:
    """
    格点单元 (以格点为中心、边长 η 的盒子) 在各常值输入下的后继格点集合

    对中心与 2^n 个顶点积分 τ 秒，取终点包围盒覆盖的全部格点。
    单元内向量场为仿射时 (RK4 映射也仿射) 覆盖单元内任一点的量化后继。
    中心的后继与 transitions 一致 (须使用构建抽象时的积分步长)。
    """
    spec = abstraction.spec
    grid = abstraction.state_grid
    step = spec.tau / 100.0 if step is None else step
    states = np.asarray(states, dtype=np.int64)
    n = grid.dim
    corners = np.array(list(itertools.product((-0.5, 0.5), repeat=n))) * spec.eta
    offsets = np.vstack([np.zeros((1, n)), corners])
    starts = (grid.point(states)[:, None, :] + offsets[None]).reshape(-1, n)
    input_points = abstraction.input_grid.points

    lo = np.zeros((len(states), len(input_points), n), dtype=np.int64)
    hi = np.zeros_like(lo)
    valid = np.zeros((len(states), len(input_points)), dtype=bool)
    for j, u in enumerate(input_points):
        end, ok = integrate_batch(field, starts, u, spec.tau, step)
        inside = ok & spec.domain.contains(np.where(ok[:, None], end, 0.0))
        k = grid.lattice(np.where(inside[:, None], end, 0.0)).reshape(len(states), -1, n)
        valid[:, j] = inside.reshape(len(states), -1).all(axis=1)
        lo[:, j], hi[:, j] = k.min(axis=1), k.max(axis=1)
    hi = np.where(valid[..., None], hi, lo)

    span = int((hi - lo).max()) + 1 if len(states) else 1
    shifts = np.array(list(itertools.product(range(span), repeat=n)), dtype=np.int64)
    cells = np.minimum(lo[:, :, None, :] + shifts, hi[:, :, None, :])
    successors = grid.ravel(cells)
    successors[~valid] = BLOCKED
    logger.info(
        f"单元后继: {len(states)} 个单元，每个 (单元, 输入) 最多 {span ** n} 个后继格点，"
        f"BLOCKED {int((~valid).sum())}"
    )
    return CellSuccessors(states=states, successors=successors)


def check_epsilon(
    field: VectorField,
    abstraction: SymbolicAbstraction,
    epsilon: float,
    n_runs: int = 200,
    run_length: int = 50,
    seed: int = 0,
    step: Optional[float] = None,
) -> EpsilonReport:
    """
    经验检验抽象精度

    随机抽取 (初始格点, 长度 run_length 的输入序列)，具体系统从格点本身出发，
    与抽象同步推进，记录采样时刻 kτ 的最大欧氏偏差。抽象转移 BLOCKED 时该次运行提前结束。
    """
    tau = abstraction.tau
    step = tau / 100.0 if step is None else step
    rng = np.random.default_rng(seed)
    points = abstraction.state_grid.points
    input_points = abstraction.input_grid.points
    current = rng.integers(abstraction.n_states, size=n_runs)
    words = rng.integers(abstraction.n_inputs, size=(n_runs, run_length))

    x = points[current].copy()
    active = np.ones(n_runs, dtype=bool)
    worst, worst_run, worst_step = 0.0, -1, -1
    for k in range(run_length):
        if not active.any():
            break
        start = np.where(active[:, None], x, 0.0)
        x_next, ok = integrate_batch(field, start, input_points[words[:, k]], tau, step)
        following = abstraction.transitions[current, words[:, k]]
        active &= following != BLOCKED
        deviation = np.where(
            active,
            np.where(
                ok, np.linalg.norm(x_next - points[np.maximum(following, 0)], axis=-1), np.inf
            ),
            -np.inf,
        )
        index = int(np.argmax(deviation))
        if deviation[index] > worst:
            worst, worst_run, worst_step = float(deviation[index]), index, k + 1
        x = x_next
        current = np.where(active, following, current)

    blocked = int((~active).sum())
    passed = worst <= epsilon
    log = logger.info if passed else logger.warning
    log(f"经验精度: 最大偏差 {worst:.6g} (ε = {epsilon})，{blocked} 次运行因 BLOCKED 提前结束")
    return EpsilonReport(
        passed=passed,
        epsilon=epsilon,
        max_deviation=worst,
        n_runs=n_runs,
        run_length=run_length,
        blocked_runs=blocked,
        worst_run=worst_run,
        worst_step=worst_step,
    )


def _spec_vector(spec: GridSpec) -> bytes:
    return spec._values().astype("<f8").tobytes()


def save_abstraction(abstraction: SymbolicAbstraction, path: str) -> str:
    """
    写出二进制抽象文件与 JSON 元数据

    布局 (小端): 魔数 INCRABS1 | int64 状态维数, 输入维数 | float64 D.lo, D.hi, η, Ū.lo, Ū.hi, μ, τ
    | int64 状态数, 输入数 | uint32 后继表 (行优先，0xFFFFFFFF 表示 BLOCKED)

    Returns:
        二进制文件路径
    """
    spec = abstraction.spec
    output = Path(path)
    output.parent.mkdir(parents=True, exist_ok=True)
    table = np.where(
        abstraction.transitions == BLOCKED, BLOCKED_U32, abstraction.transitions
    ).astype("<u4")
    with open(output, "wb") as f:
        f.write(FILE_MAGIC)
        f.write(np.array([spec.domain.dim, spec.inputs.dim], dtype="<i8").tobytes())
        f.write(_spec_vector(spec))
        f.write(np.array([abstraction.n_states, abstraction.n_inputs], dtype="<i8").tobytes())
        f.write(table.tobytes())

    metadata = abstraction.report.model_dump(exclude={"threads"})
    with open(output.with_suffix(".json"), "w", encoding="utf-8") as f:
        json.dump(metadata, f, ensure_ascii=False, indent=2)
    logger.info(f"抽象已写入: {output}")
    return str(output)


def load_abstraction(path: str, expected_spec: Optional[GridSpec] = None) -> SymbolicAbstraction:
    """
    读取二进制抽象文件

    Raises:
        CorruptFileError: 魔数错误、文件截断或计数与网格不符
        DimensionMismatchError: 文件中的量化参数与 expected_spec 不一致
    """
    data = Path(path).read_bytes()
    if data[: len(FILE_MAGIC)] != FILE_MAGIC:
        raise CorruptFileError(path, "魔数不匹配")
    offset = len(FILE_MAGIC)

    def take(dtype: str, count: int) -> np.ndarray:
        nonlocal offset
        size = np.dtype(dtype).itemsize * count
        if offset + size > len(data):
            raise CorruptFileError(path, "文件被截断")
        chunk = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
        offset += size
        return chunk

    n, m = (int(v) for v in take("<i8", 2))
    if n <= 0 or m <= 0:
        raise CorruptFileError(path, f"维数无效 ({n}, {m})")
    values = take("<f8", 2 * n + 2 * m + 3)
    spec = GridSpec(
        domain=Box(lo=values[:n].tolist(), hi=values[n : 2 * n].tolist()),
        eta=float(values[2 * n]),
        inputs=Box(
            lo=values[2 * n + 1 : 2 * n + 1 + m].tolist(),
            hi=values[2 * n + 1 + m : 2 * n + 1 + 2 * m].tolist(),
        ),
        mu=float(values[2 * n + 1 + 2 * m]),
        tau=float(values[2 * n + 2 + 2 * m]),
    )
    if expected_spec is not None and not expected_spec.same_as(spec):
        raise DimensionMismatchError(f"抽象文件 {path} 的量化参数与当前配置不一致")

    n_states, n_inputs = (int(v) for v in take("<i8", 2))
    states, inputs = build_grid(spec)
    if (n_states, n_inputs) != (states.size, inputs.size):
        raise CorruptFileError(path, f"计数 ({n_states}, {n_inputs}) 与网格不符")
    raw = take("<u4", n_states * n_inputs).reshape(n_states, n_inputs)
    if offset != len(data):
        raise CorruptFileError(path, "文件末尾有多余数据")
    transitions = np.where(raw == BLOCKED_U32, BLOCKED, raw.astype(np.int64))
    if np.any(transitions >= n_states):
        raise CorruptFileError(path, "后继编号越界")

    divergence = 0
    sidecar = Path(path).with_suffix(".json")
    if sidecar.exists():
        metadata = json.loads(sidecar.read_text(encoding="utf-8"))
        divergence = int(metadata.get("divergence_count", 0))
    report = AbstractionBuildReport(
        n_states=n_states,
        n_inputs=n_inputs,
        tau=spec.tau,
        eta=spec.eta,
        mu=spec.mu,
        blocked_count=int((transitions == BLOCKED).sum()),
        divergence_count=divergence,
    )
    logger.info(f"已读取抽象: {path} ({n_states} 状态 × {n_inputs} 输入)")
    return SymbolicAbstraction(spec, states, inputs, transitions, report)
