"""符号抽象模块测试"""

import json

import numpy as np
import pytest

from src.abstraction import (
    BLOCKED,
    FILE_MAGIC,
    Grid,
    GridSpec,
    SymbolicAbstraction,
    build_grid,
    cell_successors,
    check_epsilon,
    compute_transitions,
    load_abstraction,
    save_abstraction,
)
from src.data_models import Box
from src.dynamics import VectorField
from src.exceptions import CorruptFileError, DimensionMismatchError, InvalidSetError
from tests.conftest import TEST_STEP


def _scalar_field(func) -> VectorField:
    return VectorField(state_dim=1, input_dim=1, func=func)


def _scalar_abstraction(field: VectorField, eta: float = 0.1) -> SymbolicAbstraction:
    """D = [−1, 1]、输入只有 0、τ = 0.1 的一维抽象"""
    spec = GridSpec(
        domain=Box.cube(1.0, 1), eta=eta, inputs=Box(lo=[0.0], hi=[0.0]), mu=1.0, tau=0.1
    )
    return compute_transitions(field, spec, step=TEST_STEP)


DECAY = _scalar_field(lambda x, u: -16.0 * x + 0.0 * u)


@pytest.fixture(scope="module")
def small_spec():
    """9×9 状态、5 个输入的小网格"""
    return GridSpec(domain=Box.cube(1.0, 2), eta=0.25, inputs=Box.cube(1.0, 1), mu=0.5, tau=0.1)


@pytest.fixture(scope="module")
def small_abstraction(saturation_closed_loop, small_spec):
    """小网格上的抽象"""
    return compute_transitions(saturation_closed_loop, small_spec, step=TEST_STEP)


class TestGrid:
    """量化网格测试"""

    def test_points_and_size(self):
        """测试格点枚举"""
        grid = Grid.from_box(Box.cube(1.0, 1), 0.5)
        assert grid.size == 5
        np.testing.assert_allclose(grid.points[:, 0], [-1.0, -0.5, 0.0, 0.5, 1.0])

    def test_row_major_order(self):
        """测试最后一轴变化最快"""
        grid = Grid.from_box(Box.cube(1.0, 2), 0.5)
        assert grid.shape == (5, 5)
        np.testing.assert_allclose(grid.point(1), [-1.0, -0.5])
        np.testing.assert_allclose(grid.point(5), [-0.5, -1.0])
        np.testing.assert_allclose(grid.points[7], grid.point(7))

    def test_lattice_not_aligned_with_box(self):
        """测试格点为 η 的整数倍而非从 lo 起算"""
        grid = Grid.from_box(Box(lo=[-0.3], hi=[0.8]), 0.5)
        np.testing.assert_allclose(grid.points[:, 0], [0.0, 0.5])

    def test_snap_rounds_half_away_from_zero(self):
        """测试中点远离零取整"""
        grid = Grid.from_box(Box.cube(1.0, 1), 0.5)
        assert int(grid.snap([0.25])) == 3
        assert int(grid.snap([-0.25])) == 1
        assert int(grid.snap([0.2])) == 2

    def test_snap_clips_to_grid(self):
        """测试超出范围时截断到边界格点"""
        grid = Grid.from_box(Box.cube(1.0, 1), 0.5)
        assert int(grid.snap([5.0])) == 4
        assert int(grid.snap([-5.0])) == 0

    def test_index_of(self):
        """测试格点编号查找"""
        grid = Grid.from_box(Box.cube(1.0, 2), 0.5)
        assert grid.index_of([[0.5, -1.0], [0.3, 0.0]]).tolist() == [15, -1]

    def test_empty_grid(self):
        """测试盒子内没有格点"""
        with pytest.raises(InvalidSetError):
            Grid.from_box(Box(lo=[0.1], hi=[0.2]), 0.5)

    def test_invalid_quantum(self):
        """测试量化精度非正"""
        with pytest.raises(ValueError):
            Grid.from_box(Box.cube(1.0, 1), 0.0)

    def test_build_grid(self, grid_spec):
        """测试测试网格规模: 101² 个状态，41 个输入"""
        states, inputs = build_grid(grid_spec)
        assert states.size == 101**2
        assert inputs.size == 41


class TestTransitions:
    """转移计算测试"""

    def test_shape_and_origin(self, saturation_abstraction):
        """测试转移表形状，原点在零输入下是不动点"""
        abstraction = saturation_abstraction
        assert abstraction.transitions.shape == (101**2, 41)
        origin = int(abstraction.state_grid.index_of(np.zeros(2)))
        zero = abstraction.zero_input_index()
        assert zero == 20
        assert abstraction.successor(origin, zero) == origin

    def test_blocked_transitions(self, saturation_abstraction):
        """测试离开定义域的转移记为 BLOCKED 并计数"""
        abstraction = saturation_abstraction
        blocked = int((abstraction.transitions == BLOCKED).sum())
        assert blocked > 0
        assert abstraction.report.blocked_count == blocked
        corner = int(abstraction.state_grid.index_of([1.0, 1.0]))
        assert abstraction.successor(corner, abstraction.n_inputs - 1) == BLOCKED
        valid = abstraction.transitions[abstraction.transitions != BLOCKED]
        assert valid.min() >= 0 and valid.max() < abstraction.n_states

    def test_thread_count_does_not_change_table(self, saturation_closed_loop, small_spec):
        """测试转移表与线程数无关"""
        single = compute_transitions(saturation_closed_loop, small_spec, step=TEST_STEP, threads=1)
        multi = compute_transitions(saturation_closed_loop, small_spec, step=TEST_STEP, threads=3)
        np.testing.assert_array_equal(single.transitions, multi.transitions)

    def test_scalar_decay_successor(self):
        """测试 ẋ = −16x 从 x = 1 出发的后继为 e^{−1.6} ≈ 0.202 的最近格点 0.2"""
        abstraction = _scalar_abstraction(DECAY)
        grid = abstraction.state_grid
        one = int(grid.index_of([1.0]))
        np.testing.assert_allclose(grid.point(abstraction.successor(one, 0)), [0.2])

    def test_constant_drift_blocked(self):
        """测试 ẋ = 5 从 x = 0.9 出发的终点 1.4 离开定义域，记为 BLOCKED"""
        abstraction = _scalar_abstraction(_scalar_field(lambda x, u: 5.0 + 0.0 * x))
        start = int(abstraction.state_grid.index_of([0.9]))
        assert abstraction.successor(start, 0) == BLOCKED
        assert abstraction.report.blocked_count > 0
        assert abstraction.report.divergence_count == 0

    def test_dimension_mismatch(self, saturation_closed_loop):
        """测试网格维数与向量场不一致"""
        spec = GridSpec(domain=Box.cube(1.0, 3), eta=0.5, inputs=Box.cube(1.0, 1), mu=0.5, tau=0.1)
        with pytest.raises(DimensionMismatchError):
            compute_transitions(saturation_closed_loop, spec)

    def test_no_zero_input(self, saturation_closed_loop):
        """测试输入网格不含零时报错"""
        spec = GridSpec(
            domain=Box.cube(1.0, 2), eta=0.5, inputs=Box(lo=[0.5], hi=[1.0]), mu=0.5, tau=0.1
        )
        abstraction = compute_transitions(saturation_closed_loop, spec, step=TEST_STEP)
        with pytest.raises(InvalidSetError):
            abstraction.zero_input_index()


class TestEpsilon:
    """抽象精度检验测试"""

    def test_deviation_bounded(self, saturation_closed_loop, saturation_abstraction):
        """测试具体轨迹与抽象轨迹的偏差有界"""
        report = check_epsilon(
            saturation_closed_loop,
            saturation_abstraction,
            epsilon=0.2,
            n_runs=50,
            run_length=20,
            step=TEST_STEP,
        )
        assert report.passed
        assert 0.0 < report.max_deviation <= 0.2
        assert report.n_runs == 50

    def test_too_small_epsilon(self, saturation_closed_loop, saturation_abstraction):
        """测试 ε 小于单步量化误差时失败"""
        report = check_epsilon(
            saturation_closed_loop,
            saturation_abstraction,
            epsilon=1e-6,
            n_runs=20,
            run_length=5,
            step=TEST_STEP,
        )
        assert not report.passed
        assert report.worst_run >= 0

    def test_geometric_series_bound(self):
        """测试 ẋ = −16x 的累积偏差不超过 (η/2)/(1 − e^{−1.6}) ≈ 0.063"""
        bound = 0.05 / (1.0 - np.exp(-1.6))
        report = check_epsilon(
            DECAY, _scalar_abstraction(DECAY), bound, n_runs=100, run_length=10, step=TEST_STEP
        )
        assert report.passed
        assert 0.0 < report.max_deviation <= bound
        assert report.blocked_runs == 0

    def test_refinement_reduces_deviation(self):
        """测试网格加密后经验偏差减小"""
        kwargs = dict(epsilon=1.0, n_runs=100, run_length=10, step=TEST_STEP)
        coarse = check_epsilon(DECAY, _scalar_abstraction(DECAY, 0.1), **kwargs)
        fine = check_epsilon(DECAY, _scalar_abstraction(DECAY, 0.025), **kwargs)
        assert fine.max_deviation < coarse.max_deviation

    def test_reproducible(self, saturation_closed_loop, small_abstraction):
        """测试相同种子结果一致"""
        kwargs = dict(epsilon=0.5, n_runs=20, run_length=10, seed=3, step=TEST_STEP)
        first = check_epsilon(saturation_closed_loop, small_abstraction, **kwargs)
        second = check_epsilon(saturation_closed_loop, small_abstraction, **kwargs)
        assert first == second


class TestCellSuccessors:
    """格点单元后继集合测试"""

    def test_contracting_cell(self):
        """测试 ẋ = −16x 下 x = 1 的整个单元都量化到 0.2"""
        abstraction = _scalar_abstraction(DECAY)
        one = int(abstraction.state_grid.index_of([1.0]))
        cells = cell_successors(DECAY, abstraction, [one], step=TEST_STEP)
        assert cells.successors.shape[:2] == (1, 1)
        assert set(cells.successors[0, 0].tolist()) == {abstraction.successor(one, 0)}

    def test_cell_covers_neighbors(self):
        """测试 ẋ = 0 下单元顶点恰在中点，后继覆盖两侧相邻格点"""
        still = _scalar_field(lambda x, u: 0.0 * x)
        abstraction = _scalar_abstraction(still)
        origin = int(abstraction.state_grid.index_of([0.0]))
        cells = cell_successors(still, abstraction, [origin], step=TEST_STEP)
        assert sorted(set(cells.successors[0, 0].tolist())) == [origin - 1, origin, origin + 1]

    def test_boundary_cell_blocked(self):
        """测试单元顶点离开定义域时整行为 BLOCKED"""
        still = _scalar_field(lambda x, u: 0.0 * x)
        abstraction = _scalar_abstraction(still)
        edge = int(abstraction.state_grid.index_of([1.0]))
        cells = cell_successors(still, abstraction, [edge], step=TEST_STEP)
        assert (cells.successors[0, 0] == BLOCKED).all()
        assert abstraction.successor(edge, 0) == edge

    def test_contains_abstract_successor(self, saturation_abstraction, saturation_cells):
        """测试目标集内 25 个单元的后继集合包含抽象后继"""
        cells = saturation_cells
        assert len(cells.states) == 25
        expected = saturation_abstraction.transitions[cells.states]
        valid = cells.successors[:, :, 0] != BLOCKED
        assert valid.any()
        contained = (cells.successors == expected[:, :, None]).any(axis=-1)
        assert contained[valid].all()

    def test_rows_of(self, saturation_abstraction, saturation_cells):
        """测试状态编号到行号的查找"""
        cells = saturation_cells
        rows = cells.rows_of(np.array([cells.states[3], 0]), saturation_abstraction.n_states)
        assert rows.tolist() == [3, -1]


class TestPersistence:
    """二进制存取测试"""

    def test_round_trip(self, small_abstraction, tmp_path):
        """测试写出后读回一致，元数据不含线程数"""
        path = save_abstraction(small_abstraction, str(tmp_path / "abstraction.bin"))
        loaded = load_abstraction(path, expected_spec=small_abstraction.spec)
        np.testing.assert_array_equal(loaded.transitions, small_abstraction.transitions)
        assert loaded.spec.same_as(small_abstraction.spec)
        assert loaded.report.blocked_count == small_abstraction.report.blocked_count

        metadata = json.loads((tmp_path / "abstraction.json").read_text(encoding="utf-8"))
        assert "threads" not in metadata
        assert metadata["n_states"] == 81
        assert metadata["n_inputs"] == 5

    def test_layout(self, small_abstraction, tmp_path):
        """测试文件头与长度"""
        path = save_abstraction(small_abstraction, str(tmp_path / "a.bin"))
        data = open(path, "rb").read()
        assert data[:8] == FILE_MAGIC
        assert np.frombuffer(data, dtype="<i8", count=2, offset=8).tolist() == [2, 1]
        header = 8 + 16 + 8 * (2 * 2 + 2 * 1 + 3) + 16
        assert len(data) == header + 4 * 81 * 5

    def test_bad_magic(self, tmp_path):
        """测试魔数错误"""
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOTABS01" + bytes(64))
        with pytest.raises(CorruptFileError) as info:
            load_abstraction(str(path))
        assert info.value.path == str(path)

    def test_truncated(self, small_abstraction, tmp_path):
        """测试文件截断"""
        path = save_abstraction(small_abstraction, str(tmp_path / "a.bin"))
        data = open(path, "rb").read()
        with open(path, "wb") as f:
            f.write(data[:-10])
        with pytest.raises(CorruptFileError):
            load_abstraction(path)

    def test_trailing_bytes(self, small_abstraction, tmp_path):
        """测试文件末尾有多余数据"""
        path = save_abstraction(small_abstraction, str(tmp_path / "a.bin"))
        with open(path, "ab") as f:
            f.write(b"\x00")
        with pytest.raises(CorruptFileError):
            load_abstraction(path)

    def test_spec_mismatch(self, small_abstraction, tmp_path):
        """测试量化参数与配置不一致"""
        path = save_abstraction(small_abstraction, str(tmp_path / "a.bin"))
        other = small_abstraction.spec.model_copy(update={"tau": 0.2})
        with pytest.raises(DimensionMismatchError):
            load_abstraction(path, expected_spec=other)


@pytest.mark.slow
class TestFullAbstraction:
    """完整精度 (η = 0.009) 的抽象构建"""

    def test_full_grid(self, saturation_closed_loop):
        """测试 223² 个状态、41 个输入的抽象"""
        spec = GridSpec(
            domain=Box.cube(1.0, 2), eta=0.009, inputs=Box.cube(10.0, 1), mu=0.5, tau=0.1
        )
        abstraction = compute_transitions(saturation_closed_loop, spec, step=0.001, threads=None)
        assert abstraction.n_states == 223**2
        assert abstraction.n_inputs == 41
        origin = int(abstraction.state_grid.index_of(np.zeros(2)))
        assert abstraction.successor(origin, abstraction.zero_input_index()) == origin
