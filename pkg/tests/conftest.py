"""pytest配置文件"""

import sys
from pathlib import Path

# 添加项目根目录到Python路径 (测试以 src.<module> 导入)
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

import numpy as np
import pytest

from src.abstraction import GridSpec, compute_transitions
from src.data_models import Box
from src.synthesis import (
    RegionSpec,
    SchedulerAutomaton,
    build_arena,
    solve_reach_avoid_stay,
    stay_cells,
)
from src.systems import saturation_cascade

# 测试用的粗网格 (完整精度 η = 0.009 的构建标记为 slow)
TEST_ETA = 0.02
TEST_STEP = 0.005


@pytest.fixture
def sample_config_dict():
    """示例配置字典 (粗网格、少量样本)"""
    return {
        "system": {"name": "saturation-cascade", "gain": [16.0]},
        "simulation": {"x0": [[0.8, 0.9]], "horizon": 0.5, "step": 0.001},
        "verification": {
            "n_samples": 2000,
            "contraction_samples": 1000,
            "pair_samples": 200,
            "bound_horizon": 1.0,
        },
        "abstraction": {
            "domain": {"lo": [-1.0, -1.0], "hi": [1.0, 1.0]},
            "eta": TEST_ETA,
            "inputs": {"lo": [-10.0], "hi": [10.0]},
            "mu": 0.5,
            "tau": 0.1,
            "step": TEST_STEP,
            "epsilon": 0.1,
            "epsilon_runs": 50,
            "epsilon_run_length": 20,
        },
        "synthesis": {
            "target": {"lo": [-0.05, -0.05], "hi": [0.05, 0.05]},
            "obstacles": [
                {"lo": [0.2, 0.2], "hi": [0.4, 0.4]},
                {"lo": [-0.4, -0.4], "hi": [-0.2, -0.2]},
            ],
            "scheduler": "auu",
            "initial_mode": 1,
            "replay_slots": 200,
            "replay_step": TEST_STEP,
            "initial_conditions": [[0.8, 0.9], [-0.8, -0.9]],
        },
        "output": {"output_dir": "output"},
        "logging": {"level": "INFO", "log_dir": None},
        "runtime": {"threads": 1, "seed": 0},
    }


@pytest.fixture(scope="session")
def saturation_setup():
    """饱和级联系统 (登记的增益与证书)"""
    return saturation_cascade()


@pytest.fixture(scope="session")
def saturation_closed_loop(saturation_setup):
    """饱和级联系统闭环向量场 (外部输入 ῡ)"""
    return saturation_setup.closed_loop()


@pytest.fixture(scope="session")
def grid_spec():
    """测试用量化参数"""
    return GridSpec(
        domain=Box.cube(1.0, 2), eta=TEST_ETA, inputs=Box.cube(10.0, 1), mu=0.5, tau=0.1
    )


@pytest.fixture(scope="session")
def saturation_abstraction(saturation_closed_loop, grid_spec):
    """饱和级联闭环的有限抽象 (粗网格)"""
    return compute_transitions(saturation_closed_loop, grid_spec, step=TEST_STEP, threads=2)


@pytest.fixture(scope="session")
def auu_scheduler():
    """|auu| 调度，从第二个时隙开始"""
    return SchedulerAutomaton.from_pattern("auu", initial=1)


@pytest.fixture(scope="session")
def region():
    """目标集 W = [−0.05, 0.05]² 与两个示意障碍物"""
    return RegionSpec(
        target=Box.cube(0.05, 2),
        obstacles=[Box(lo=[0.2, 0.2], hi=[0.4, 0.4]), Box(lo=[-0.4, -0.4], hi=[-0.2, -0.2])],
        domain=Box.cube(1.0, 2),
    )


@pytest.fixture(scope="session")
def saturation_arena(saturation_abstraction, auu_scheduler):
    """抽象与 auu 调度的乘积博弈"""
    return build_arena(saturation_abstraction, auu_scheduler)


@pytest.fixture(scope="session")
def saturation_cells(saturation_closed_loop, saturation_abstraction, region):
    """目标集内格点单元的后继集合"""
    return stay_cells(saturation_closed_loop, saturation_abstraction, region, TEST_STEP)


@pytest.fixture(scope="session")
def saturation_controller(saturation_arena, region, saturation_cells):
    """到达-避障-停留控制器 (鲁棒停留核心)"""
    return solve_reach_avoid_stay(saturation_arena, region, saturation_cells)


@pytest.fixture
def rng():
    """固定种子的随机数生成器"""
    return np.random.default_rng(0)
