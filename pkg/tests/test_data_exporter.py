"""数据导出模块测试"""

import json

import numpy as np
import pandas as pd
import pytest
import yaml

from src.config import Config
from src.data_exporter import (
    ArtifactExporter,
    JSONReportExporter,
    PhasePlot,
    SVGPhasePlotExporter,
    TrajectoryCSVExporter,
    point_label,
)
from src.data_models import Box, VerificationReport
from src.dynamics import Trajectory


@pytest.fixture
def exporter(tmp_path):
    """输出目录指向临时目录的导出管理器"""
    config_path = tmp_path / "config.yaml"
    config_path.write_text(
        yaml.dump({"output": {"output_dir": str(tmp_path / "out")}}), encoding="utf-8"
    )
    return ArtifactExporter(Config(str(config_path)))


class TestCSVExport:
    """CSV 导出测试"""

    def test_trajectory_round_trip(self, tmp_path):
        """测试轨迹 CSV 浮点数精确往返"""
        trajectory = Trajectory(
            times=np.array([0.0, 0.1]), states=np.array([[0.1, 1.0 / 3.0], [2e-17, -0.7]])
        )
        path = TrajectoryCSVExporter().export(trajectory, str(tmp_path / "t.csv"))
        frame = pd.read_csv(path)
        assert list(frame.columns) == ["t", "x1", "x2"]
        assert frame["x2"].iloc[0] == 1.0 / 3.0
        assert frame["x1"].iloc[1] == 2e-17

    def test_identical_bytes(self, tmp_path):
        """测试重复导出逐字节相同"""
        trajectory = Trajectory(times=np.array([0.0]), states=np.array([[0.8, 0.9]]))
        first = TrajectoryCSVExporter().export(trajectory, str(tmp_path / "a.csv"))
        second = TrajectoryCSVExporter().export(trajectory, str(tmp_path / "b.csv"))
        assert open(first, "rb").read() == open(second, "rb").read()


class TestJSONExport:
    """JSON 导出测试"""

    def test_pydantic_report(self, tmp_path):
        """测试 pydantic 报告按别名导出"""
        report = VerificationReport(passed=True, n_samples=4, max_violation=-1.0)
        path = JSONReportExporter().export(report, str(tmp_path / "r.json"))
        data = json.loads(open(path, encoding="utf-8").read())
        assert data["pass"] is True
        assert data["n_samples"] == 4

    def test_numpy_values(self, tmp_path):
        """测试 numpy 数组与标量"""
        payload = {"matrix": np.eye(2), "count": np.int64(3)}
        path = JSONReportExporter().export(payload, str(tmp_path / "n.json"))
        data = json.loads(open(path, encoding="utf-8").read())
        assert data == {"count": 3, "matrix": [[1.0, 0.0], [0.0, 1.0]]}

    def test_unsupported_type(self, tmp_path):
        """测试无法序列化的类型"""
        with pytest.raises(TypeError):
            JSONReportExporter().export({"value": object()}, str(tmp_path / "x.json"))


class TestPhasePlot:
    """SVG 相图测试"""

    def test_render(self):
        """测试相图包含盒子与轨迹"""
        plot = PhasePlot(
            domain=Box.cube(1.0, 2),
            trajectories=[np.array([[0.8, 0.9], [0.0, 0.0]])],
            target=Box.cube(0.05, 2),
            obstacles=[Box(lo=[0.2, 0.2], hi=[0.4, 0.4])],
            title="replay",
        )
        svg = SVGPhasePlotExporter(size=100, margin=10).render(plot)
        assert svg.startswith("<svg")
        assert svg.count("<rect") == 4
        assert svg.count("<polyline") == 1
        # 原点映射到画布中心
        assert "50.00,50.00" in svg
        assert "replay" in svg

    def test_one_dimensional_rejected(self):
        """测试一维状态无法画相图"""
        with pytest.raises(ValueError):
            SVGPhasePlotExporter().render(PhasePlot(domain=Box.cube(1.0, 1)))


class TestArtifactExporter:
    """产物导出管理器测试"""

    def test_fixed_names(self, exporter, tmp_path):
        """测试文件名固定"""
        out = tmp_path / "out"
        assert exporter.abstraction_path == str(out / "abstraction.bin")
        assert exporter.controller_path == str(out / "controller.csv")
        trajectory = Trajectory(times=np.array([0.0]), states=np.array([[0.8, 0.9]]))
        path = exporter.export_trajectory(trajectory, point_label([0.8, 0.9]))
        assert path == str(out / "trajectory_0.8_0.9.csv")

    def test_point_label(self):
        """测试初始状态标签"""
        assert point_label([0.8, -0.9]) == "0.8_-0.9"
        assert point_label(np.array([1.0, 0.0])) == "1_0"
