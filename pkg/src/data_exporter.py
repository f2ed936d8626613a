"""
数据导出模块
支持导出轨迹/控制器/回放日志 CSV、JSON 报告与 SVG 相图
"""

import json
import logging
import os
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel

from .config import Config
from .data_models import Box
from .dynamics import Trajectory
from .synthesis import ControllerTable

logger = logging.getLogger(__name__)

# 保证浮点数往返精确
FLOAT_FORMAT = "%.17g"


class DataExporter(ABC):
    """数据导出器抽象基类"""

    @abstractmethod
    def export(self, obj: Any, output_path: str) -> str:
        """
        导出数据

        Args:
            obj: 待导出对象
            output_path: 输出文件路径

        Returns:
            实际生成的文件路径
        """
        pass


def _write_frame(frame: pd.DataFrame, output_path: str) -> str:
    Path(output_path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(output_path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return output_path


class TrajectoryCSVExporter(DataExporter):
    """轨迹 CSV 导出器 (列: t, x1..xn)"""

    def export(self, obj: Trajectory, output_path: str) -> str:
        _write_frame(obj.to_frame(), output_path)
        logger.info(f"成功导出 {len(obj.times)} 个轨迹点到CSV文件: {output_path}")
        return output_path


class ControllerCSVExporter(DataExporter):
    """控制器表 CSV 导出器"""

    def export(self, obj: ControllerTable, output_path: str) -> str:
        frame = obj.to_frame()
        _write_frame(frame, output_path)
        logger.info(f"成功导出 {len(frame)} 条控制器表项到CSV文件: {output_path}")
        return output_path


class ReplayCSVExporter(DataExporter):
    """回放日志 CSV 导出器 (列: t, x1.., u, slot)"""

    def export(self, obj: pd.DataFrame, output_path: str) -> str:
        _write_frame(obj, output_path)
        logger.info(f"成功导出 {len(obj)} 个时隙的回放日志: {output_path}")
        return output_path


class JSONReportExporter(DataExporter):
    """JSON 报告导出器 (pydantic 模型按别名导出)"""

    def export(self, obj: Any, output_path: str) -> str:
        if isinstance(obj, BaseModel):
            data = obj.model_dump(by_alias=True)
        else:
            data = obj
        Path(output_path).parent.mkdir(parents=True, exist_ok=True)
        with open(output_path, "w", encoding="utf-8") as f:
            json.dump(data, f, ensure_ascii=False, indent=2, sort_keys=True, default=_json_default)
            f.write("\n")
        logger.info(f"报告已写入: {output_path}")
        return output_path


def _json_default(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, BaseModel):
        return value.model_dump(by_alias=True)
    raise TypeError(f"无法序列化类型 {type(value).__name__}")


@dataclass
class PhasePlot:
    """二维相图: 定义域、目标集、障碍物与若干轨迹"""

    domain: Box
    trajectories: List[np.ndarray] = field(default_factory=list)
    target: Optional[Box] = None
    obstacles: List[Box] = field(default_factory=list)
    title: str = ""


class SVGPhasePlotExporter(DataExporter):
    """最简 SVG 相图 (折线 + 盒子)，只画前两个状态分量"""

    OBSTACLE_STYLE = 'fill="#4f81bd" fill-opacity="0.6" stroke="none"'
    TARGET_STYLE = 'fill="#9bbb59" fill-opacity="0.6" stroke="none"'
    COLORS = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e"]

    def __init__(self, size: int = 480, margin: int = 30):
        self.size = size
        self.margin = margin

    def _mapper(self, domain: Box):
        lo, hi = domain.lower[:2], domain.upper[:2]
        span = np.where(hi > lo, hi - lo, 1.0)
        inner = self.size - 2 * self.margin

        def to_px(points: np.ndarray) -> np.ndarray:
            points = np.atleast_2d(points)[:, :2]
            px = self.margin + (points[:, 0] - lo[0]) / span[0] * inner
            py = self.size - self.margin - (points[:, 1] - lo[1]) / span[1] * inner
            return np.stack([px, py], axis=-1)

        return to_px

    def _rect(self, box: Box, to_px, style: str) -> str:
        corners = to_px(np.array([[box.lo[0], box.hi[1]], [box.hi[0], box.lo[1]]]))
        x0, y0 = corners[0]
        x1, y1 = corners[1]
        return (
            f'<rect x="{x0:.2f}" y="{y0:.2f}" width="{x1 - x0:.2f}" height="{y1 - y0:.2f}" '
            f'{style}/>'
        )

    def render(self, plot: PhasePlot) -> str:
        if plot.domain.dim < 2:
            raise ValueError("相图需要至少二维状态")
        to_px = self._mapper(plot.domain)
        parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.size}" height="{self.size}" '
            f'viewBox="0 0 {self.size} {self.size}">',
            f'<rect width="{self.size}" height="{self.size}" fill="white"/>',
            self._rect(plot.domain, to_px, 'fill="none" stroke="black" stroke-width="1"'),
        ]
        for obstacle in plot.obstacles:
            parts.append(self._rect(obstacle, to_px, self.OBSTACLE_STYLE))
        if plot.target is not None:
            parts.append(self._rect(plot.target, to_px, self.TARGET_STYLE))
        for k, states in enumerate(plot.trajectories):
            pixels = to_px(states)
            path = " ".join(f"{x:.2f},{y:.2f}" for x, y in pixels)
            color = self.COLORS[k % len(self.COLORS)]
            parts.append(
                f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>'
            )
            start = pixels[0]
            parts.append(f'<circle cx="{start[0]:.2f}" cy="{start[1]:.2f}" r="3" fill="{color}"/>')
        if plot.title:
            parts.append(
                f'<text x="{self.margin}" y="{self.margin - 10}" font-size="12" '
                f'font-family="sans-serif">{plot.title}</text>'
            )
        parts.append("</svg>")
        return "\n".join(parts) + "\n"

    def export(self, obj: PhasePlot, output_path: str) -> str:
        Path(output_path).parent.mkdir(parents=True, exist_ok=True)
        with open(output_path, "w", encoding="utf-8") as f:
            f.write(self.render(obj))
        logger.info(f"相图已写入: {output_path}")
        return output_path


def point_label(x: Sequence[float]) -> str:
    """由初始状态生成文件名标签，如 (0.8, 0.9) -> 0.8_0.9"""
    return "_".join(f"{float(v):g}" for v in x)


class ArtifactExporter:
    """
    产物导出管理器

    所有文件名固定 (不含时间戳)，重复运行得到逐字节相同的输出。
    """

    ABSTRACTION_FILE = "abstraction.bin"
    CONTROLLER_FILE = "controller.csv"

    def __init__(self, config: Config):
        """
        初始化导出器

        Args:
            config: 配置对象
        """
        self.config = config
        self.output_dir = config.get("output.output_dir", "output")

    def path(self, filename: str) -> str:
        return os.path.join(self.output_dir, filename)

    @property
    def abstraction_path(self) -> str:
        return self.path(self.ABSTRACTION_FILE)

    @property
    def controller_path(self) -> str:
        return self.path(self.CONTROLLER_FILE)

    def export_trajectory(self, trajectory: Trajectory, label: str) -> str:
        return TrajectoryCSVExporter().export(trajectory, self.path(f"trajectory_{label}.csv"))

    def export_controller(self, table: ControllerTable) -> str:
        return ControllerCSVExporter().export(table, self.controller_path)

    def export_replay(self, log: pd.DataFrame, label: str) -> str:
        return ReplayCSVExporter().export(log, self.path(f"replay_{label}.csv"))

    def export_report(self, report: Any, name: str) -> str:
        return JSONReportExporter().export(report, self.path(f"{name}.json"))

    def export_phase_plot(self, plot: PhasePlot, name: str) -> str:
        return SVGPhasePlotExporter().export(plot, self.path(f"{name}.svg"))

