"""
异常定义模块
"""

from typing import Optional


class DeltaISSError(Exception):
    """本项目所有异常的基类"""


class DivergenceError(DeltaISSError, ArithmeticError):
    """数值积分发散 (状态非有限或超过阈值)"""

    def __init__(self, time: float, message: Optional[str] = None):
        self.time = time
        super().__init__(message or f"轨迹在 t={time:.6g} 处发散")


class InvalidSetError(DeltaISSError, ValueError):
    """集合定义非法 (如盒子下界大于上界, 网格为空)"""


class ContractViolationError(DeltaISSError, ValueError):
    """输入违反前置条件 (如矩阵不对称)"""


class DimensionMismatchError(DeltaISSError, ValueError):
    """维度不一致"""


class CorruptFileError(DeltaISSError):
    """文件损坏或格式不正确"""

    def __init__(self, path: str, reason: str):
        self.path = path
        self.reason = reason
        super().__init__(f"文件 {path} 已损坏: {reason}")


class UnsupportedConfigurationError(DeltaISSError):
    """当前配置不受支持 (如递归反步缺少解析导数)"""


class MissingArtifactError(DeltaISSError, FileNotFoundError):
    """上游产物缺失"""

    def __init__(self, path: str, command: str):
        self.path = path
        self.command = command
        super().__init__(f"缺少上游产物 {path}，请先运行命令: {command}")
