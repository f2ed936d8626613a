"""
Delta-ISS Backstepping & Symbolic Synthesis Tool
增量输入-状态稳定反步设计、证书采样验证、有限抽象与调度约束下的控制器综合
"""

__version__ = "1.0.0"
__author__ = "Control Synthesis Team"

from .logger import setup_logger
from .config import Config
from .data_models import Box, VerificationReport
from .systems import SystemSetup, load_system

__all__ = [
    "setup_logger",
    "Config",
    "Box",
    "VerificationReport",
    "SystemSetup",
    "load_system",
]
