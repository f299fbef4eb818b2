"""
异常定义

所有异常都继承自内置 ValueError / RuntimeError，调用方可以按内置类型捕获
"""


class DCGError(Exception):
    """项目异常基类"""


class ConfigurationError(DCGError, ValueError):
    """配置或维度不合法"""


class InputError(DCGError, ValueError):
    """输入数据不合法（非有限值、形状不一致、标签越界等）"""


class DegenerateInputError(InputError):
    """退化输入，例如单置信度全为零"""


class SamplerError(DCGError, ValueError):
    """批次无法构成三元组，通常是 P×K 采样器配置错误"""


class ConsistencyError(DCGError, RuntimeError):
    """内部一致性被破坏"""


class CheckpointError(DCGError, RuntimeError):
    """检查点读写或兼容性错误"""

    def __init__(self, message: str, mismatch: bool = False):
        super().__init__(message)
        self.mismatch = mismatch


class RunLockError(DCGError, RuntimeError):
    """输出目录已被其他运行占用"""
