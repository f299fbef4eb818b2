"""
__init__.py

DCG 多模态车辆重识别

模块通过 src 目录下的顶层包访问（config、core、datakit、evalkit、infrastructure、cli）
"""

__version__ = "0.1.0"

__all__ = ['__version__']
