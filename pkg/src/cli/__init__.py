"""
__init__.py

命令行命令模块初始化
"""

from .commands import parse_variants, run_ablation, run_eval, run_generate, run_train

__all__ = [
    'parse_variants',
    'run_ablation',
    'run_eval',
    'run_generate',
    'run_train',
]
