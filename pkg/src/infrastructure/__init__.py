"""
__init__.py

基础设施模块初始化
"""

from .artifacts import AuditWriter, CsvLog, read_jsonl, write_csv, write_json
from .checkpoint import (
    TrainingState,
    export_encoder,
    import_encoder,
    load_checkpoint,
    restore_model,
    save_checkpoint,
)
from .run_lock import RunLock

__all__ = [
    'AuditWriter',
    'CsvLog',
    'read_jsonl',
    'write_csv',
    'write_json',
    'export_encoder',
    'import_encoder',
    'load_checkpoint',
    'restore_model',
    'save_checkpoint',
    'TrainingState',
    'RunLock',
]
