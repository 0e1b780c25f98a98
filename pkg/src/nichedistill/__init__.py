"""Cross-modal niche distillation: library, HTTP service, and CLI."""

__version__ = "0.1.0"

from .table import CellRecord, CellTable, TableSchema, load_table, save_assignments, save_table

__all__ = [
    "CellRecord",
    "CellTable",
    "TableSchema",
    "load_table",
    "save_table",
    "save_assignments",
    "__version__",
]
