"""Execution-grounded refinement of ambiguous column names, published as SQL views."""
from .schema import ColumnRef, RefinementMapping, SchemaModel, check_admissible, load_schema, scope_of
from .workload import WorkloadItem, exacc, ingest_workload, quality, recovery_rate

__version__ = "0.1.0"

__all__ = [
    "ColumnRef", "RefinementMapping", "SchemaModel", "check_admissible", "load_schema", "scope_of",
    "WorkloadItem", "exacc", "ingest_workload", "quality", "recovery_rate",
]
