"""Typed sparse tensors over named dimensions, with a polystore build layer."""

from importlib import resources
from pathlib import Path

from .algebra import hadamard, khatri_rao, khatri_rao_all, kronecker, n_mode_product, outer
from .analysis import (
    Clustering,
    TimeSeries,
    adjusted_rand_index,
    bot_pipeline,
    detect_breakouts,
    kmeans,
    planted_groups_tensor,
    rank_by_cluster_stability,
    time_series,
)
from .decomp import CPResult, TuckerResult, cp_als, fit, hosvd, reconstruct_cp, reconstruct_tucker
from .dimension import DAY, HOUR, NULL, Dimension, KeyType, create_dimension
from .errors import TDMError
from .polystore import Polystore, TensorSchema, load_schema
from .query import ANY, DimCondition, Eq, In, Ne, Range, ValueCondition, aggregate, project, run_query, select
from .tensor import Index, TypedTensor, ValueType, fold, from_dense, new_tensor, read_coo, write_coo

__all__ = [
    "__version__",
    "adjusted_rand_index",
    "aggregate",
    "ANY",
    "bot_pipeline",
    "Clustering",
    "cp_als",
    "CPResult",
    "create_dimension",
    "DAY",
    "detect_breakouts",
    "DimCondition",
    "Dimension",
    "Eq",
    "fit",
    "fixture_path",
    "fold",
    "from_dense",
    "hadamard",
    "hosvd",
    "HOUR",
    "In",
    "Index",
    "KeyType",
    "khatri_rao",
    "khatri_rao_all",
    "kmeans",
    "kronecker",
    "load_schema",
    "n_mode_product",
    "Ne",
    "new_tensor",
    "NULL",
    "outer",
    "planted_groups_tensor",
    "Polystore",
    "project",
    "Range",
    "rank_by_cluster_stability",
    "read_coo",
    "reconstruct_cp",
    "reconstruct_tucker",
    "run_query",
    "select",
    "TDMError",
    "TensorSchema",
    "time_series",
    "TimeSeries",
    "TuckerResult",
    "TypedTensor",
    "ValueCondition",
    "ValueType",
    "write_coo",
]

__version__ = "0.1.0"


def fixture_path(name: str) -> Path:
    """Directory of a bundled fixture (``toy``, ``planted`` or ``single``)."""
    path = Path(str(resources.files("tdm") / "fixtures" / name))
    if not path.is_dir():
        raise FileNotFoundError(f"no bundled fixture {name!r}")
    return path
