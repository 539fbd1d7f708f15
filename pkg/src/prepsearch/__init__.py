"""Differentiable search over per-feature tabular preprocessing pipelines."""

from .data import EncoderState, FeatureMatrix, RawTable, SplitSpec, encode, load_csv, split
from .operators import Catalog, CatalogConfig, OperatorSpec, build_catalog, fit, num_derivative
from .search import SearchConfig, SearchResult, run_search
from .synth import SynthSpec, generate, imputation_rmse

__all__ = [
    "Catalog",
    "CatalogConfig",
    "EncoderState",
    "FeatureMatrix",
    "OperatorSpec",
    "RawTable",
    "SearchConfig",
    "SearchResult",
    "SplitSpec",
    "SynthSpec",
    "build_catalog",
    "encode",
    "fit",
    "generate",
    "imputation_rmse",
    "load_csv",
    "num_derivative",
    "run_search",
    "split",
]
