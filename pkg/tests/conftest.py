import numpy as np
import pytest

from prepsearch.data import FeatureMatrix, OneHotGroup
from prepsearch.operators import Catalog, OperatorSpec, build_catalog


def make_numeric_fm(data: np.ndarray, labels=None, n_classes: int = 2) -> FeatureMatrix:
    data = np.asarray(data, dtype=np.float64)
    if labels is None:
        labels = np.zeros(data.shape[0], dtype=np.int64)
    return FeatureMatrix(
        data=data,
        missing_mask=np.isnan(data),
        labels=np.asarray(labels, dtype=np.int64),
        numeric_cols=list(range(data.shape[1])),
        groups=[],
        column_names=[f"f{j}" for j in range(data.shape[1])],
        n_classes=n_classes,
    )


def make_fm_with_group(num: np.ndarray, group_block: np.ndarray, categories=("x", "y"), mode_slot=0,
                       labels=None, n_classes=2) -> FeatureMatrix:
    num = np.asarray(num, dtype=np.float64)
    data = np.concatenate([num, group_block], axis=1)
    if labels is None:
        labels = np.zeros(data.shape[0], dtype=np.int64)
    return FeatureMatrix(
        data=data,
        missing_mask=np.isnan(data),
        labels=np.asarray(labels, dtype=np.int64),
        numeric_cols=list(range(num.shape[1])),
        groups=[OneHotGroup("g", num.shape[1], tuple(categories), mode_slot)],
        column_names=[f"f{j}" for j in range(num.shape[1])]
        + [f"g={c}" for c in categories]
        + ["g=<missing>"],
        n_classes=n_classes,
    )


def two_type_catalog(normalize_ops=("identity", "standard", "minmax")) -> Catalog:
    """Small impute+normalize space for hand-computable pipelines."""
    return Catalog(
        ops={
            "impute": tuple(OperatorSpec("impute", n) for n in ("mean", "median", "mode")),
            "normalize": tuple(OperatorSpec("normalize", n) for n in normalize_ops),
        },
        types=("impute", "normalize"),
    )


def affine_catalog() -> Catalog:
    """Full four-type space restricted to identity/affine operators."""
    from prepsearch.operators import CatalogConfig

    return build_catalog(CatalogConfig(zscore_ks=(), mad_ks=(), iqr_ks=(), bins=()))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
