import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prepsearch.data import (
    EncoderState,
    SplitSpec,
    encode,
    encode_with,
    fit_encoder,
    load_csv,
    split,
    split_indices,
)


def write_csv(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


class TestLoadCsv:
    def test_numeric_column_with_empty_cell(self, tmp_path):
        path = write_csv(tmp_path, "a,y\n1,p\n2,q\n,p\n")
        table = load_csv(path, "y")
        col = table.columns[0]
        assert col.kind == "numeric"
        assert col.values == [1.0, 2.0, None]

    def test_all_symbolic_column_is_categorical(self, tmp_path):
        path = write_csv(tmp_path, "a,y\nx,p\ny,q\nx,p\n")
        col = load_csv(path, "y").columns[0]
        assert col.kind == "categorical"
        assert len(set(col.values)) == 2

    def test_mixed_content_fails_numeric_rule(self, tmp_path):
        # one non-numeric cell makes the whole column categorical
        path = write_csv(tmp_path, "a,y\n1,p\nx,q\n1,p\n")
        col = load_csv(path, "y").columns[0]
        assert col.kind == "categorical"
        assert col.values == ["1", "x", "1"]

    def test_missing_tokens(self, tmp_path):
        path = write_csv(tmp_path, "a,y\n?,p\nNA,q\nNaN,p\n3,q\n")
        col = load_csv(path, "y").columns[0]
        assert col.kind == "numeric"
        assert col.values == [None, None, None, 3.0]

    def test_type_override_forces_categorical(self, tmp_path):
        path = write_csv(tmp_path, "a,y\n1,p\n2,q\n")
        col = load_csv(path, "y", type_overrides={"a": "categorical"}).columns[0]
        assert col.kind == "categorical"

    def test_target_column_absent(self, tmp_path):
        path = write_csv(tmp_path, "a,y\n1,p\n")
        with pytest.raises(ValueError, match="target column"):
            load_csv(path, "label")

    def test_zero_data_rows(self, tmp_path):
        path = write_csv(tmp_path, "a,y\n")
        with pytest.raises(ValueError, match="zero data rows"):
            load_csv(path, "y")

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(OSError):
            load_csv(str(tmp_path / "nope.csv"), "y")


class TestSplit:
    def test_exact_division(self):
        tr, va, te = split_indices(10, SplitSpec(0.6, 0.2, 0.2, seed=5))
        assert (len(tr), len(va), len(te)) == (6, 2, 2)

    def test_remainder_goes_to_train(self):
        tr, va, te = split_indices(7, SplitSpec(0.6, 0.2, 0.2, seed=5))
        assert (len(tr), len(va), len(te)) == (5, 1, 1)

    def test_same_seed_identical(self):
        a = split_indices(50, SplitSpec(seed=11))
        b = split_indices(50, SplitSpec(seed=11))
        for x, y in zip(a, b):
            assert np.array_equal(x, y)

    def test_empty_partition_rejected(self):
        with pytest.raises(ValueError):
            split_indices(3, SplitSpec(0.8, 0.1, 0.1, seed=0))

    def test_fractions_must_sum_to_one(self):
        with pytest.raises(ValueError):
            SplitSpec(0.5, 0.2, 0.2, seed=0)

    @given(n=st.integers(5, 500), seed=st.integers(0, 2**16))
    @settings(max_examples=60, deadline=None)
    def test_partition_disjoint_and_covering(self, n, seed):
        tr, va, te = split_indices(n, SplitSpec(seed=seed))
        merged = np.concatenate([tr, va, te])
        assert len(merged) == n
        assert len(np.unique(merged)) == n
        assert len(va) == math.floor(0.2 * n)
        assert len(te) == math.floor(0.2 * n)


def toy_tables(tmp_path):
    train = load_csv(
        write_csv(tmp_path, "num,cat,y\n1,x,p\n2,y,q\n,x,p\n3,x,q\n", "train.csv"), "y"
    )
    test = load_csv(write_csv(tmp_path, "num,cat,y\n4,z,p\n5,,q\n6,y,p\n", "test.csv"), "y")
    return train, test


class TestEncode:
    def test_onehot_width_includes_missing_slot(self, tmp_path):
        train, _ = toy_tables(tmp_path)
        fm = encode_with(fit_encoder(train), train)
        assert len(fm.groups) == 1
        assert fm.groups[0].width == 3  # x, y, MISSING
        assert fm.column_names[1:] == ["cat=x", "cat=y", "cat=<missing>"]

    def test_unseen_category_maps_to_missing_slot(self, tmp_path):
        train, test = toy_tables(tmp_path)
        state = fit_encoder(train)
        fm = encode_with(state, test)
        g = fm.groups[0]
        # row 0 has the unseen symbol "z": observed, MISSING slot set
        assert fm.data[0, g.start + g.missing_slot] == 1.0
        assert not fm.missing_mask[0, g.start]

    def test_missing_categorical_cell_is_nan_across_group(self, tmp_path):
        train, test = toy_tables(tmp_path)
        fm = encode_with(fit_encoder(train), test)
        g = fm.groups[0]
        assert np.isnan(fm.data[1, g.start : g.stop]).all()
        assert fm.missing_mask[1, g.start : g.stop].all()

    def test_numeric_passthrough_preserves_missing(self, tmp_path):
        train, _ = toy_tables(tmp_path)
        fm = encode_with(fit_encoder(train), train)
        assert np.isnan(fm.data[2, 0])
        assert fm.missing_mask[2, 0]
        assert fm.data[0, 0] == 1.0

    def test_column_count_formula(self, tmp_path):
        train, _ = toy_tables(tmp_path)
        fm = encode_with(fit_encoder(train), train)
        # 1 numeric + (2 categories + 1)
        assert fm.n_cols == 1 + 3

    def test_round_trip_bitwise(self, tmp_path):
        train, _ = toy_tables(tmp_path)
        state = fit_encoder(train)
        a = encode_with(state, train)
        b = encode_with(state, train)
        assert np.array_equal(a.data, b.data, equal_nan=True)
        assert np.array_equal(a.missing_mask, b.missing_mask)

    def test_observed_rows_one_hot_exactly_once(self, tmp_path):
        train, _ = toy_tables(tmp_path)
        fm = encode_with(fit_encoder(train), train)
        g = fm.groups[0]
        block = fm.data[:, g.start : g.stop]
        observed = ~fm.missing_mask[:, g.start]
        assert (block[observed].sum(axis=1) == 1.0).all()

    def test_encoder_state_json_round_trip(self, tmp_path):
        train, test = toy_tables(tmp_path)
        state = fit_encoder(train)
        restored = EncoderState.from_json(state.to_json())
        a = encode_with(state, test)
        b = encode_with(restored, test)
        assert np.array_equal(a.data, b.data, equal_nan=True)

    def test_no_observed_categories_rejected(self, tmp_path):
        table = load_csv(write_csv(tmp_path, "cat,y\n?,p\n?,q\n?,p\n"), "y")
        table.columns[0].kind = "categorical"
        with pytest.raises(ValueError, match="no observed categories"):
            fit_encoder(table)

    def test_unseen_label_rejected(self, tmp_path):
        train, _ = toy_tables(tmp_path)
        other = load_csv(write_csv(tmp_path, "num,cat,y\n1,x,r\n", "o.csv"), "y")
        with pytest.raises(ValueError, match="label"):
            encode_with(fit_encoder(train), other)

    def test_encode_three_splits(self, tmp_path):
        train, test = toy_tables(tmp_path)
        fm_tr, fm_va, fm_te, state = encode(train, train, test)
        assert fm_tr.n_cols == fm_va.n_cols == fm_te.n_cols
        assert fm_te.n_classes == 2


def test_split_tables_keep_alignment(tmp_path):
    path = write_csv(tmp_path, "a,y\n" + "".join(f"{i},{i % 2}\n" for i in range(20)))
    table = load_csv(path, "y")
    tr, va, te = split(table, SplitSpec(seed=4))
    for part in (tr, va, te):
        for v, t in zip(part.columns[0].values, part.target):
            assert int(v) % 2 == int(t)
