import numpy as np
import pytest

from mtlbench.data import (Dataset, alloy_schema, apply_normalize, downsample_task,
                           fit_normalize, generic_schema, iter_batches, load_csv,
                           save_csv, stratified_split)
from mtlbench.errors import ConfigError, DataFormatError

ALLOY_HEADER = ("Al,Ti,Cr,Fe,Co,Ni,Cu,Zr,Mo,W,Mn,Si,Mg,Re,Ta,"
                "r_avg,delta,dH_mix,EN_avg,dEN,N,resistivity,hardness,amorphous")


def alloy_row(resistivity="", hardness="", amorphous="", lead="0.5,0.5"):
    feats = lead + "," + ",".join(["0"] * 13) + ",1.4,0.05,-10.2,1.8,0.3,2"
    return f"{feats},{resistivity},{hardness},{amorphous}"


def write_csv(tmp_path, rows, name="data.csv"):
    path = tmp_path / name
    path.write_text(ALLOY_HEADER + "\n" + "\n".join(rows) + "\n")
    return path


def toy_dataset(n=12, n_tasks=2, seed=0, kinds=None):
    rng = np.random.default_rng(seed)
    kinds = kinds or ["regression"] * n_tasks
    features = rng.normal(size=(n, 3))
    targets = rng.normal(size=(n, n_tasks))
    mask = np.ones((n, n_tasks))
    names = [f"t{i}" for i in range(n_tasks)]
    return Dataset(features, targets, mask, names, kinds)


class TestLoadCsv:
    def test_full_row_mask(self, tmp_path):
        path = write_csv(tmp_path, [alloy_row("12.5", "3.2", "1")])
        ds = load_csv(path)
        assert ds.sample(0).mask == (1, 1, 1)
        assert ds.sample(0).targets == (12.5, 3.2, 1.0)

    def test_union_row_mask(self, tmp_path):
        path = write_csv(tmp_path, [alloy_row(resistivity="12.5")])
        ds = load_csv(path)
        assert ds.sample(0).mask == (1, 0, 0)
        assert ds.sample(0).targets == (12.5, None, None)
        assert np.isnan(ds.targets[0, 1])

    def test_fail_closed_lists_all_malformed_rows(self, tmp_path):
        rows = [alloy_row("1.0") for _ in range(10)]
        rows[1] = rows[1].replace("0.5,0.5", "0.5,not_a_number", 1)  # row 2
        rows[6] = alloy_row()  # row 7: no labels at all
        path = write_csv(tmp_path, rows)
        with pytest.raises(DataFormatError) as exc:
            load_csv(path)
        msg = str(exc.value)
        assert "row 2" in msg and "row 7" in msg and "2 malformed" in msg

    def test_unknown_column_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text(ALLOY_HEADER.replace("hardness", "hardnes") + "\n")
        with pytest.raises(DataFormatError, match="hardnes"):
            load_csv(path)

    def test_negative_atomic_fraction_rejected(self, tmp_path):
        path = write_csv(tmp_path, [alloy_row("1.0", lead="-0.5,0.5")])
        with pytest.raises(DataFormatError, match="negative"):
            load_csv(path)

    def test_non_binary_classification_label_rejected(self, tmp_path):
        path = write_csv(tmp_path, [alloy_row(amorphous="0.7")])
        with pytest.raises(DataFormatError, match="must be 0 or 1"):
            load_csv(path)

    def test_round_trip_through_save_csv(self, tmp_path):
        ds = toy_dataset(8, 2)
        schema = generic_schema(3, ds.task_names, ds.task_kinds)
        path = tmp_path / "round.csv"
        save_csv(ds, path, schema)
        back = load_csv(path, schema)
        assert np.array_equal(back.features, ds.features)
        assert np.array_equal(back.mask, ds.mask)
        assert np.array_equal(back.targets, ds.targets)


class TestNormalize:
    def test_hand_stats(self):
        ds = Dataset(np.array([[1.0], [3.0]]), np.zeros((2, 1)), np.ones((2, 1)),
                     ["t"], ["regression"])
        stats = fit_normalize(ds)
        assert stats.mean[0] == 2.0 and stats.std[0] == 1.0
        out = apply_normalize(ds, stats)
        assert np.allclose(out.features, [[-1.0], [1.0]])

    def test_idempotent_on_standardized_data(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(500, 4))
        x = (x - x.mean(axis=0)) / x.std(axis=0)
        ds = Dataset(x, np.zeros((500, 1)), np.ones((500, 1)), ["t"], ["regression"])
        stats = fit_normalize(ds)
        assert np.allclose(stats.mean, 0.0, atol=1e-12)
        assert np.allclose(stats.std, 1.0, atol=1e-12)
        assert np.allclose(apply_normalize(ds, stats).features, x, atol=1e-9)

    def test_constant_column_flagged(self):
        ds = Dataset(np.array([[4.0], [4.0], [4.0]]), np.zeros((3, 1)), np.ones((3, 1)),
                     ["t"], ["regression"])
        with pytest.warns(UserWarning, match="constant feature"):
            stats = fit_normalize(ds)
        assert stats.std[0] == 1.0 and stats.constant_columns[0]
        assert np.allclose(apply_normalize(ds, stats).features, 0.0)

    def test_train_mean_zero_invariant(self):
        rng = np.random.default_rng(2)
        ds = Dataset(rng.normal(loc=7.0, scale=3.0, size=(1000, 5)),
                     np.zeros((1000, 1)), np.ones((1000, 1)), ["t"], ["regression"])
        out = apply_normalize(ds, fit_normalize(ds))
        assert np.max(np.abs(out.features.mean(axis=0))) < 1e-10
        assert np.allclose(out.features.var(axis=0), 1.0, atol=1e-9)


def single_task_dataset(n, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.normal(size=(n, 2)), rng.normal(size=(n, 1)), np.ones((n, 1)),
                   ["y"], ["regression"])


class TestStratifiedSplit:
    def test_table_counts_52388(self):
        ds = single_task_dataset(52_388)
        train, val, test = stratified_split(ds, seed=42)
        assert abs(len(train) - 36_670) <= 1
        assert abs(len(val) - 7_859) <= 1
        assert abs(len(test) - 7_859) <= 1
        assert len(train) + len(val) + len(test) == 52_388

    def test_table_counts_800(self):
        train, val, test = stratified_split(single_task_dataset(800), seed=42)
        assert (len(train), len(val), len(test)) == (560, 120, 120)

    def test_table_counts_840(self):
        train, val, test = stratified_split(single_task_dataset(840), seed=42)
        assert (len(train), len(val), len(test)) == (588, 126, 126)

    def test_same_seed_reproduces(self):
        ds = single_task_dataset(300, seed=3)
        a = stratified_split(ds, seed=7)
        b = stratified_split(ds, seed=7)
        for x, y in zip(a, b):
            assert np.array_equal(x.features, y.features)

    def test_different_seed_differs(self):
        ds = single_task_dataset(300, seed=3)
        a = stratified_split(ds, seed=7)[0]
        b = stratified_split(ds, seed=8)[0]
        assert not np.array_equal(a.features, b.features)

    def test_disjoint_and_covering(self):
        ds = single_task_dataset(101, seed=5)
        keys = [tuple(row) for part in stratified_split(ds, seed=1) for row in part.features]
        assert len(keys) == 101
        assert len(set(keys)) == 101  # features are continuous, so rows are unique

    def test_mask_pattern_groups_preserve_per_task_ratios(self):
        # Union of three disjoint single-task blocks: each task's labeled
        # count must split at its own 70/15/15.
        rng = np.random.default_rng(4)
        sizes = [400, 120, 80]
        features, targets, mask = [], [], []
        for j, size in enumerate(sizes):
            f = rng.normal(size=(size, 2))
            y = np.zeros((size, 3))
            m = np.zeros((size, 3))
            y[:, j] = rng.normal(size=size) if j < 2 else rng.integers(0, 2, size)
            m[:, j] = 1.0
            features.append(f)
            targets.append(y)
            mask.append(m)
        ds = Dataset(np.vstack(features), np.vstack(targets), np.vstack(mask),
                     ["a", "b", "c"], ["regression", "regression", "classification"])
        train, val, test = stratified_split(ds, seed=11)
        for part, expected in ((train, [280, 84, 56]), (val, [60, 18, 12]), (test, [60, 18, 12])):
            counts = part.labeled_counts()
            for task, want in zip(["a", "b", "c"], expected):
                assert abs(counts[task] - want) <= 1

    def test_classification_strata_balanced(self):
        rng = np.random.default_rng(6)
        n = 200
        labels = (rng.random(n) < 0.25).astype(float)
        ds = Dataset(rng.normal(size=(n, 2)), labels[:, None], np.ones((n, 1)),
                     ["c"], ["classification"])
        train, val, test = stratified_split(ds, seed=2)
        total_pos = labels.sum()
        for part, frac in ((train, 0.70), (val, 0.15), (test, 0.15)):
            pos = np.nansum(part.targets[:, 0])
            assert abs(pos - frac * total_pos) <= 1

    def test_regression_quantiles_balanced(self):
        ds = single_task_dataset(1000, seed=9)
        train, _, _ = stratified_split(ds, seed=3)
        # each target decile of the source data should appear ~70% in train
        edges = np.quantile(ds.targets[:, 0], np.linspace(0, 1, 11))
        hist_all, _ = np.histogram(ds.targets[:, 0], bins=edges)
        hist_train, _ = np.histogram(train.targets[:, 0], bins=edges)
        assert np.all(np.abs(hist_train - 0.7 * hist_all) <= 2)

    def test_tiny_group_falls_back_unstratified(self):
        ds = single_task_dataset(6, seed=10)
        with pytest.warns(UserWarning, match="unstratified"):
            train, val, test = stratified_split(ds, seed=0)
        assert len(train) + len(val) + len(test) == 6

    def test_bad_ratios_rejected(self):
        with pytest.raises(ConfigError):
            stratified_split(single_task_dataset(10), ratios=(0.5, 0.3, 0.3))


class TestDownsample:
    def make_union(self):
        rng = np.random.default_rng(12)
        targets = np.column_stack([rng.normal(size=50), rng.normal(size=50)])
        mask = np.zeros((50, 2))
        mask[:30, 0] = 1.0
        mask[30:, 1] = 1.0
        return Dataset(rng.normal(size=(50, 2)), targets, mask, ["a", "b"],
                       ["regression", "regression"])

    def test_noop_at_full_count(self):
        ds = self.make_union()
        out = downsample_task(ds, "a", 30, seed=1)
        assert np.array_equal(out.features, ds.features)

    def test_zero_rejected(self):
        with pytest.raises(ValueError):
            downsample_task(self.make_union(), "a", 0)

    def test_too_large_rejected(self):
        with pytest.raises(ValueError):
            downsample_task(self.make_union(), "a", 31)

    def test_other_task_samples_preserved_exactly(self):
        ds = self.make_union()
        out = downsample_task(ds, "a", 10, seed=5)
        assert out.labeled_counts() == {"a": 10, "b": 20}
        kept_b = out.features[out.mask[:, 1] == 1.0]
        assert np.array_equal(kept_b, ds.features[ds.mask[:, 1] == 1.0])

    def test_deterministic(self):
        ds = self.make_union()
        a = downsample_task(ds, "a", 10, seed=5)
        b = downsample_task(ds, "a", 10, seed=5)
        assert np.array_equal(a.features, b.features)


class TestBatches:
    def test_partition_arithmetic(self):
        ds = toy_dataset(100, 1)
        sizes = [x.shape[0] for x, _, _ in
                 iter_batches(ds, 32, rng=np.random.default_rng(0))]
        assert sizes == [32, 32, 32, 4]

    def test_no_shuffle_preserves_order(self):
        ds = toy_dataset(10, 1)
        batches = list(iter_batches(ds, 4, shuffle=False))
        stacked = np.vstack([b[0] for b in batches])
        assert np.array_equal(stacked, ds.features)

    def test_masks_travel_with_batches(self):
        rng = np.random.default_rng(3)
        mask = np.ones((20, 2))
        mask[:10, 1] = 0.0
        targets = rng.normal(size=(20, 2))
        ds = Dataset(rng.normal(size=(20, 2)), targets, mask, ["a", "b"],
                     ["regression", "regression"])
        total = sum(m.sum() for _, _, m in iter_batches(ds, 8, rng=np.random.default_rng(1)))
        assert total == mask.sum()

    def test_minority_per_batch_expectation(self):
        # desk-scale restatement of the batch-arithmetic: 32 * 80 / 5403 ~ 0.47
        assert 32 * 80 / 5403 == pytest.approx(0.47, abs=0.01)

    def test_invalid_batch_size(self):
        with pytest.raises(ConfigError):
            list(iter_batches(toy_dataset(5, 1), 0))


class TestDatasetInvariants:
    def test_no_target_without_mask(self):
        ds = toy_dataset(5, 2)
        assert not np.any(np.isnan(ds.targets))
        mask = np.ones((5, 2))
        mask[0, 1] = 0.0
        ds2 = Dataset(ds.features, ds.targets, mask, ds.task_names, ds.task_kinds)
        assert np.isnan(ds2.targets[0, 1])

    def test_all_masked_row_rejected(self):
        with pytest.raises(ConfigError):
            Dataset(np.zeros((1, 2)), np.zeros((1, 1)), np.zeros((1, 1)),
                    ["t"], ["regression"])

    def test_arrays_immutable(self):
        ds = toy_dataset(3, 1)
        with pytest.raises(ValueError):
            ds.features[0, 0] = 99.0

    def test_alloy_schema_shape(self):
        schema = alloy_schema()
        assert len(schema.feature_columns) == 21
        assert schema.header[-3:] == ["resistivity", "hardness", "amorphous"]
