import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rotcloud import downstream as D
from rotcloud import encoder as enc
from rotcloud.pcdata import DatasetManifest, Entry, gen_dataset


def blobs(n=100, margin=1.0, seed=0, counts=None):
    """Two 2-D Gaussian blobs separated by at least ``margin`` along x."""
    rng = np.random.default_rng(seed)
    n0, n1 = counts or (n // 2, n - n // 2)
    a = rng.uniform(-1, 1, size=(n0, 2)) + [-margin / 2 - 1, 0]
    b = rng.uniform(-1, 1, size=(n1, 2)) + [margin / 2 + 1, 0]
    return D.FeatureMatrix(np.vstack([a, b]), np.r_[np.zeros(n0, int), np.ones(n1, int)])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    return gen_dataset(out, categories=3, train=4, test=2, points=128, seed=5)


@pytest.fixture(scope="module")
def model():
    return enc.init_model("classify", 6, np.random.default_rng(0), widths=(16, 32), head_hidden=8)


class TestSVM:
    def test_separable_blobs(self):
        fm = blobs()
        svm = D.train_svm(fm)
        assert svm.accuracy(fm) == 1.0
        assert svm.weights.shape == (2, 2) and svm.num_classes == 2

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000))
    def test_objective_monotone(self, seed):
        fm = blobs(40, margin=0.2, seed=seed)
        hist = D.train_svm(fm, iters=200).objective
        assert all(b <= a for a, b in zip(hist, hist[1:]))

    def test_huge_lambda_collapses_to_majority(self):
        fm = blobs(counts=(70, 30))
        svm = D.train_svm(fm, lam=1e6)
        assert np.abs(svm.weights).max() < 1e-4
        np.testing.assert_array_equal(svm.predict(fm.rows), 0)
        assert svm.accuracy(fm) == pytest.approx(0.7)

    def test_duplicated_columns(self):
        fm = blobs(margin=0.3, seed=2)
        test = blobs(margin=0.3, seed=3)
        dup = D.FeatureMatrix(np.hstack([fm.rows, fm.rows]), fm.labels)
        dup_test = D.FeatureMatrix(np.hstack([test.rows, test.rows]), test.labels)
        assert abs(D.svm_accuracy(dup, dup_test) - D.svm_accuracy(fm, test)) <= 0.01

    def test_constant_shift(self):
        fm = blobs(seed=4)
        shift = np.array([5.0, -3.0])
        moved = D.FeatureMatrix(fm.rows + shift, fm.labels)
        a, b = D.train_svm(fm), D.train_svm(moved)
        agree = np.mean(a.predict(fm.rows) == b.predict(moved.rows))
        assert agree >= 0.99
        np.testing.assert_allclose(b.weights, a.weights, atol=1e-9)

    def test_tie_goes_to_lowest_class(self):
        svm = D.LinearSVM(np.zeros((3, 2)), np.array([0.0, 1.0, 1.0]), 1e-3, [])
        np.testing.assert_array_equal(svm.predict(np.ones((2, 2))), [1, 1])

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="two classes"):
            D.train_svm(D.FeatureMatrix(np.ones((3, 2)), [1, 1, 1]))

    def test_constant_column_is_harmless(self):
        fm = blobs()
        fm = D.FeatureMatrix(np.hstack([fm.rows, np.ones((len(fm), 1))]), fm.labels)
        assert D.train_svm(fm).accuracy(fm) == 1.0

    def test_width_mismatch(self):
        a = blobs()
        b = D.FeatureMatrix(np.ones((4, 3)), [0, 1, 0, 1])
        with pytest.raises(ValueError, match="2 columns but test features have 3"):
            D.svm_accuracy(a, b)


class TestFeatureMatrix:
    def test_rejects_non_finite(self):
        with pytest.raises(ValueError, match="non-finite"):
            D.FeatureMatrix([[np.nan, 1.0]], [0])

    def test_rejects_row_label_mismatch(self):
        with pytest.raises(ValueError):
            D.FeatureMatrix(np.ones((3, 2)), [0, 1])

    def test_csv_round_trip(self, tmp_path):
        fm = D.FeatureMatrix(np.random.default_rng(0).normal(size=(5, 4)), [0, 1, 2, 1, 0])
        fm.write_csv(tmp_path / "f.csv")
        back = D.FeatureMatrix.read_csv(tmp_path / "f.csv")
        np.testing.assert_array_equal(back.rows, fm.rows)
        np.testing.assert_array_equal(back.labels, fm.labels)

    def test_csv_missing_label(self, tmp_path):
        (tmp_path / "f.csv").write_text("f0,f1\n1,2\n")
        with pytest.raises(ValueError, match="missing column 'label'"):
            D.FeatureMatrix.read_csv(tmp_path / "f.csv")

    def test_csv_ragged_row(self, tmp_path):
        (tmp_path / "f.csv").write_text("label,f0,f1\n0,1,2\n1,2\n")
        with pytest.raises(ValueError, match=":3: expected 3 columns"):
            D.FeatureMatrix.read_csv(tmp_path / "f.csv")


class TestConcat:
    def test_shapes(self):
        a = D.FeatureMatrix(np.ones((10, 256)), np.arange(10) % 3, "a")
        b = D.FeatureMatrix(np.zeros((10, 256)), np.arange(10) % 3, "b")
        c = D.concat_features(a, b)
        assert c.rows.shape == (10, 512) and c.source == "a+b"
        np.testing.assert_array_equal(c.rows[3], np.r_[np.ones(256), np.zeros(256)])

    def test_zero_width_identity(self):
        a = D.FeatureMatrix(np.arange(12.0).reshape(4, 3), [0, 1, 0, 1])
        empty = D.FeatureMatrix(np.zeros((4, 0)), [0, 1, 0, 1])
        np.testing.assert_array_equal(D.concat_features(a, empty).rows, a.rows)

    def test_label_mismatch_names_row(self):
        a = D.FeatureMatrix(np.ones((4, 2)), [0, 1, 0, 1])
        b = D.FeatureMatrix(np.ones((4, 2)), [0, 1, 1, 1])
        with pytest.raises(ValueError, match="row 2"):
            D.concat_features(a, b)

    def test_count_mismatch(self):
        with pytest.raises(ValueError, match="sample counts"):
            D.concat_features(D.FeatureMatrix(np.ones((4, 2)), [0] * 4), D.FeatureMatrix(np.ones((3, 2)), [0] * 3))


class TestExtraction:
    def test_shape_and_order(self, dataset, model):
        fm = D.extract_dataset_features(model, dataset["train"])
        assert fm.rows.shape == (12, 32)
        np.testing.assert_array_equal(fm.labels, [e.label for e in dataset["train"].entries])

    def test_deterministic_and_threads(self, dataset, model):
        a = D.extract_dataset_features(model, dataset["train"])
        b = D.extract_dataset_features(model, dataset["train"], threads=4)
        np.testing.assert_array_equal(a.rows, b.rows)

    def test_shuffled_manifest_permutes_rows(self, dataset, model):
        m = dataset["train"]
        perm = np.random.default_rng(0).permutation(len(m))
        shuffled = DatasetManifest([m.entries[i] for i in perm], "train", m.seed, m.root)
        a = D.extract_dataset_features(model, m)
        b = D.extract_dataset_features(model, shuffled)
        np.testing.assert_array_equal(b.rows, a.rows[perm])

    def test_model_frozen(self, dataset, model):
        before = {n: p.copy() for n, p in model.params.items()}
        tr = D.extract_dataset_features(model, dataset["train"])
        te = D.extract_dataset_features(model, dataset["test"])
        D.label_efficiency_sweep(tr, te, [0.5, 1.0], iters=50)
        for n, p in model.params.items():
            assert p.tobytes() == before[n].tobytes()

    def test_load_error_names_file(self, dataset, model):
        m = dataset["train"]
        broken = DatasetManifest([*m.entries[:2], Entry("train/nope.xyz", 0)], "train", m.seed, m.root)
        with pytest.raises(OSError, match="nope.xyz"):
            D.extract_dataset_features(model, broken)


class TestSweep:
    def test_stratified_subset(self):
        labels = np.repeat([0, 1, 2], [10, 20, 30])
        idx = D.stratified_subset(labels, 0.5, 0)
        assert np.bincount(labels[idx]).tolist() == [5, 10, 15]
        np.testing.assert_array_equal(idx, D.stratified_subset(labels, 0.5, 0))
        np.testing.assert_array_equal(D.stratified_subset(labels, 1.0, 0), np.arange(60))

    def test_too_small_names_class(self):
        labels = np.repeat([0, 1, 2], [10, 20, 1])
        with pytest.raises(ValueError, match="class 2"):
            D.stratified_subset(labels, 0.2, 0)

    @pytest.mark.parametrize("f", [0.0, 1.5, -0.1])
    def test_fraction_range(self, f):
        with pytest.raises(ValueError, match="fraction"):
            D.stratified_subset(np.zeros(10, int), f, 0)

    def test_full_fraction_equals_full_fit(self):
        tr, te = blobs(margin=0.1, seed=5), blobs(margin=0.1, seed=6)
        curve = D.label_efficiency_sweep(tr, te, [0.25, 1.0], seed=3)
        assert curve[-1] == (1.0, D.svm_accuracy(tr, te))

    def test_curve_csv(self, tmp_path):
        D.write_curve(tmp_path / "c.csv", [(0.1, 0.5), (1.0, 0.75)])
        assert (tmp_path / "c.csv").read_text().splitlines() == ["fraction,accuracy", "0.1,0.5", "1.0,0.75"]
