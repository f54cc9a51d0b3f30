import numpy as np
import pytest

from app.core.errors import ConfigError, DatasetError, ShapeError
from app.models.dto import AugmentConfig, LdlSample
from app.services import dataset_service
from app.services.dataset_service import (
    kfold_split,
    load_csv,
    mixup_mask,
    sample_augmentation,
    synthesize,
    train_validation_split,
    write_csv,
)


def _write(path, header, rows):
    lines = [",".join(header)] + [",".join(str(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def test_load_two_row_file(tmp_path):
    path = _write(tmp_path / "two.csv", ["f0", "f1", "y0", "y1"], [[1, 2, 0.5, 0.5], [3, 4, 1.0, 0.0]])
    ds = load_csv(path)
    assert (ds.n, ds.d, ds.n_labels) == (2, 2, 2)
    assert ds.targets.tolist() == [[0.5, 0.5], [1.0, 0.0]]
    assert ds.name == "two"


def test_row_off_the_simplex_is_named(tmp_path):
    path = _write(tmp_path / "bad.csv", ["f0", "y0", "y1"], [[1, 0.5, 0.5], [2, 0.5, 0.4]])
    with pytest.raises(DatasetError) as info:
        load_csv(path)
    assert info.value.context["rows"] == [2]
    assert "rows [2]" in info.value.detail


def test_negative_label_is_rejected(tmp_path):
    path = _write(tmp_path / "neg.csv", ["f0", "y0", "y1"], [[1, 1.1, -0.1]])
    with pytest.raises(DatasetError):
        load_csv(path)


def test_gene_shaped_header(tmp_path):
    d, n_labels = 36, 68
    header = [f"f{i}" for i in range(d)] + [f"y{j}" for j in range(n_labels)]
    rng = np.random.default_rng(0)
    y = rng.dirichlet(np.ones(n_labels), size=3)
    rows = np.hstack([rng.standard_normal((3, d)), y])
    path = _write(tmp_path / "gene.csv", header, [[repr(float(v)) for v in r] for r in rows])
    ds = load_csv(path)
    assert (ds.d, ds.n_labels, ds.n) == (36, 68, 3)


@pytest.mark.parametrize(
    "header",
    [
        ["y0", "y1"],
        ["f0", "y0"],
        ["f0", "f2", "y0", "y1"],
        ["f0", "y1", "y0"],
    ],
)
def test_malformed_header_is_rejected(tmp_path, header):
    path = _write(tmp_path / "h.csv", header, [[0.5] * len(header)])
    with pytest.raises(DatasetError):
        load_csv(path)


def test_non_numeric_cell_is_rejected(tmp_path):
    path = _write(tmp_path / "nan.csv", ["f0", "y0", "y1"], [[1, 0.5, 0.5], ["abc", 0.5, 0.5]])
    with pytest.raises(DatasetError) as info:
        load_csv(path)
    assert info.value.context["rows"] == [2]


def test_missing_file(tmp_path):
    with pytest.raises(DatasetError):
        load_csv(tmp_path / "absent.csv")


def test_sidecar_overrides_name(tmp_path):
    path = _write(tmp_path / "raw.csv", ["f0", "y0", "y1"], [[1, 0.25, 0.75]])
    (tmp_path / "raw.csv.cfg").write_text("name=renamed\nk=3\n", encoding="utf-8")
    assert load_csv(path).name == "renamed"
    assert dataset_service.load_sidecar(path).k == 3


def test_invalid_sidecar_is_a_config_error(tmp_path):
    path = _write(tmp_path / "raw.csv", ["f0", "y0", "y1"], [[1, 0.25, 0.75]])
    (tmp_path / "raw.csv.cfg").write_text("k = 1\n", encoding="utf-8")
    with pytest.raises(ConfigError) as info:
        load_csv(path)
    assert info.value.context["keys"] == ["k"]


def test_csv_round_trip_is_exact(tmp_path):
    ds = synthesize(20, 4, 3, seed=5)
    back = load_csv(write_csv(ds, tmp_path / "s.csv"))
    assert np.array_equal(back.features, ds.features)
    assert np.array_equal(back.targets, ds.targets)


def test_synthesize_is_seeded_and_on_the_simplex():
    a, b = synthesize(50, 6, 4, seed=1), synthesize(50, 6, 4, seed=1)
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.targets, b.targets)
    np.testing.assert_allclose(a.targets.sum(axis=1), 1.0, atol=1e-12)
    assert (a.targets > 0).all()
    assert not np.array_equal(a.features, synthesize(50, 6, 4, seed=2).features)


def test_synthesize_rejects_single_label():
    with pytest.raises(DatasetError):
        synthesize(10, 3, 1, seed=0)


def test_kfold_partitions_every_repeat():
    splits = kfold_split(53, k=5, repeats=2, seed=7)
    assert len(splits) == 10
    for r in range(2):
        tests = [s.test for s in splits if s.repeat == r]
        merged = np.concatenate(tests)
        assert sorted(merged.tolist()) == list(range(53))
    for s in splits:
        parts = [set(s.train.tolist()), set(s.validation.tolist()), set(s.test.tolist())]
        assert not parts[0] & parts[1] and not parts[0] & parts[2] and not parts[1] & parts[2]
        assert len(parts[0]) + len(parts[1]) + len(parts[2]) == 53
        assert len(parts[1]) >= 1


def test_ten_by_five_fold_is_reproducible():
    a = kfold_split(100, k=5, repeats=10, seed=3)
    b = kfold_split(100, k=5, repeats=10, seed=3)
    assert len(a) == 50
    assert all(np.array_equal(x.test, y.test) and np.array_equal(x.train, y.train) for x, y in zip(a, b))
    assert not np.array_equal(a[0].test, a[5].test)


def test_kfold_rejects_more_folds_than_samples():
    with pytest.raises(DatasetError):
        kfold_split(3, k=5, repeats=1, seed=0)


def test_train_validation_split(small_dataset):
    train, val = train_validation_split(small_dataset, seed=0)
    assert train.n + val.n == small_dataset.n
    assert val.n == round(0.1 * small_dataset.n)
    rows = {tuple(r) for r in train.features.tolist()} | {tuple(r) for r in val.features.tolist()}
    assert len(rows) == small_dataset.n


def test_mixup_identity_when_lambda_is_one():
    a = LdlSample(x=np.array([1.0, -2.0, 3.0]), y=np.array([0.0, 0.3, 0.7]))
    b = LdlSample(x=np.array([5.0, 5.0, 5.0]), y=np.array([0.2, 0.2, 0.6]))
    out = mixup_mask(a, b, 1.0, np.ones(3))
    assert out.x.tolist() == a.x.tolist()
    np.testing.assert_allclose(out.y, a.y, atol=1e-15)


def test_mixup_hand_example():
    a = LdlSample(x=np.array([2.0, 0.0]), y=np.array([1.0, 0.0]))
    b = LdlSample(x=np.array([0.0, 2.0]), y=np.array([0.0, 1.0]))
    out = mixup_mask(a, b, 0.5, np.array([1.0, 1.0]))
    assert out.x.tolist() == [1.0, 1.0]
    np.testing.assert_allclose(out.y, [0.5, 0.5])


def test_mixup_with_zero_mask():
    a = LdlSample(x=np.array([2.0, 1.0]), y=np.array([0.7, 0.3]))
    b = LdlSample(x=np.array([4.0, 3.0]), y=np.array([0.1, 0.9]))
    out = mixup_mask(a, b, 0.3, np.zeros(2))
    assert out.x.tolist() == [0.0, 0.0]
    assert out.y.sum() == pytest.approx(1.0)
    assert (out.y >= 0).all()


def test_mixup_mask_length_mismatch():
    a = LdlSample(x=np.ones(3), y=np.array([0.5, 0.5]))
    with pytest.raises(ShapeError):
        mixup_mask(a, a, 0.5, np.ones(2))


def test_mixup_rejects_lambda_outside_unit_interval():
    a = LdlSample(x=np.ones(2), y=np.array([0.5, 0.5]))
    with pytest.raises(DatasetError):
        mixup_mask(a, a, 1.5, np.ones(2))


def test_augmentation_degenerate_path_keeps_samples(small_dataset):
    cfg = AugmentConfig(keep_prob=1.0, fixed_lambda=1.0)
    x, y = sample_augmentation(small_dataset.features, small_dataset.targets, cfg, np.random.default_rng(0))
    assert np.array_equal(x, small_dataset.features)
    assert x.shape == small_dataset.features.shape
    np.testing.assert_allclose(y.sum(axis=1), 1.0)


def test_augmentation_mask_density():
    features = np.ones((1000, 10))
    targets = np.full((1000, 2), 0.5)
    cfg = AugmentConfig(keep_prob=0.8, fixed_lambda=1.0)
    x, _ = sample_augmentation(features, targets, cfg, np.random.default_rng(123))
    assert abs(x.mean() - 0.8) < 0.02


def test_disabled_augmentation_is_a_no_op(small_dataset):
    cfg = AugmentConfig(enabled=False)
    x, y = sample_augmentation(small_dataset.features, small_dataset.targets, cfg, np.random.default_rng(0))
    assert x is small_dataset.features and y is small_dataset.targets
