import json
import math

import numpy as np
import pandas as pd
import pytest

from app.core.errors import DatasetError, SchemaError, ShapeError
from app.models.dto import METRIC_NAMES
from app.services import metrics


def _naive(d, p, eps=1e-12):
    """Loop-per-label reference for a single pair."""
    cheb = max(abs(a - b) for a, b in zip(d, p))
    clark_sq, canberra, kl, dot, nd, np_, inter = 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0
    for a, b in zip(d, p):
        if a + b > 0:
            clark_sq += (a - b) ** 2 / (a + b) ** 2
            canberra += abs(a - b) / (a + b)
        if a > 0:
            kl += a * math.log(a / max(b, eps))
        dot += a * b
        nd += a * a
        np_ += b * b
        inter += min(a, b)
    return [cheb, math.sqrt(clark_sq), canberra, kl, dot / math.sqrt(nd * np_), inter]


def test_hand_evaluated_pair():
    out = metrics.evaluate(np.array([1.0, 0.0]), np.array([0.5, 0.5]))
    assert list(out) == list(METRIC_NAMES)
    assert out["chebyshev"] == pytest.approx(0.5)
    assert out["clark"] == pytest.approx(math.sqrt(1 / 9 + 1))
    assert out["clark"] == pytest.approx(1.05409, abs=1e-5)
    assert out["canberra"] == pytest.approx(4 / 3)
    assert out["kl"] == pytest.approx(math.log(2.0))
    assert out["cosine"] == pytest.approx(0.5 / math.sqrt(0.5))
    assert out["intersection"] == pytest.approx(0.5)


def test_identical_distributions_are_ideal():
    rng = np.random.default_rng(0)
    d = rng.dirichlet(np.ones(7), size=50)
    d[0] = [1, 0, 0, 0, 0, 0, 0]
    rows = metrics.evaluate_batch(d, d)
    np.testing.assert_allclose(rows[:, :4], 0.0, atol=1e-15)
    np.testing.assert_allclose(rows[:, 4:], 1.0, atol=1e-12)


def test_random_pairs_agree_with_naive_oracle_and_bounds():
    rng = np.random.default_rng(1)
    n_labels = 6
    alpha = rng.uniform(0.1, 2.0, n_labels)
    d = rng.dirichlet(alpha, size=10_000)
    p = rng.dirichlet(alpha[::-1], size=10_000)
    d[:10, 0] = 0.0
    d[:10] /= d[:10].sum(axis=1, keepdims=True)
    rows = metrics.evaluate_batch(d, p)
    for i in range(0, 10_000, 997):
        np.testing.assert_allclose(rows[i], _naive(d[i], p[i]), rtol=1e-12, atol=1e-12)
    cheb, clark, canberra, kl, cosine, inter = rows.T
    assert ((cheb >= 0) & (cheb <= 1)).all()
    assert ((clark >= 0) & (clark <= math.sqrt(n_labels) + 1e-12)).all()
    assert ((canberra >= 0) & (canberra <= n_labels + 1e-12)).all()
    assert (kl >= -1e-12).all()
    assert ((cosine >= 0) & (cosine <= 1 + 1e-12)).all()
    assert ((inter >= 0) & (inter <= 1 + 1e-12)).all()
    np.testing.assert_allclose(inter + 0.5 * np.abs(d - p).sum(axis=1), 1.0, atol=1e-12)


def test_zero_pairs_contribute_nothing():
    out = metrics.evaluate(np.array([0.0, 0.4, 0.6]), np.array([0.0, 0.6, 0.4]))
    assert out["canberra"] == pytest.approx(0.4)
    assert np.isfinite(out["clark"])


def test_length_mismatch_and_off_simplex_inputs():
    with pytest.raises(ShapeError):
        metrics.evaluate(np.array([0.5, 0.5]), np.array([0.2, 0.3, 0.5]))
    with pytest.raises(DatasetError):
        metrics.evaluate(np.array([0.5, 0.4]), np.array([0.5, 0.5]))
    with pytest.raises(DatasetError):
        metrics.evaluate(np.array([0.5, 0.5]), np.array([1.5, -0.5]))


def _split(value, n=3):
    return np.full((n, len(METRIC_NAMES)), value)


def test_aggregate_two_splits():
    report = metrics.aggregate([_split(0.1), _split(0.3, n=5)], "idr", "toy")
    assert report.chebyshev.mean == pytest.approx(0.2)
    assert report.chebyshev.std == pytest.approx(0.1414, abs=1e-4)
    assert report.n_splits == 2
    assert report.n_samples == 8


def test_aggregate_single_split_has_zero_std():
    report = metrics.aggregate([_split(0.4, n=1)], "idr", "toy")
    assert report.kl.std == 0.0
    assert report.kl.mean == pytest.approx(0.4)


def test_aggregate_is_order_invariant():
    rng = np.random.default_rng(2)
    splits = [rng.random((4, 6)) for _ in range(5)]
    a = metrics.aggregate(splits, "a", "b")
    b = metrics.aggregate(splits[::-1], "a", "b")
    for name in METRIC_NAMES:
        assert getattr(a, name).mean == pytest.approx(getattr(b, name).mean, rel=1e-12)
        assert getattr(a, name).std == pytest.approx(getattr(b, name).std, rel=1e-12)


def test_aggregate_rejects_empty_input():
    with pytest.raises(DatasetError):
        metrics.aggregate([], "idr", "toy")


def test_report_files(tmp_path):
    reports = [metrics.aggregate([_split(0.1), _split(0.3)], "idr", "toy")]
    json_path, csv_path = metrics.write_reports(reports, tmp_path, stem="cv")
    payload = json.loads(json_path.read_text())
    assert payload[0]["algorithm"] == "idr"
    assert payload[0]["schema_version"] == 1
    frame = pd.read_csv(csv_path)
    assert list(frame.columns[:3]) == ["schema_version", "algorithm", "dataset"]
    assert frame.loc[0, "kl_mean"] == pytest.approx(0.2)
    assert metrics.read_reports(json_path)[0] == reports[0]


def test_reading_a_report_from_another_schema_version(tmp_path):
    path = tmp_path / "old.json"
    reports = [metrics.aggregate([_split(0.1)], "idr", "toy")]
    payload = [json.loads(r.model_dump_json()) for r in reports]
    payload[0]["schema_version"] = 99
    path.write_text(json.dumps(payload))
    with pytest.raises(SchemaError):
        metrics.read_reports(path)
