import numpy as np
import pytest

from triguard import metrics as mt
from triguard.attribution import integrated_gradients
from triguard.errors import ContractError, ReportError, UndefinedCorrelationError
from triguard.models import build_mlp, build_simple_cnn


# -- entropy --------------------------------------------------------------
def test_entropy_uniform():
    assert mt.attribution_entropy(np.array([1.0, -1.0, 1.0, -1.0])) == pytest.approx(np.log(4))


def test_entropy_one_hot_clamped():
    assert mt.attribution_entropy(np.array([0.0, 3.0, 0.0])) == 0.0


def test_entropy_all_zero_is_maximal():
    assert mt.attribution_entropy(np.zeros((1, 28, 28))) == pytest.approx(np.log(784))


def test_entropy_range_over_random_maps():
    rng = np.random.default_rng(0)
    for _ in range(500):
        d = int(rng.integers(1, 50))
        a = rng.standard_normal(d) * (rng.random(d) < rng.random())
        h = mt.attribution_entropy(a)
        assert 0.0 <= h <= np.log(d) + 1e-12


def test_entropy_delta_validation():
    with pytest.raises(ContractError):
        mt.attribution_entropy(np.ones(3), delta=0)


# -- drift ----------------------------------------------------------------
def test_drift_examples():
    assert mt.attribution_drift(np.ones(5), np.ones(5)) == 0.0
    assert mt.attribution_drift(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(
        np.sqrt(2), abs=1e-15)


def test_drift_is_a_metric():
    rng = np.random.default_rng(1)
    for _ in range(500):
        a, b, c = rng.standard_normal((3, 2, 4, 4)) * rng.random(3)[:, None, None, None]
        ab, ba = mt.attribution_drift(a, b), mt.attribution_drift(b, a)
        assert ab >= 0 and ab == ba
        assert mt.attribution_drift(a, c) <= ab + mt.attribution_drift(b, c) + 1e-12


def test_drift_shape_mismatch():
    with pytest.raises(ContractError):
        mt.attribution_drift(np.ones(3), np.ones(4))


# -- curves ---------------------------------------------------------------
def test_auc_trapezoid():
    assert mt.auc(mt.Curve([0.0, 1.0], [0.0, 1.0])) == 0.5
    assert mt.auc(mt.Curve([0.0, 0.5, 1.0], [1.0, 0.0, 1.0])) == 0.5


def test_curve_validation():
    with pytest.raises(ContractError):
        mt.Curve([0.0, 0.7], [1, 1])
    with pytest.raises(ContractError):
        mt.Curve([0.0, 0.5, 0.5, 1.0], [1, 1, 1, 1])


def test_constant_model_curves_are_flat():
    model = build_mlp((1, 4, 4), [], 3)
    model = model.with_params({"1.weight": np.zeros((3, 16)), "1.bias": np.array([0.0, 1.0, 2.0])})
    x = np.random.default_rng(2).random((1, 4, 4))
    conf = np.exp(2.0) / np.exp([0.0, 1.0, 2.0]).sum()
    for fn in (mt.deletion_curve, mt.insertion_curve):
        curve = fn(model, x, x, steps=7)
        np.testing.assert_allclose(curve.confidences, conf, rtol=1e-15)
        assert mt.auc(curve) == pytest.approx(conf, rel=1e-14)


@pytest.fixture(scope="module")
def cnn():
    return build_simple_cnn((1, 8, 8), 3, seed=4).astype(np.float32)


def test_curve_endpoints_equal_clean_confidence(cnn):
    rng = np.random.default_rng(3)
    for _ in range(10):
        x = rng.random((1, 8, 8)).astype(np.float32)
        a = integrated_gradients(cnn, x, "zero", 8)
        clean = mt.clean_confidence(cnn, x, a.target)
        dele = mt.deletion_curve(cnn, x, a, steps=11)
        ins = mt.insertion_curve(cnn, x, a, steps=11)
        assert dele.confidences[0] == clean
        assert ins.confidences[-1] == clean
        assert dele.confidences[-1] == mt.clean_confidence(cnn, np.zeros_like(x), a.target)


def test_deletion_removes_in_rank_order():
    # linear model on a single logit pair: deleting the largest-|a| feature first
    model = build_mlp(4, [], 2)
    model = model.with_params({"0.weight": np.array([[4.0, 3.0, 2.0, 1.0], [0.0, 0, 0, 0]]),
                               "0.bias": np.zeros(2)})
    x = np.ones(4)
    curve = mt.deletion_curve(model, x, np.array([1.0, 2.0, 3.0, 4.0]), steps=5, target=0)
    logits = [10.0, 9.0, 7.0, 4.0, 0.0]  # features 3, 2, 1, 0 removed in turn
    np.testing.assert_allclose(curve.confidences, 1 / (1 + np.exp(-np.array(logits))), rtol=1e-14)


def test_rgb_ranking_uses_whole_pixels():
    a = np.zeros((3, 2, 2))
    a[0, 1, 1], a[1, 1, 1], a[2, 0, 0] = 1.0, 1.0, 1.5
    assert mt.pixel_ranking(a)[:2].tolist() == [3, 0]


def test_auc_in_unit_interval(cnn):
    x = np.random.default_rng(4).random((1, 8, 8)).astype(np.float32)
    a = np.random.default_rng(5).standard_normal((1, 8, 8))
    for fn in (mt.deletion_curve, mt.insertion_curve):
        assert 0.0 <= mt.auc(fn(cnn, x, a)) <= 1.0


# -- pearson --------------------------------------------------------------
def test_pearson_examples():
    xs = np.array([0.3, 1.7, 2.2, 5.0])
    assert mt.pearson(xs, 2 * xs) == pytest.approx(1.0, abs=1e-12)
    assert mt.pearson(xs, -xs) == pytest.approx(-1.0, abs=1e-12)
    assert abs(mt.pearson([1, 2, 3], [1, 3, 2]) - 0.5) <= 1e-12


def test_pearson_closed_form():
    xs, ys = [1.0, 2.0, 4.0, 7.0], [2.0, 1.0, 5.0, 4.0]
    # means 3.5 and 3; sum dx*dy = 10, sum dx^2 = 21, sum dy^2 = 10
    assert abs(mt.pearson(xs, ys) - 10 / np.sqrt(21 * 10)) <= 1e-12


def test_pearson_zero_variance():
    with pytest.raises(UndefinedCorrelationError):
        mt.pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(ContractError):
        mt.pearson([1], [2])


# -- report ---------------------------------------------------------------
def run(model="m", dataset="d", **over):
    base = {
        "model": model, "dataset": dataset,
        "accuracy": {"value": 0.9, "n": 10},
        "adversarial": {"error": 0.25, "n": 8},
        "attribution": {"entropy": [4.0], "drift": [1.5], "smoothgrad2": [3.0]},
        "verification": {"ibp": [True], "crown_ibp": [True]},
        "faithfulness": {"deletion": [0.2], "insertion": [0.8]},
    }
    base.update(over)
    return base


def test_single_sample_row():
    (row,) = mt.aggregate_report([run()])
    assert (row.entropy, row.drift, row.smoothgrad2, row.del_auc, row.ins_auc) == (
        4.0, 1.5, 3.0, 0.2, 0.8)
    assert row.formal_verif and row.crown_ibp and row.formal_verif_rate == 1.0


def test_threshold_flags():
    r = run(verification={"ibp": [True, False, False], "crown_ibp": [True, True, False]})
    (row,) = mt.aggregate_report([r])
    assert not row.formal_verif and row.crown_ibp


def test_missing_section_named():
    r = run()
    del r["faithfulness"]
    with pytest.raises(ReportError, match="faithfulness"):
        mt.aggregate_report([r])


def test_csv_header_and_roundtrip():
    rows = mt.aggregate_report([run("a"), run("b", accuracy={"value": 0.123456, "n": 3})])
    text = mt.report_csv(rows)
    lines = text.splitlines()
    assert lines[0] == ("model,dataset,accuracy,adv_error,entropy,drift,smoothgrad2,"
                        "formal_verif,crown_ibp,del_auc,ins_auc")
    assert [ln.split(",")[0] for ln in lines[1:]] == ["a", "b"]
    parsed = mt.parse_report_csv(text)
    assert parsed[1]["accuracy"] == 0.123456 and parsed[0]["formal_verif"] is True
    detail = mt.parse_report_csv(mt.report_csv(rows, detail=True))
    assert detail[1]["n_test"] == 3
    again = mt.report_csv([mt.ReportRow(**{k: v for k, v in p.items()}) for p in detail],
                          detail=True)
    assert again == mt.report_csv(rows, detail=True)


def test_partial_marker():
    text = mt.report_csv(mt.aggregate_report([run()]), partial=True)
    assert text.splitlines()[0].endswith(",status")
    assert text.splitlines()[1].endswith(",partial")
