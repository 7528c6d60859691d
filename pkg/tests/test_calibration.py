import math

import numpy as np
import pytest
from scipy.optimize import minimize

import oracles
from fusebench import metrics
from fusebench.calibration import (
    CllrObjective, FusionParams, apply_fusion, apply_lr, build_features, calibrate, feature_layout,
    fuse_with_qualities, load_params, save_params, sum_fuse, train_cllr_lr,
)
from fusebench.core import DataError, ScoreTable, SystemScore, TrialRecord


def naive_objective(theta, x, y, prior):
    """Direct transcription of the prior-weighted cross-entropy, no ridge."""
    tau = math.log(prior / (1 - prior))
    z = x @ theta[:-1] + theta[-1] + tau
    tar, non = z[y], z[~y]
    return prior * np.mean(np.logaddexp(0, -tar)) + (1 - prior) * np.mean(np.logaddexp(0, non))


def gauss_scores(rng, n_tar, n_non, dim=1, gap=2.0):
    x = np.vstack([rng.normal(gap / 2, 1, (n_tar, dim)), rng.normal(-gap / 2, 1, (n_non, dim))])
    y = np.r_[np.ones(n_tar, bool), np.zeros(n_non, bool)]
    return x, y


def test_matches_generic_optimizer():
    rng = np.random.default_rng(0)
    x, y = gauss_scores(rng, 80, 400, dim=3)
    res = train_cllr_lr(x, y, 0.1, ridge=0.0)
    assert res.converged
    ref = minimize(naive_objective, np.zeros(4), args=(x, y, 0.1), method="BFGS", options={"gtol": 1e-10})
    theta = np.r_[res.w, res.d]
    assert naive_objective(theta, x, y, 0.1) <= ref.fun + 1e-10
    np.testing.assert_allclose(theta, ref.x, atol=1e-4)


def test_value_matches_naive_transcription():
    rng = np.random.default_rng(1)
    x, y = gauss_scores(rng, 20, 30, dim=2)
    obj = CllrObjective(x, y, 0.3, 0.0)
    for _ in range(5):
        theta = rng.normal(size=3)
        assert obj.value(theta) == pytest.approx(naive_objective(theta, x, y, 0.3), rel=1e-12)


def test_gradient_and_hessian_finite_differences():
    rng = np.random.default_rng(2)
    x, y = gauss_scores(rng, 15, 25, dim=3)
    obj = CllrObjective(x, y, 0.05, 0.01)
    for _ in range(5):
        theta = rng.normal(size=4)
        g = oracles.central_diff(obj.value, theta, 1e-6)
        assert oracles.rel_err(obj.gradient(theta), g) < 1e-6
        h = np.vstack([oracles.central_diff(lambda t, i=i: obj.gradient(t)[i], theta, 1e-6) for i in range(4)])
        assert oracles.rel_err(obj.hessian(theta), h) < 1e-6


def test_objective_convex_along_lines():
    rng = np.random.default_rng(3)
    x, y = gauss_scores(rng, 30, 60, dim=2)
    obj = CllrObjective(x, y, 0.05, 0.0)
    for _ in range(50):
        a, b = rng.normal(size=3) * 3, rng.normal(size=3) * 3
        t = rng.random()
        assert obj.value(t * a + (1 - t) * b) <= t * obj.value(a) + (1 - t) * obj.value(b) + 1e-12
        assert np.all(np.linalg.eigvalsh(obj.hessian(a)) >= -1e-12)


@pytest.mark.parametrize("alpha", [0.1, 4.0])
def test_scale_invariance_of_calibrated_output(alpha):
    rng = np.random.default_rng(4)
    x, y = gauss_scores(rng, 100, 500)
    r1 = train_cllr_lr(x, y, ridge=0.0)
    r2 = train_cllr_lr(alpha * x, y, ridge=0.0)
    np.testing.assert_allclose(apply_lr(r1.w, r1.d, x), apply_lr(r2.w, r2.d, alpha * x), atol=1e-8)


def test_separable_data_stays_finite():
    x = np.r_[1.0, 2.0, 3.0, -1.0, -2.0, -3.0]
    y = x > 0
    res = train_cllr_lr(x, y)
    assert np.all(np.isfinite(res.w)) and math.isfinite(res.d)
    assert res.w[0] > 0


def test_needs_both_classes():
    with pytest.raises(DataError):
        train_cllr_lr([1.0, 2.0], [True, True])


def test_calibration_reduces_act_c():
    rng = np.random.default_rng(5)
    x, y = gauss_scores(rng, 1000, 9000, gap=3.0)
    x = 0.3 * x + 2.0
    res = train_cllr_lr(x, y)
    raw_t, raw_n = x[y, 0], x[~y, 0]
    cal = apply_lr(res.w, res.d, x)
    assert metrics.act_c(cal[y], cal[~y]) < metrics.act_c(raw_t, raw_n)
    assert metrics.cllr(cal[y], cal[~y]) < metrics.cllr(raw_t, raw_n)


def _table(n=300, seed=6):
    rng = np.random.default_rng(seed)
    recs = []
    for i in range(n):
        tgt = i % 5 == 0
        qa, qb = rng.random(2)
        sa = rng.normal(2 * qa if tgt else 0, 1)
        sb = rng.normal(1.5 if tgt else 0, 1)
        recs.append(TrialRecord(f"e{i}", f"t{i}", "target" if tgt else "nontarget", {
            "a": SystemScore(float(sa), float(qa), float(rng.random())),
            "b": SystemScore(float(sb), float(rng.random()), float(rng.random())),
        }))
    return ScoreTable(recs, ("a", "b"))


def test_feature_layout_order():
    assert feature_layout(("a", "b"), {"a": True, "b": True}) == [
        ("a", "a"), ("b", "a"), ("a", "b"), ("a", "c"), ("b", "b"), ("b", "c")]
    assert feature_layout(("a", "b"), {"b": True}) == [("a", "a"), ("b", "a"), ("b", "b"), ("b", "c")]


def test_fusion_params_round_trip_and_reapply(tmp_path):
    table = _table()
    params, fused = fuse_with_qualities(table, use_q={"a": True})
    p = str(tmp_path / "fusion.tsv")
    save_params(params, p)
    back = load_params(p)
    assert back.coef == params.coef and back.offset == params.offset and back.prior == params.prior
    again = apply_fusion(back, table)
    assert [r.systems["fused"].score for r in again] == [r.systems["fused"].score for r in fused]


def test_fusion_coefficients_in_params():
    params, fused = fuse_with_qualities(_table(), use_q={"a": True})
    assert params.coef["b"][1:] == (0.0, 0.0)
    x = build_features(_table(), {"a": True})
    manual = x @ np.array([params.coef["a"][0], params.coef["b"][0], params.coef["a"][1], params.coef["a"][2]])
    np.testing.assert_allclose([r.systems["fused"].score for r in fused], manual + params.offset, atol=1e-12)


def test_missing_quality_is_error():
    recs = [TrialRecord("e", "t", "target", {"a": SystemScore(1.0)}),
            TrialRecord("e2", "t", "nontarget", {"a": SystemScore(0.0)})]
    with pytest.raises(DataError, match="qualities"):
        fuse_with_qualities(ScoreTable(recs, ("a",)), use_q={"a": True})


def test_apply_fusion_missing_system():
    with pytest.raises(DataError):
        apply_fusion(FusionParams({"zzz": (1.0, 0.0, 0.0)}), _table())


def test_sum_fuse():
    table = _table(10)
    s = sum_fuse(table)
    for r, f in zip(table, s):
        assert f.systems["sum"].score == r.systems["a"].score + r.systems["b"].score


def test_calibrate_single_system():
    params = calibrate(_table(), "b")
    assert set(params.coef) == {"b"}
    assert params.coef["b"][0] > 0


def test_symmetric_rows_zero_offset():
    rng = np.random.default_rng(7)
    s = rng.normal(1.0, 1.0, 100)
    x = np.r_[s, -s]
    y = np.r_[np.ones(100, bool), np.zeros(100, bool)]
    assert abs(train_cllr_lr(x, y, prior=0.5).d) <= 1e-6


def test_matches_grid_search():
    rng = np.random.default_rng(8)
    x = np.r_[rng.normal(1, 1, 200), rng.normal(-1, 1, 200)]
    y = np.r_[np.ones(200, bool), np.zeros(200, bool)]
    res = train_cllr_lr(x, y)
    obj = CllrObjective(x, y, 0.05, 1e-6)
    # coarse grid, then a fine grid around the coarse argmin
    w0, d0 = 0.0, 0.0
    for span, step in ((5.0, 0.05), (0.1, 0.0005)):
        ws = np.arange(w0 - span, w0 + span + step / 2, step)
        ds = np.arange(d0 - span, d0 + span + step / 2, step)
        vals = np.array([[obj.value(np.array([w, d])) for d in ds] for w in ws])
        i, j = np.unravel_index(np.argmin(vals), vals.shape)
        w0, d0 = ws[i], ds[j]
    assert abs(res.w[0] - w0) <= 1e-3 and abs(res.d - d0) <= 1e-3


def test_separable_converges():
    x = np.r_[1.0, 2.0, -1.0, -2.0]
    res = train_cllr_lr(x, x > 0, ridge=1e-6)
    assert res.converged


def test_apply_lr_examples():
    np.testing.assert_array_equal(apply_lr([0.0], 1.7, [1.0, -3.0, 8.0]), [1.7, 1.7, 1.7])
    assert apply_lr([2.0, -1.0], 0.5, [[1.0, 3.0]])[0] == -0.5
    x = np.array([[0.2, 0.3], [1.0, -1.0]])
    np.testing.assert_array_equal(apply_lr([1.0, 1.0], 0.0, x), x.sum(axis=1))


def test_sum_examples():
    recs = [TrialRecord("e", "t1", None, {"a": SystemScore(0.2), "b": SystemScore(0.3)}),
            TrialRecord("e", "t2", None, {"a": SystemScore(1.0), "b": SystemScore(-1.0)})]
    out = sum_fuse(ScoreTable(recs, ("a", "b")))
    assert [r.systems["sum"].score for r in out] == [0.5, 0.0]
    one = sum_fuse(ScoreTable([TrialRecord("e", "t", None, {"a": SystemScore(0.7)})], ("a",)))
    assert one.records[0].systems["sum"].score == 0.7


def test_feature_lengths():
    table = _table(20)
    assert build_features(table, {}).shape == (20, 2)
    assert build_features(table, {"a": True, "b": True}).shape == (20, 6)
