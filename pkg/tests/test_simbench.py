import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import ndtr

from bcflate import simbench
from bcflate.sampler import ChainConfig
from bcflate.simbench import (
    DgpSpec, MetricsReport, PointEstimates, generate, interval_score, reference_for, run_replications, score,
)

PHI2 = ndtr(2.0) - 0.5


def test_interval_score_examples():
    assert interval_score(-0.1, 0.1, 0.0) == pytest.approx(0.2)
    assert interval_score(0.0, 0.1, -0.05, alpha=0.05) == pytest.approx(2.1)
    assert interval_score(0.3, 0.3, 0.3) == 0.0
    assert interval_score(0.0, 0.1, 0.3, alpha=0.1) == pytest.approx(0.1 + 20 * 0.2)
    with pytest.raises(ValueError):
        interval_score(0.2, 0.1, 0.0)


@pytest.mark.invariant
@settings(max_examples=300, deadline=None)
@given(st.floats(-1, 1), st.floats(0, 1), st.floats(-1, 1), st.floats(0.01, 0.5))
def test_interval_score_formula_and_propriety(lo, width, truth, alpha):
    hi = lo + width
    got = interval_score(lo, hi, truth, alpha)
    expect = width + (2 / alpha) * max(lo - truth, 0) + (2 / alpha) * max(truth - hi, 0)
    assert got == pytest.approx(expect, rel=1e-12, abs=1e-12)
    assert got >= width - 1e-15
    # same width, moved to cover the truth: never worse
    covering = interval_score(truth - width / 2, truth + width / 2, truth, alpha)
    assert covering <= got + 1e-12


def test_spec_validation():
    assert DgpSpec("study1").p == 1 and DgpSpec("study2").p == 25 and DgpSpec("study3").p == 5
    assert DgpSpec("weak").name == "study1_weak"
    for bad in (dict(name="study1", p=2), dict(name="study2", p=1), dict(name="study3", p=4),
                dict(name="study4"), dict(name="study2", support="sphere")):
        with pytest.raises(ValueError):
            DgpSpec(**bad)
    with pytest.raises(ValueError, match="valid: "):
        DgpSpec("nope")


def test_default_supports():
    ds1, _ = generate(DgpSpec("study1", n=5000))
    ds2, _ = generate(DgpSpec("study3", n=5000))
    ds3, _ = generate(DgpSpec("study3", n=5000, support="symmetric"))
    assert ds1.raw.min() < -0.99 and ds1.raw.max() > 0.99
    assert ds2.raw.min() >= 0.0 and ds2.raw.max() <= 1.0
    assert ds3.raw.min() < -0.99
    assert reference_for(DgpSpec("study3")) and not reference_for(DgpSpec("study3", support="symmetric"))


def test_study1_truth():
    ds, truth = generate(DgpSpec("study1", n=2000, seed=1))
    x = ds.raw[:, 0]
    i = int(np.argmin(np.abs(x + 0.5)))
    base = math.sin(6 * x[i]) - x[i]
    assert truth.late[i] == pytest.approx(ndtr(base + 1) - ndtr(base), abs=1e-12)
    # at exactly x = -0.5
    at = simbench.SyntheticTruth(*simbench._study1_constant(np.array([[-0.5]])), c=np.zeros(1))
    ref = math.sin(-3) + 0.5
    assert at.late[0] == pytest.approx(ndtr(ref + 1) - ndtr(ref), abs=1e-15)


def test_study1_compliance_rate():
    ds, truth = generate(DgpSpec("study1", n=100_000, seed=2))
    assert abs(truth.c.mean() - 0.5) < 0.005
    assert np.all(truth.p_comply == 0.5)


@pytest.mark.parametrize("support", ["unit", "symmetric"])
def test_study2_truth_is_plus_minus(support):
    ds, truth = generate(DgpSpec("study2", n=4000, p=3, seed=3, support=support))
    x1 = ds.raw[:, 0]
    assert np.allclose(truth.late[x1 >= 0.5], PHI2, atol=1e-14)
    assert np.allclose(truth.late[x1 < 0.5], -PHI2, atol=1e-14)
    assert PHI2 == pytest.approx(0.4772, abs=1e-4)
    zero = PointEstimates(np.zeros(ds.n), np.zeros(ds.n), np.zeros(ds.n))
    assert score(zero, truth.late)["rmse"] == pytest.approx(math.sqrt(np.mean(truth.late ** 2)), abs=1e-12)
    assert score(zero, truth.late)["rmse"] == pytest.approx(PHI2, abs=1e-12)


@pytest.mark.invariant
@pytest.mark.parametrize("name", ["study1", "weak", "study2", "study3"])
def test_generated_data_invariants(name):
    spec = DgpSpec(name, n=3000, seed=4)
    ds, truth = generate(spec, rep=2)
    again, truth2 = generate(spec, rep=2)
    other, _ = generate(spec, rep=3)
    assert np.array_equal(ds.raw, again.raw) and np.array_equal(ds.y, again.y)
    assert np.array_equal(truth.late, truth2.late)
    assert not np.array_equal(ds.raw, other.raw)
    assert np.array_equal(ds.r, ds.a * truth.c)
    assert np.all(ds.r[ds.a == 0] == 0)
    assert np.all(np.abs(truth.late) <= 1)


@pytest.mark.invariant
@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_metrics_ignore_subject_order(seed):
    rng = np.random.default_rng(seed)
    n = 200
    truth = rng.uniform(-1, 1, n)
    est = truth + rng.normal(0, 0.2, n)
    half = rng.uniform(0, 0.4, n)
    pe = PointEstimates(est, est - half, est + half)
    perm = rng.permutation(n)
    a = score(pe, truth)
    b = score(PointEstimates(est[perm], (est - half)[perm], (est + half)[perm]), truth[perm])
    for k in a:
        assert a[k] == pytest.approx(b[k], rel=1e-12, abs=1e-15)
    assert 0 <= a["coverage"] <= 1 and a["width"] >= 0 and a["interval_score"] >= 0
    assert a["interval_score_scaled"] == pytest.approx(a["interval_score"] * 0.025)


def test_oracle_and_zero_methods():
    rep = run_replications(DgpSpec("study2", n=300, p=2, seed=5), ("oracle", "zero"), n_reps=3)
    agg = rep.aggregate()
    assert agg["oracle"]["rmse"] == 0 and agg["oracle"]["coverage"] == 1 and agg["oracle"]["interval_score"] == 0
    assert agg["zero"]["rmse"] == pytest.approx(PHI2)
    assert agg["zero"]["n_reps"] == 3


def test_replications_are_deterministic_and_resumable(tmp_path):
    spec = DgpSpec("study1", n=150, seed=6)
    cfg = ChainConfig(n_iter=20, n_burn=10, n_chains=2, seed=6)
    full = run_replications(spec, ("bcf_late", "wald_bart"), n_reps=3, cfg=cfg, threads=3, keep_points=True)
    tail = run_replications(spec, ("bcf_late", "wald_bart"), n_reps=1, cfg=cfg, first_rep=2)
    assert [r for r in full.records if r["rep"] == 2] == tail.records
    serial = run_replications(spec, ("bcf_late", "wald_bart"), n_reps=3, cfg=cfg, threads=1)
    assert serial.records == full.records
    agg = full.aggregate()
    assert agg["bcf_late"]["ratio_vs_baseline"]["rmse"] == 1.0
    full.write_json(tmp_path / "m.json")
    full.write_records_csv(tmp_path / "r.csv")
    full.write_points_csv(tmp_path / "p.csv")
    d = json.loads((tmp_path / "m.json").read_text())
    assert d["spec"]["support"] == "symmetric"
    assert d["reference"] == {}  # no published cell at n=150
    assert len((tmp_path / "p.csv").read_text().splitlines()) == 1 + 3 * 2 * 150


def test_failures_are_recorded(monkeypatch):
    def broken(*args):
        raise RuntimeError("boom")

    monkeypatch.setitem(simbench.METHODS, "broken", broken)
    rep = run_replications(DgpSpec("study1", n=50), ("oracle", "broken"), n_reps=2)
    assert len(rep.failures) == 2 and "boom" in rep.failures[0]["error"]
    assert len(rep.records) == 2
    with pytest.raises(ValueError):
        run_replications(DgpSpec("study1", n=50), ("nope",), n_reps=1)


def test_report_shape():
    r = MetricsReport(DgpSpec("study2", n=2000, p=25), ("bcf_late",))
    assert r.to_dict()["reference"]["bcf_late"]["rmse"] == 0.103
