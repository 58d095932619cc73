import math

import numpy as np
import pytest
from hypothesis import given, strategies as st, HealthCheck, settings
from hypothesis.extra.numpy import arrays

from progdit import metrics as M
from progdit import report as R

from oracles import brute_ssim, t_test_p


def test_ssim_matches_bruteforce_on_50_pairs():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(50):
        a = rng.random((24, 24))
        b = np.clip(a + rng.normal(0, rng.uniform(0.01, 0.5), a.shape), 0, 1)
        worst = max(worst, abs(M.ssim(a, b) - brute_ssim(a, b)))
    assert worst < 1e-9


def test_ssim_identity_and_symmetry(rng):
    a, b = rng.random((16, 16)), rng.random((16, 16))
    assert M.ssim(a, a) == 1.0
    assert M.ssim(a, b) == M.ssim(b, a)
    assert M.ssim(a, b) < 0.5


@settings(suppress_health_check=[HealthCheck.too_slow])
@given(arrays(np.float64, (12, 12), elements=st.floats(0, 1)), arrays(np.float64, (12, 12), elements=st.floats(0, 1)))
def test_property_ssim_bounded_symmetric(a, b):
    s = M.ssim(a, b)
    assert -1.0 <= s <= 1.0
    assert s == M.ssim(b, a)


def test_ssim_small_image_pads_with_warning(rng):
    a = rng.random((6, 6))
    with pytest.warns(RuntimeWarning):
        assert -1 <= M.ssim(a, a * 0.9) <= 1


def test_shape_mismatch():
    with pytest.raises(M.MetricError):
        M.ssim(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(M.MetricError):
        M.mse(np.zeros(3), np.zeros(4))


def test_psnr_examples():
    assert abs(M.psnr_from_mse(0.0024) - 26.20) < 0.01
    assert M.psnr_from_mse(0.01) == pytest.approx(20.0, abs=1e-12)
    assert M.psnr(np.ones(4), np.ones(4)) == math.inf
    a = np.zeros(100)
    b = np.full(100, 0.1)
    assert M.psnr(a, b) == pytest.approx(20.0)
    with pytest.raises(M.MetricError):
        M.psnr_from_mse(-1.0)


def test_ttest_matches_cdf_oracle():
    rng = np.random.default_rng(3)
    for n in (2, 3, 5, 12, 40, 200):
        for shift in (-0.3, 0.0, 0.1, 0.8):
            x = rng.normal(shift, 1, n)
            y = rng.normal(0, 1, n)
            for direction in ("greater", "less"):
                res = M.paired_one_sided_ttest(x, y, direction)
                assert abs(res.p - t_test_p(x - y, direction)) < 1e-6
                assert res.df == n - 1


def test_ttest_degenerate():
    r = M.paired_one_sided_ttest([1.0, 2.0], [0.0, 1.0])
    assert r.degenerate and r.t == math.inf and r.p == 0.0
    assert M.paired_one_sided_ttest([1.0, 2.0], [0.0, 1.0], "less").p == 1.0
    r = M.paired_one_sided_ttest([1.0, 1.0], [1.0, 1.0])
    assert r.degenerate and r.p == 0.5
    with pytest.raises(M.MetricError):
        M.paired_one_sided_ttest([1.0], [0.0])
    with pytest.raises(M.MetricError):
        M.paired_one_sided_ttest([1.0, 2.0], [0.0])
    with pytest.raises(M.MetricError):
        M.paired_one_sided_ttest([1.0, 2.0], [0.0, 1.0], "two-sided")


def test_ttest_directions_complement(rng):
    x, y = rng.random(20), rng.random(20)
    g = M.paired_one_sided_ttest(x, y, "greater").p
    le = M.paired_one_sided_ttest(x, y, "less").p
    assert g + le == pytest.approx(1.0, abs=1e-12)


def test_sample_validation():
    with pytest.raises(M.MetricError):
        M.MetricSample("p", "s", 1.5, 10.0, 0.1, 0.0, "CN->CN")
    with pytest.raises(M.MetricError):
        M.MetricSample("p", "s", 0.5, 10.0, -0.1, 0.0, "CN->CN")


# -- report ---------------------------------------------------------------------------
def _samples(rng, n=30):
    groups = ["CN->CN", "CN->MCI", "MCI->AD"]
    out = []
    for i in range(n):
        d = float(rng.choice([0, 6, 12, 24, 48]))
        out.append(M.MetricSample(f"p{i}", f"s{i // 3}", float(rng.uniform(0.5, 0.95)),
                                  float(rng.uniform(20, 30)), float(rng.uniform(0.001, 0.01)), d,
                                  groups[i % 3]))
    return out


def test_format_cell():
    assert R.format_cell(0.87391, 0.07612) == "0.8739 ± 0.0761"
    assert R.format_cell(29.321, 1.5, digits=2) == "29.32 ± 1.50"
    assert R.format_cell(math.nan, math.nan, 0) == "-"


def test_stratified_counts_and_empty_cells(rng):
    s = _samples(rng)
    rep = R.stratified_report(s, "group")
    assert sum(r.n_slices for r in rep.rows) == rep.total == len(s)
    assert rep.row("CN->AD").n_slices == 0
    text = R.to_text(rep)
    line = next(ln for ln in text.splitlines() if ln.startswith("CN->AD"))
    assert "-" in line.split()[1:]
    ssim_cn = [x.ssim for x in s if x.progression_group == "CN->CN"]
    assert rep.row("CN->CN").cells["ssim"].mean == pytest.approx(np.mean(ssim_cn))
    assert rep.row("CN->CN").cells["ssim"].sd == pytest.approx(np.std(ssim_cn, ddof=1))
    by_int = R.stratified_report(s, "interval")
    assert [r.label for r in by_int.rows] == list(R.INTERVAL_LABELS)
    assert sum(r.n_slices for r in by_int.rows) == len(s)


def test_best_markers_and_infinite_psnr(rng):
    s = _samples(rng, 6)
    s.append(M.MetricSample("px", "sx", 1.0, math.inf, 0.0, 0.0, "AD->AD"))
    rep = R.stratified_report(s, "group")
    assert rep.inf_psnr == 1
    text = R.to_text(rep)
    assert "infinite PSNR" in text
    assert text.count("**") >= 3
    best = max((r for r in rep.rows if r.cells["ssim"].n), key=lambda r: r.cells["ssim"].mean)
    assert any(ln.startswith(best.label) and "1.0000 ± 0.0000**" in ln for ln in text.splitlines())


def test_comparison_report_p_values(rng):
    a = _samples(rng, 20)
    worse = [M.MetricSample(x.pair_id, x.subject_id, x.ssim - 0.1, x.psnr_db - 1, x.mse * 2,
                            x.delta_t, x.progression_group) for x in a]
    rep = R.comparison_report({"model": a, "baseline": worse}, "model")
    p = rep.row("baseline").p_values
    assert p["ssim"] < 1e-10 and p["mse"] < 1e-3
    assert rep.total == 40
    with pytest.raises(ValueError):
        R.comparison_report({"model": a, "other": worse[:-1]}, "model")


def test_csv_outputs(rng):
    s = _samples(rng, 9)
    csv_text = R.to_csv(R.stratified_report(s, "group"))
    lines = csv_text.splitlines()
    assert lines[0].startswith("table,row,metric")
    assert len(lines) == 1 + 3 * 6
    assert len(R.samples_csv(s).splitlines()) == 10
