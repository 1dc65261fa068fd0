from __future__ import annotations

import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from tempee.errors import ConfigError, ContractError
from tempee.metrics import (
    ContingencyTable,
    ConvPyramid,
    aggregate_reports,
    categorical_scores,
    contingency,
    mse,
    perceptual_distance,
    psnr,
    ssim,
    timewise_report,
)

from oracles import contingency_loop, mse_loop, psnr_loop, scores_loop, ssim_loop

frames16 = hnp.arrays(np.float64, (16, 16), elements=st.integers(0, 255).map(float))


def test_mse_examples():
    a = np.random.default_rng(0).integers(0, 200, (3, 4, 4)).astype(float)
    assert mse(a, a) == 0.0
    assert mse(a + 1, a) == 1.0
    assert mse(np.zeros((2, 2)), np.array([[2.0, 0], [0, 0]])) == 1.0
    with pytest.raises(ContractError):
        mse(np.zeros(2), np.zeros(3))


def test_psnr_examples():
    a = np.zeros((4, 4))
    assert psnr(a, a) == math.inf
    assert psnr(a, a + 255) == pytest.approx(0.0)
    assert psnr(a, a + math.sqrt(650.25)) == pytest.approx(20.0)


def test_ssim_examples():
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 255, (12, 12))
    y = rng.uniform(0, 255, (12, 12))
    assert ssim(x, x) == pytest.approx(1.0)
    assert ssim(x, y) == pytest.approx(ssim(y, x))
    a, b = 40.0, 90.0
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    expect = (2 * a * b + c1) * c2 / ((a * a + b * b + c1) * c2)
    assert ssim(np.full((9, 9), a), np.full((9, 9), b)) == pytest.approx(expect)
    assert ssim(np.full((9, 9), a), np.full((9, 9), b), window=None) == pytest.approx(expect)
    with pytest.raises(ConfigError):
        ssim(np.zeros((4, 4)), np.zeros((4, 4)))


@given(frames16, frames16)
def test_ssim_bounded_and_symmetric(x, y):
    v = ssim(x, y)
    assert -1.0 <= v <= 1.0 + 1e-12
    assert v == pytest.approx(ssim(y, x))


@pytest.mark.parametrize("seed", range(3))
def test_image_metrics_match_loops(seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 256, (16, 16)).astype(float)
    b = rng.integers(0, 256, (16, 16)).astype(float)
    assert abs(mse(a, b) - mse_loop(a, b)) < 1e-6
    assert abs(psnr(a, b) - psnr_loop(a, b)) < 1e-6
    assert abs(ssim(a, b) - ssim_loop(a, b)) < 1e-6


def test_perceptual_distance_basics():
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 255, (32, 32))
    y = rng.uniform(0, 255, (32, 32))
    assert perceptual_distance(x, x) == 0.0
    assert perceptual_distance(x, y) > 0
    assert perceptual_distance(x, y, ConvPyramid(weights=(0.0, 0.0, 0.0))) == 0.0
    assert perceptual_distance(x, y) == perceptual_distance(x, y, ConvPyramid())
    with pytest.raises(ContractError):
        ConvPyramid(channels=(4, 4), weights=(1.0,))


def test_perceptual_triangle_inequality():
    rng = np.random.default_rng(1)
    for _ in range(50):
        x, y, z = (rng.uniform(0, 255, (32, 32)) for _ in range(3))
        assert perceptual_distance(x, z) <= perceptual_distance(x, y) + perceptual_distance(y, z) + 1e-9


def test_contingency_examples():
    t = contingency(np.full((3, 3), 100.0), np.full((3, 3), 100.0), 10)
    assert t.fn == 0 and t.fp == 0 and t.tp == 9
    t = contingency(np.zeros((2, 2)), np.full((2, 2), 255.0), 10)
    assert t.tp == 0 and t.fn == 4
    hi = 255.0
    t = contingency(np.array([[hi, 0], [hi, 0]]), np.array([[hi, hi], [0, 0]]), 30)
    assert (t.tp, t.fn, t.fp, t.tn) == (1, 1, 1, 1)


def test_contingency_threshold_is_inclusive():
    thr = 18  # floor(255 * 5 / 70 + 0.5)
    t = contingency(np.array([[thr - 1, thr]]), np.array([[thr, thr]]), 5)
    assert (t.tp, t.fn) == (1, 1)


@given(frames16, frames16, st.floats(0, 70), st.floats(0, 70))
def test_binarization_monotone(a, b, t1, t2):
    lo, hi = sorted((t1, t2))
    c_lo, c_hi = contingency(a, b, lo), contingency(a, b, hi)
    assert c_hi.tp + c_hi.fp <= c_lo.tp + c_lo.fp
    assert c_lo.total == a.size


def test_score_examples():
    perfect = categorical_scores(ContingencyTable(5, 0, 0, 3, 10))
    assert perfect["pod"] == 1 and perfect["csi"] == 1 and perfect["far"] == 0
    s = categorical_scores(ContingencyTable(4, 2, 2, 1, 10))
    assert s["pod"] == pytest.approx(2 / 3)
    assert s["csi"] == pytest.approx(0.5)
    assert s["far"] == pytest.approx(1 / 3)
    assert s["ets"] == pytest.approx(4 / 7)
    assert math.isnan(categorical_scores(ContingencyTable(0, 3, 0, 1, 10))["far"])
    assert categorical_scores(ContingencyTable(4, 2, 2, 1, 10), far_mode="printed")["far"] == pytest.approx(2 / 3)
    std = categorical_scores(ContingencyTable(4, 2, 2, 1, 10), ets_mode="standard")["ets"]
    hr = 6 * 6 / 9
    assert std == pytest.approx((4 - hr) / (8 - hr))
    with pytest.raises(ConfigError):
        categorical_scores(ContingencyTable(1, 1, 1, 1, 10), far_mode="other")


@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_score_ranges(tp, fn, fp, tn):
    if tp + fn + fp + tn == 0:
        return
    t = ContingencyTable(tp, fn, fp, tn, 10)
    s = categorical_scores(t)
    for k in ("pod", "csi", "far"):
        assert math.isnan(s[k]) or 0 <= s[k] <= 1
    if not math.isnan(s["csi"]) and not math.isnan(s["pod"]):
        assert s["csi"] <= s["pod"]
    e = categorical_scores(t, ets_mode="standard")["ets"]
    assert math.isnan(e) or -1 / 3 - 1e-12 <= e <= 1 + 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_contingency_matches_loop(seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 256, (16, 16)).astype(float)
    b = rng.integers(0, 256, (16, 16)).astype(float)
    for tau in (5, 10, 20, 30, 40):
        t = contingency(a, b, tau)
        ref = contingency_loop(a, b, tau)
        assert (t.tp, t.fn, t.fp, t.tn) == ref
        got, exp = categorical_scores(t), scores_loop(*ref)
        for k in exp:
            assert (math.isnan(got[k]) and math.isnan(exp[k])) or abs(got[k] - exp[k]) < 1e-6


def test_report_identical_inputs():
    rng = np.random.default_rng(0)
    x = rng.integers(0, 256, (3, 32, 32)).astype(float)
    r = timewise_report(x, x)
    assert r.k == 3 and r.lead_minutes == [6, 12, 18]
    assert np.all(r.image["mse"] == 0)
    for tau in r.taus:
        assert np.all(r.categorical[(tau, "csi")] == 1)
        assert np.all(r.categorical[(tau, "pod")] == 1)
        assert np.all(r.categorical[(tau, "far")] == 0)


def test_report_single_lead_and_averages():
    rng = np.random.default_rng(1)
    p = rng.integers(0, 256, (1, 16, 16)).astype(float)
    t = rng.integers(0, 256, (1, 16, 16)).astype(float)
    r = timewise_report(p, t, perceptual=False)
    assert r.image["mse"][0] == mse(p[0], t[0])
    assert r.image["ssim"][0] == ssim(p[0], t[0])
    p = rng.integers(0, 256, (4, 16, 16)).astype(float)
    t = rng.integers(0, 256, (4, 16, 16)).astype(float)
    r = timewise_report(p, t, perceptual=False)
    for tau in r.taus:
        vals = r.categorical[(tau, "csi")]
        assert r.average("csi", tau) == pytest.approx(np.nanmean(vals))
    with pytest.raises(ContractError):
        timewise_report(p, t[:3])


def test_report_serialization():
    rng = np.random.default_rng(2)
    p = rng.integers(0, 256, (2, 16, 16)).astype(float)
    t = rng.integers(0, 256, (2, 16, 16)).astype(float)
    r = timewise_report(p, t, taus=(5, 20), perceptual=False)
    rows = list(csv.DictReader(io.StringIO(r.to_csv())))
    # (3 image + 2 taus * 4 scores) metrics, each with 2 leads + 1 average
    assert len(rows) == (3 + 8) * 3
    plot = r.plot_csv().splitlines()
    assert plot[0].startswith("lead_minutes,") and plot[1].startswith("6,") and plot[2].startswith("12,")
    assert "POD" in r.to_text()


def test_aggregate_reports():
    rng = np.random.default_rng(3)
    reports = []
    for _ in range(3):
        p = rng.integers(0, 256, (2, 16, 16)).astype(float)
        t = rng.integers(0, 256, (2, 16, 16)).astype(float)
        reports.append(timewise_report(p, t, perceptual=False))
    agg = aggregate_reports(reports)
    assert np.allclose(agg.image["mse"], np.mean([r.image["mse"] for r in reports], axis=0))
    with pytest.raises(ContractError):
        aggregate_reports([])
