import numpy as np
import pytest
from scipy.stats import mannwhitneyu

from ..calibration import attention_band_report
from ..calibration import AttentionBandReport
from ..calibration import band_mean
from ..calibration import bin_edges
from ..calibration import bin_stats
from ..calibration import BinStats
from ..calibration import confidence_delta_map
from ..calibration import dice_score
from ..calibration import ece
from ..calibration import ece_iou_scatter
from ..calibration import expected_calibration_error
from ..calibration import image_metrics
from ..calibration import iou
from ..calibration import mann_whitney_u
from ..calibration import read_reliability_csv
from ..calibration import reliability_export
from ..network import build_network
from ..network import forward
from ..network import NetworkConfig
from ..synth import boundary_band
from ..utils import read_csv


def test_iou_examples():
    a = np.zeros((4, 4), dtype=bool)
    a[:2, :2] = True
    assert iou(a, a) == 1.0
    b = np.zeros((4, 4), dtype=bool)
    b[2:, 2:] = True
    assert iou(a, b) == 0.0
    half = np.zeros((4, 4), dtype=bool)
    half[0, :2] = True
    assert iou(half, a) == 0.5
    assert iou(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    with pytest.raises(ValueError, match="shapes"):
        iou(np.zeros((3, 3)), np.zeros((3, 4)))


@pytest.mark.parametrize("seed", range(10))
def test_iou_properties(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(2, 6, 6)) > 0.6
    assert iou(a, b) == iou(b, a)
    assert 0 <= iou(a, b) <= 1
    assert (iou(a, b) == 1.0) == bool(np.array_equal(a, b))


def test_dice_score():
    a = np.array([1, 1, 0, 0])
    assert dice_score(a, np.array([1, 0, 0, 0])) == pytest.approx(2 / 3)
    assert dice_score(np.zeros(4), np.zeros(4)) == 1.0


def test_bin_stats_examples():
    stats = bin_stats(np.ones((4, 4)), np.ones((4, 4)))
    assert len(stats) == 5
    assert (stats[-1].count, stats[-1].acc, stats[-1].conf) == (16, 1.0, 1.0)
    assert all(s.count == 0 and s.acc == 0 and s.conf == 0 for s in stats[:-1])

    truth = np.array([1] * 8 + [0] * 2)
    stats = bin_stats(np.full(10, 0.9), truth)
    assert stats[4].count == 10
    assert stats[4].acc == pytest.approx(0.8)
    assert stats[4].conf == pytest.approx(0.9)

    stats = bin_stats(np.array([0.2]), np.array([0]))
    assert (stats[3].lo, stats[3].hi) == pytest.approx((0.8, 0.9))
    assert stats[3].count == 1 and stats[3].acc == 1.0


def test_bin_stats_rejects_bad_input():
    with pytest.raises(ValueError, match="n_bins"):
        bin_stats(np.ones(3), np.ones(3), n_bins=0)
    with pytest.raises(ValueError, match="shapes"):
        bin_stats(np.ones(3), np.ones(4))


def test_ece_examples():
    stats = [BinStats(0.5, 1.0, 10, 0.7, 0.7), BinStats(0.5, 1.0, 0, 0.0, 0.0)]
    assert ece(stats, 10) == 0.0
    assert ece([BinStats(0.9, 1.0, 20, 0.8, 0.9)], 20) == pytest.approx(0.1)
    with pytest.raises(ValueError, match="zero"):
        ece([], 0)
    with pytest.raises(ValueError):
        ece(stats, 11)


def _brute_force_ece(probs, truth, n_bins=5):
    edges = bin_edges(n_bins)
    counts = np.zeros(n_bins)
    correct = np.zeros(n_bins)
    conf_sum = np.zeros(n_bins)
    for p, y in zip(probs.ravel(), truth.ravel()):
        c = max(p, 1 - p)
        m = next(
            k
            for k in range(n_bins)
            if edges[k] <= c < edges[k + 1] or (k == n_bins - 1 and c == edges[-1])
        )
        counts[m] += 1
        correct[m] += (p >= 0.5) == bool(y)
        conf_sum[m] += c
    total = 0.0
    for m in range(n_bins):
        if counts[m]:
            gap = abs(correct[m] / counts[m] - conf_sum[m] / counts[m])
            total += counts[m] / probs.size * gap
    return total


@pytest.mark.parametrize("seed", range(100))
def test_ece_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    size = int(rng.integers(2, 17))
    probs = rng.uniform(size=(size, size))
    probs[rng.uniform(size=probs.shape) < 0.1] = rng.choice([0.0, 0.5, 0.8, 1.0])
    truth = rng.uniform(size=(size, size)) > 0.5
    value = expected_calibration_error(probs, truth)
    assert abs(value - _brute_force_ece(probs, truth)) <= 1e-12
    assert 0 <= value <= 1
    stats = bin_stats(probs, truth)
    assert sum(s.count for s in stats) == probs.size


def test_ece_reaches_above_one_half_when_confidently_wrong():
    probs = np.full((4, 4), 0.9)
    value = expected_calibration_error(probs, np.zeros((4, 4), dtype=bool))
    assert value == pytest.approx(0.9)


def test_calibrated_stream_has_small_ece():
    rng = np.random.default_rng(0)
    probs = rng.uniform(size=100_000)
    truth = rng.uniform(size=probs.size) < probs
    assert expected_calibration_error(probs, truth) <= 0.02


def test_image_metrics():
    truth = np.zeros((4, 4))
    truth[:2] = 1
    prob = np.where(truth > 0, 1.0, 0.0)
    metrics = image_metrics(prob, truth)
    assert metrics == (1.0, 1.0, 0.0)


def test_reliability_export(tmp_path):
    rng = np.random.default_rng(0)
    stats = bin_stats(rng.uniform(size=(16, 16)), rng.uniform(size=(16, 16)) > 0.5)
    csv_path, svg_path = reliability_export(stats, str(tmp_path / "rel"))
    with open(csv_path) as f:
        lines = f.read().splitlines()
    assert lines[0] == "bin_lo,bin_hi,count,acc,conf,gap"
    assert len(lines) == 6
    assert read_reliability_csv(csv_path) == stats
    with open(svg_path) as f:
        assert "<svg" in f.read()

    perfect = [BinStats(0.5 + m / 10, 0.6 + m / 10, 3, 0.55, 0.55) for m in range(5)]
    csv_path, _ = reliability_export(perfect, str(tmp_path / "perfect"))
    np.testing.assert_array_equal(read_csv(csv_path)["gap"], 0.0)


def test_svg_export_is_reproducible(tmp_path):
    stats = bin_stats(np.linspace(0, 1, 50), np.arange(50) % 2)
    _, first = reliability_export(stats, str(tmp_path / "a"))
    _, second = reliability_export(stats, str(tmp_path / "b"))
    with open(first, "rb") as f1, open(second, "rb") as f2:
        assert f1.read() == f2.read()


def test_ece_iou_scatter(tmp_path):
    points = {
        "MM": ([0.5, 0.6, 0.7, 0.8], [0.05, 0.04, 0.03, 0.01]),
        "Sup": ([0.4], [0.1]),
    }
    csv_path, svg_path = ece_iou_scatter(points, str(tmp_path / "scatter"))
    table = read_csv(csv_path)
    assert list(table["model"]) == ["MM"] * 4 + ["Sup"]
    np.testing.assert_array_equal(table["iou"], [0.5, 0.6, 0.7, 0.8, 0.4])
    assert svg_path.endswith(".svg")


def test_confidence_delta_examples():
    before = np.random.default_rng(0).uniform(0.5, 1.0, size=(8, 8))
    summary = confidence_delta_map(before, before)
    np.testing.assert_array_equal(summary.delta, 0.0)
    assert np.isnan(summary.band_mean)

    summary = confidence_delta_map(before, before + 0.1)
    np.testing.assert_allclose(summary.delta, 0.1)
    assert summary.elsewhere_mean == pytest.approx(0.1)

    with pytest.raises(ValueError, match="shapes"):
        confidence_delta_map(before, before[:4])


def test_confidence_delta_band_split():
    mask = np.zeros((12, 12), dtype=np.uint8)
    mask[4:8, 4:8] = 1
    band = boundary_band(mask, 1)
    before = np.full((12, 12), 0.9)
    after = np.where(band, 0.7, 0.9)
    summary = confidence_delta_map(before, after, mask)
    assert summary.band_mean == pytest.approx(-0.2)
    assert summary.elsewhere_mean == pytest.approx(0.0)

    batched = confidence_delta_map(
        before[None, None], after[None, None], mask[None, None]
    )
    assert batched.band_mean == pytest.approx(-0.2)


def test_band_mean():
    mask = np.zeros((12, 12), dtype=np.uint8)
    mask[4:8, 4:8] = 1
    values = np.where(boundary_band(mask, 1), 0.25, 1.0)
    assert band_mean(values, mask) == 0.25
    assert np.isnan(band_mean(values, np.zeros((12, 12))))


def test_attention_band_report_fractions():
    report = AttentionBandReport(
        prob_band=np.array([[0.9, 0.6, 0.2, np.nan], [0.8, 0.6, 0.3, 0.5]]),
        delta_band=np.array([[0.1, 0.1, 0.1, 0.1], [-0.2, 0.1, -0.1, np.nan]]),
        delta_elsewhere=np.zeros((2, 4)),
    )
    assert report.widening_fraction == pytest.approx(2 / 3)
    assert report.narrowing_fraction == pytest.approx(2 / 3)


def test_attention_band_report_on_network():
    net = build_network(NetworkConfig(width=4, depth=2, input_size=16), seed=0)
    images = np.random.default_rng(0).standard_normal((3, 1, 16, 16))
    masks = np.zeros((3, 1, 16, 16))
    masks[:2, 0, 5:10, 5:10] = 1
    report = attention_band_report(net, images, masks)
    assert report.prob_band.shape == report.delta_band.shape == (2, 3)
    assert np.all((report.prob_band[:, :2] > 0) & (report.prob_band[:, :2] < 1))
    assert np.isnan(report.prob_band[:, 2]).all()
    p1 = forward(net, images).p1.data
    expected = band_mean(p1[1, 0], masks[1, 0])
    assert report.prob_band[0, 1] == pytest.approx(expected)
    assert report.widening_fraction in (0.0, 0.5, 1.0)


def test_mann_whitney_examples():
    assert mann_whitney_u([1, 2], [3, 4]).u == 0.0
    same = mann_whitney_u([1, 2, 3], [1, 2, 3])
    assert same.u == 4.5
    assert same.p_two_sided == 1.0
    result = mann_whitney_u([1, 2, 3], [4, 5, 6])
    assert result.exact
    assert result.p_two_sided == pytest.approx(0.1)
    with pytest.raises(ValueError, match="non-empty"):
        mann_whitney_u([], [1.0])


@pytest.mark.parametrize("seed", range(5))
def test_mann_whitney_u_complement(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal(10), rng.standard_normal(12)
    assert mann_whitney_u(a, b).u + mann_whitney_u(b, a).u == pytest.approx(120)


@pytest.mark.parametrize("seed", range(5))
def test_mann_whitney_matches_scipy(seed):
    rng = np.random.default_rng(seed)
    a = np.round(rng.standard_normal(12), 1)
    b = np.round(rng.standard_normal(15) + 0.5, 1)
    ours = mann_whitney_u(a, b)
    ref = mannwhitneyu(a, b, alternative="two-sided", method="asymptotic")
    assert not ours.exact
    assert ours.u == pytest.approx(ref.statistic)
    assert ours.p_two_sided == pytest.approx(ref.pvalue, rel=1e-9)

    perm = rng.permutation(20).astype(float)
    small_a, small_b = perm[:4], perm[4:9]
    ours = mann_whitney_u(small_a, small_b)
    ref = mannwhitneyu(small_a, small_b, alternative="two-sided", method="exact")
    assert ours.exact
    assert ours.p_two_sided == pytest.approx(ref.pvalue, rel=1e-9)
