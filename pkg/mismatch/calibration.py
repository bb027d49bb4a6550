"""Segmentation metrics, confidence calibration and significance testing."""
import itertools
from dataclasses import dataclass
from logging import getLogger
from typing import Mapping
from typing import NamedTuple
from typing import Optional
from typing import Sequence
from typing import Union

import matplotlib
import numpy as np
from matplotlib.figure import Figure
from scipy.stats import norm
from scipy.stats import rankdata

from .network import forward
from .network import head_probability
from .network import Network
from .synth import boundary_band
from .tensor import Tensor
from .typing import Float1D
from .typing import FloatND
from .utils import _warn_external
from .utils import read_csv
from .utils import write_csv

logger = getLogger(__name__)

EXACT_MWU_LIMIT = 64
ArrayOrTensor = Union[np.ndarray, Tensor]


def _array(value: ArrayOrTensor) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value)


def _check_shapes(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shapes {a.shape} and {b.shape} differ")


###########
# Metrics #
###########


def iou(pred_mask: np.ndarray, true_mask: np.ndarray) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    pred, true = np.asarray(pred_mask).astype(bool), np.asarray(true_mask).astype(bool)
    _check_shapes(pred, true, "iou")
    union = np.logical_or(pred, true).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, true).sum() / union)


def dice_score(pred_mask: np.ndarray, true_mask: np.ndarray) -> float:
    """``2 |A & B| / (|A| + |B|)``; 1.0 when both masks are empty."""
    pred, true = np.asarray(pred_mask).astype(bool), np.asarray(true_mask).astype(bool)
    _check_shapes(pred, true, "dice_score")
    total = pred.sum() + true.sum()
    if total == 0:
        return 1.0
    return float(2 * np.logical_and(pred, true).sum() / total)


###############
# Calibration #
###############


@dataclass(frozen=True)
class BinStats:
    lo: float
    hi: float
    count: int
    acc: float
    conf: float

    @property
    def gap(self) -> float:
        return abs(self.acc - self.conf)


def confidence(probs: FloatND) -> FloatND:
    """Confidence of the predicted class of a binary probability map."""
    probs = np.asarray(probs, dtype=np.float64)
    return np.maximum(probs, 1.0 - probs)


def bin_edges(n_bins: int = 5, lo: float = 0.5, hi: float = 1.0) -> Float1D:
    edges = np.linspace(lo, hi, n_bins + 1)
    edges[-1] = hi
    return edges


def bin_index(conf: FloatND, edges: Float1D) -> np.ndarray:
    """Half-open bins, ties to the upper bin; the top edge closes the last bin."""
    idx = np.searchsorted(edges, conf, side="right") - 1
    return np.clip(idx, 0, len(edges) - 2)


def bin_stats(
    probs: ArrayOrTensor,
    true_mask: np.ndarray,
    n_bins: int = 5,
    value_range: tuple[float, float] = (0.5, 1.0),
) -> list[BinStats]:
    """
    Per-bin pixel count, accuracy and mean confidence.

    Parameters:
    ----------
    probs:
        foreground probabilities in [0, 1].
    true_mask:
        binary ground truth of the same shape.
    n_bins:
        number of equal-width confidence intervals.
    value_range:
        confidence range partitioned by the bins.

    Returns:
    -------
    One ``BinStats`` per interval; empty bins have count 0 and acc = conf = 0.
    """
    if n_bins < 1:
        raise ValueError(f"bin_stats needs n_bins >= 1, got {n_bins}")
    probs, true = _array(probs), np.asarray(true_mask)
    _check_shapes(probs, true, "bin_stats")
    probs = probs.astype(np.float64).ravel()
    correct = (probs >= 0.5) == true.astype(bool).ravel()
    conf = confidence(probs)
    edges = bin_edges(n_bins, *value_range)
    idx = bin_index(conf, edges)
    stats = []
    for m in range(n_bins):
        members = idx == m
        count = int(members.sum())
        acc = float(correct[members].mean()) if count else 0.0
        mean_conf = float(conf[members].mean()) if count else 0.0
        lo, hi = float(edges[m]), float(edges[m + 1])
        stats.append(BinStats(lo, hi, count, acc, mean_conf))
    return stats


def ece(stats: Sequence[BinStats], n: int) -> float:
    """
    Count-weighted mean absolute gap between accuracy and confidence.

    Confidence lies in [0.5, 1] but accuracy in [0, 1], so the result lies in
    [0, 1]; confidently wrong predictions push it above 0.5.
    """
    if n == 0:
        raise ValueError("ece of zero binned pixels is undefined")
    total = sum(s.count for s in stats)
    if total != n:
        raise ValueError(f"ece: n={n} but bins hold {total} pixels")
    return float(sum(s.count / n * s.gap for s in stats if s.count))


def expected_calibration_error(
    probs: ArrayOrTensor, true_mask: np.ndarray, n_bins: int = 5
) -> float:
    probs = _array(probs)
    return ece(bin_stats(probs, true_mask, n_bins), probs.size)


class ImageMetrics(NamedTuple):
    iou: float
    dice: float
    ece: float


def image_metrics(prob: ArrayOrTensor, true_mask: np.ndarray) -> ImageMetrics:
    prob = _array(prob)
    pred = prob >= 0.5
    return ImageMetrics(
        iou(pred, true_mask),
        dice_score(pred, true_mask),
        expected_calibration_error(prob, true_mask),
    )


##########
# Export #
##########

_SVG_RC = {"svg.hashsalt": "mismatch", "svg.fonttype": "path"}


def _save_svg(fig: Figure, path: str) -> None:
    with matplotlib.rc_context(_SVG_RC):
        fig.savefig(path, format="svg", metadata={"Date": None})


def write_reliability_csv(stats: Sequence[BinStats], path: str) -> None:
    write_csv(
        path,
        {
            "bin_lo": [s.lo for s in stats],
            "bin_hi": [s.hi for s in stats],
            "count": [s.count for s in stats],
            "acc": [s.acc for s in stats],
            "conf": [s.conf for s in stats],
            "gap": [s.gap for s in stats],
        },
    )


def read_reliability_csv(path: str) -> list[BinStats]:
    cols = read_csv(path)
    return [
        BinStats(float(lo), float(hi), int(count), float(acc), float(conf))
        for lo, hi, count, acc, conf in zip(
            cols["bin_lo"], cols["bin_hi"], cols["count"], cols["acc"], cols["conf"]
        )
    ]


def plot_reliability(named_stats: Mapping[str, Sequence[BinStats]], path: str) -> None:
    """Paired accuracy / confidence bars per bin, one panel per prediction."""
    fig = Figure(figsize=(3.2 * len(named_stats), 3.2))
    axes = fig.subplots(1, len(named_stats), squeeze=False)[0]
    for ax, (name, stats) in zip(axes, named_stats.items()):
        centers = np.array([(s.lo + s.hi) / 2 for s in stats])
        width = (stats[0].hi - stats[0].lo) / 2
        ax.bar(centers - width / 2, [s.acc for s in stats], width, label="accuracy")
        ax.bar(centers + width / 2, [s.conf for s in stats], width, label="confidence")
        ax.plot([stats[0].lo, stats[-1].hi], [stats[0].lo, stats[-1].hi], "k--", lw=1)
        ax.set_xlim(stats[0].lo, stats[-1].hi)
        ax.set_ylim(0, 1)
        ax.set_xlabel("confidence")
        ax.set_title(name)
    axes[0].set_ylabel("accuracy")
    axes[0].legend(loc="upper left")
    fig.tight_layout()
    _save_svg(fig, path)


def reliability_export(stats: Sequence[BinStats], path: str) -> tuple[str, str]:
    """
    Write ``<path>.csv`` (bin_lo, bin_hi, count, acc, conf, gap) and a
    ``<path>.svg`` reliability diagram.
    """
    csv_path, svg_path = f"{path}.csv", f"{path}.svg"
    write_reliability_csv(stats, csv_path)
    plot_reliability({"prediction": stats}, svg_path)
    return csv_path, svg_path


def ece_iou_scatter(
    points: Mapping[str, tuple[Sequence[float], Sequence[float]]],
    path: str,
    poly_deg: int = 2,
) -> tuple[str, str]:
    """
    Per-image (iou, ece) of one or more models as ``<path>.csv`` and a scatter
    ``<path>.svg`` with a fitted polynomial trend per model.
    """
    models, ious, eces = [], [], []
    fig = Figure(figsize=(4, 4))
    ax = fig.add_subplot()
    for name, (x, y) in points.items():
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        models += [name] * len(x)
        ious += x.tolist()
        eces += y.tolist()
        ax.scatter(x, y, s=8, label=name)
        if len(x) > poly_deg and np.ptp(x) > 0:
            coef = np.polyfit(x, y, deg=poly_deg)
            grid = np.linspace(x.min(), x.max(), 50)
            ax.plot(grid, np.polyval(coef, grid), lw=1)
    ax.set_xlabel("IoU")
    ax.set_ylabel("ECE")
    ax.legend()
    fig.tight_layout()
    csv_path, svg_path = f"{path}.csv", f"{path}.svg"
    write_csv(csv_path, {"model": models, "iou": ious, "ece": eces})
    _save_svg(fig, svg_path)
    return csv_path, svg_path


####################
# Attention deltas #
####################


class DeltaSummary(NamedTuple):
    delta: np.ndarray
    band_mean: float
    elsewhere_mean: float


def _masked_mean(values: np.ndarray, where: np.ndarray) -> float:
    return float(values[where].mean()) if where.any() else float("nan")


def confidence_delta_map(
    before: ArrayOrTensor,
    after: ArrayOrTensor,
    mask: Optional[np.ndarray] = None,
    band_radius: int = 1,
) -> DeltaSummary:
    """
    Signed change ``after - before`` of a confidence map, summarized over the
    boundary band of ``mask`` (width ``2 band_radius``) and over its complement.

    Without a mask every pixel counts as "elsewhere" and the band mean is NaN.
    """
    before, after = _array(before).astype(np.float64), _array(after).astype(np.float64)
    _check_shapes(before, after, "confidence_delta_map")
    delta = after - before
    if mask is None:
        return DeltaSummary(delta, float("nan"), float(delta.mean()))
    mask = np.asarray(mask)
    _check_shapes(delta, mask, "confidence_delta_map mask")
    h, w = mask.shape[-2:]
    band = np.stack(
        [boundary_band(m, band_radius) for m in mask.reshape(-1, h, w)]
    ).reshape(mask.shape)
    return DeltaSummary(delta, _masked_mean(delta, band), _masked_mean(delta, ~band))


def band_mean(values: ArrayOrTensor, mask: np.ndarray, band_radius: int = 1) -> float:
    """Mean of ``values`` over the boundary band of ``mask``; NaN if it is empty."""
    values = _array(values).astype(np.float64)
    _check_shapes(values, np.asarray(mask), "band_mean")
    return _masked_mean(values, boundary_band(mask, band_radius))


def _fraction(hits: np.ndarray, valid: np.ndarray) -> float:
    return float(hits[valid].mean()) if valid.any() else float("nan")


@dataclass
class AttentionBandReport:
    """
    Boundary band statistics of the two decoders, one column per test image.

    ``prob_band[d]`` is the mean foreground probability of decoder ``d + 1`` on
    the band. ``delta_band[d]`` and ``delta_elsewhere[d]`` summarize the
    confidence change across that decoder's last block (after minus before
    attention). Images with an empty band hold NaN and are left out of the
    fractions.
    """

    prob_band: np.ndarray
    delta_band: np.ndarray
    delta_elsewhere: np.ndarray

    @property
    def widening_fraction(self) -> float:
        """Share of images where decoder 1 is at least as confident of foreground."""
        p1, p2 = self.prob_band
        return _fraction(p1 >= p2, np.isfinite(p1) & np.isfinite(p2))

    @property
    def narrowing_fraction(self) -> float:
        """Share of images where decoder 2's band confidence drops."""
        delta = self.delta_band[1]
        return _fraction(delta < 0, np.isfinite(delta))


def attention_band_report(
    net: Network,
    images: np.ndarray,
    masks: np.ndarray,
    p1: Optional[np.ndarray] = None,
    p2: Optional[np.ndarray] = None,
    band_radius: int = 1,
) -> AttentionBandReport:
    """
    Compare the decoders on the ground-truth boundary band of each image.

    Parameters:
    ----------
    net:
        trained network.
    images, masks:
        [N, 1, H, W] test batch and its ground truth.
    p1, p2:
        final probability maps of each decoder, e.g. under checkpoint
        averaging; taken from a forward pass of ``net`` when None.
    band_radius:
        the band is ``2 band_radius`` pixels wide.
    """
    out = forward(net, images)
    probs = (
        out.p1.data if p1 is None else np.asarray(p1),
        out.p2.data if p2 is None else np.asarray(p2),
    )
    n = len(images)
    prob_band = np.empty((2, n))
    delta_band = np.empty((2, n))
    delta_elsewhere = np.empty((2, n))
    for d in range(2):
        taps = out.taps[f"decoder{d + 1}.0"]
        before = confidence(head_probability(net, d + 1, taps.pre).data)
        after = confidence(head_probability(net, d + 1, taps.post).data)
        for i in range(n):
            mask = masks[i, 0]
            prob_band[d, i] = band_mean(probs[d][i, 0], mask, band_radius)
            summary = confidence_delta_map(
                before[i, 0], after[i, 0], mask, band_radius
            )
            delta_band[d, i] = summary.band_mean
            delta_elsewhere[d, i] = summary.elsewhere_mean
    return AttentionBandReport(prob_band, delta_band, delta_elsewhere)


################
# Significance #
################


class MannWhitneyResult(NamedTuple):
    u: float
    p_two_sided: float
    exact: bool


def mann_whitney_u(
    sample_a: Sequence[float], sample_b: Sequence[float]
) -> MannWhitneyResult:
    """
    Two-sided Mann-Whitney U test of ``sample_a`` against ``sample_b``.

    U counts pairs where a beats b (ties count 1/2). The p-value is exact,
    enumerating every assignment of pooled midranks, when ``n_a * n_b <= 64``;
    otherwise it uses the tie-corrected normal approximation with continuity
    correction.
    """
    a, b = np.asarray(sample_a, dtype=float), np.asarray(sample_b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise ValueError("mann_whitney_u needs two non-empty samples")
    n_a, n_b = a.size, b.size
    n = n_a + n_b
    ranks = rankdata(np.concatenate([a, b]))
    offset = n_a * (n_a + 1) / 2
    u = float(ranks[:n_a].sum() - offset)
    mean = n_a * n_b / 2

    if n_a * n_b <= EXACT_MWU_LIMIT:
        observed = abs(u - mean)
        extreme = total = 0
        for subset in itertools.combinations(ranks, n_a):
            total += 1
            if abs(sum(subset) - offset - mean) >= observed - 1e-12:
                extreme += 1
        return MannWhitneyResult(u, extreme / total, True)

    _, counts = np.unique(ranks, return_counts=True)
    ties = float((counts**3 - counts).sum())
    var = n_a * n_b / 12 * ((n + 1) - ties / (n * (n - 1)))
    if var <= 0:
        return MannWhitneyResult(u, 1.0, False)
    if min(n_a, n_b) < 8:
        _warn_external(
            f"normal approximation used for small samples ({n_a}, {n_b})", logger
        )
    z = max(abs(u - mean) - 0.5, 0.0) / np.sqrt(var)
    return MannWhitneyResult(u, float(min(1.0, 2 * norm.sf(z))), False)
