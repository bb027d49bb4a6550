import numpy as np
import pytest

from ..ablation import ablation_matrix
from ..ablation import ALPHAS
from ..ablation import CellResult
from ..ablation import grid_cells
from ..ablation import run_cell
from ..ablation import summarize
from ..ablation import write_ablation
from ..ablation import _n_workers
from ..calibration import mann_whitney_u
from ..network import BlockKind
from ..network import NetworkConfig
from ..synth import DatasetSpec
from ..synth import generate_dataset
from ..training import TrainConfig
from ..utils import read_csv

NET = NetworkConfig(width=4, depth=2, input_size=32)
TRAIN = TrainConfig(epochs=2, avg_last_k=2, lr=1e-3)


def _kinds(cell):
    return cell.network.decoder1_kind, cell.network.decoder2_kind


def test_decoder_grid():
    cells = grid_cells("decoders", NET, TRAIN)
    assert [c.name for c in cells] == ["MM-a", "MM-b", "MM-c", "MM"]
    std, pos, neg = BlockKind.STANDARD, BlockKind.POSITIVE, BlockKind.NEGATIVE
    assert [_kinds(c) for c in cells] == [
        (std, std),
        (std, neg),
        (std, pos),
        (pos, neg),
    ]
    assert all(c.train == TRAIN for c in cells)
    assert all(c.network.width == 4 for c in cells)


def test_alpha_dilation_and_stopgrad_grids():
    cells = grid_cells("alpha", NET, TRAIN)
    assert [c.name for c in cells] == [
        "alpha=0",
        "alpha=0.0005",
        "alpha=0.001",
        "alpha=0.002",
        "alpha=0.004",
    ]
    assert tuple(c.train.alpha for c in cells) == ALPHAS

    cells = grid_cells("dilation", NET, TRAIN)
    assert [c.network.dilation_rate for c in cells] == [2, 5, 9]
    assert cells[0].name == "dilation=2"

    cells = grid_cells("stopgrad", NET, TRAIN)
    assert [(c.name, c.train.stop_gradient) for c in cells] == [
        ("stopgrad=on", True),
        ("stopgrad=off", False),
    ]


def test_baseline_grid():
    cells = {c.name: c for c in grid_cells("baselines", NET, TRAIN)}
    assert list(cells) == ["Sup1", "Sup2", "Morph", "MM"]
    assert cells["Sup1"].train.alpha == cells["Sup2"].train.alpha == 0.0
    assert "hflip" in cells["Sup1"].train.augment
    assert _kinds(cells["Morph"]) == (BlockKind.MORPH_DILATE, BlockKind.MORPH_ERODE)
    assert cells["MM"].train.alpha == TRAIN.alpha
    with pytest.raises(ValueError, match="Unknown ablation grid"):
        grid_cells("widths", NET, TRAIN)


def _fake_results(names, n_seeds, rng):
    return [
        CellResult(
            name,
            seed,
            list(rng.uniform(0.4, 0.9, size=3)),
            list(rng.uniform(0.0, 0.1, size=3)),
            float(rng.uniform(0.0, 0.1)),
        )
        for name in names
        for seed in range(n_seeds)
    ]


def test_summarize_bookkeeping():
    cells = grid_cells("decoders", NET, TRAIN)
    names = [c.name for c in cells]
    results = _fake_results(names, 3, np.random.default_rng(0))
    out = summarize("decoders", cells, results, 3)
    assert out.summary["name"] == names
    assert out.summary["n_seeds"] == [3] * 4
    assert "p_vs_mm" not in out.summary
    assert len(out.per_seed["name"]) == 12
    for i, name in enumerate(names):
        rows = [r.mean_iou for r in results if r.name == name]
        assert out.summary["mean_iou"][i] == pytest.approx(np.mean(rows))
        assert out.summary["std_iou"][i] == pytest.approx(np.std(rows))
        eces = [r.mean_ece for r in results if r.name == name]
        assert out.summary["mean_ece"][i] == pytest.approx(np.mean(eces))


def test_summarize_baselines_compares_with_mm():
    cells = grid_cells("baselines", NET, TRAIN)
    names = [c.name for c in cells]
    results = _fake_results(names, 2, np.random.default_rng(1))
    out = summarize("baselines", cells, results, 2)
    pooled = {n: [v for r in results if r.name == n for v in r.ious] for n in names}
    expected = mann_whitney_u(pooled["MM"], pooled["Sup1"]).p_two_sided
    assert out.summary["p_vs_mm"][0] == pytest.approx(expected)
    assert out.summary["p_vs_mm"][-1] == 1.0


def test_summarize_alpha_compares_with_unregularized():
    cells = grid_cells("alpha", NET, TRAIN)
    names = [c.name for c in cells]
    results = _fake_results(names, 2, np.random.default_rng(3))
    out = summarize("alpha", cells, results, 2)
    assert "p_vs_mm" not in out.summary
    pooled = {n: [v for r in results if r.name == n for v in r.ious] for n in names}
    expected = mann_whitney_u(pooled["alpha=0"], pooled["alpha=0.002"]).p_two_sided
    assert out.summary["p_vs_alpha0"][3] == pytest.approx(expected)
    assert out.summary["p_vs_alpha0"][0] == 1.0


def test_write_ablation(tmp_path):
    cells = grid_cells("stopgrad", NET, TRAIN)
    results = _fake_results([c.name for c in cells], 2, np.random.default_rng(2))
    out = summarize("stopgrad", cells, results, 2)
    summary_path, per_seed_path = write_ablation(out, str(tmp_path / "abl"))
    assert summary_path.endswith("ablation_stopgrad.csv")
    with open(summary_path) as f:
        header = f.readline().strip()
    assert header == "name,mean_iou,std_iou,n_seeds,mean_ece,decoder1_ece"
    table = read_csv(per_seed_path)
    assert list(table["name"]) == ["stopgrad=on"] * 2 + ["stopgrad=off"] * 2
    np.testing.assert_allclose(table["iou"], out.per_seed["iou"])


def test_n_workers(monkeypatch):
    monkeypatch.delenv("MISMATCH_THREADS", raising=False)
    assert _n_workers() == 1
    monkeypatch.setenv("MISMATCH_THREADS", "3")
    assert _n_workers() == 3
    monkeypatch.setenv("MISMATCH_THREADS", "0")
    assert _n_workers() == 1
    monkeypatch.setenv("MISMATCH_THREADS", "many")
    with pytest.raises(ValueError, match="MISMATCH_THREADS"):
        _n_workers()


def test_ablation_matrix_rejects_zero_seeds():
    with pytest.raises(ValueError, match="n_seeds"):
        ablation_matrix("decoders", None, NET, TRAIN, n_seeds=0)


@pytest.mark.slow
def test_attention_decoders_beat_tied_standard_decoders():
    dataset = generate_dataset(
        DatasetSpec(n_labeled=4, n_unlabeled=16, n_val=4, n_test=8)
    )
    train_cfg = TrainConfig(epochs=10, avg_last_k=5, lr=1e-3)
    out = ablation_matrix("decoders", dataset, NET, train_cfg, n_seeds=3)
    means = dict(zip(out.summary["name"], out.summary["mean_iou"]))
    assert means["MM"] >= means["MM-a"]


@pytest.fixture(scope="module")
def tubes_runs():
    """MM, its alpha=0 twin and MM-a on tubes-32: 5 labeled, 200 unlabeled, 50 test."""
    dataset = generate_dataset(DatasetSpec())
    net_cfg = NetworkConfig()
    train_cfg = TrainConfig(epochs=10, avg_last_k=5, lr=1e-3)
    alphas = {c.name: c for c in grid_cells("alpha", net_cfg, train_cfg)}
    tied = grid_cells("decoders", net_cfg, train_cfg)[0]
    cells = [alphas["alpha=0"], alphas["alpha=0.002"], tied]
    results = [run_cell(cell, dataset, seed) for cell in cells for seed in range(5)]
    return cells, results


def _by_name(results, name):
    return [r for r in results if r.name == name]


@pytest.mark.slow
def test_consistency_beats_supervised_on_test_split(tubes_runs):
    cells, results = tubes_runs
    out = summarize("alpha", cells[:2], results, 5)
    means = dict(zip(out.summary["name"], out.summary["mean_iou"]))
    assert means["alpha=0.002"] > means["alpha=0"]
    assert 0 < out.summary["p_vs_alpha0"][1] <= 1


@pytest.mark.slow
def test_positive_decoder_widens_and_negative_narrows_at_boundaries(tubes_runs):
    mm = _by_name(tubes_runs[1], "alpha=0.002")
    assert np.mean([r.widening_fraction for r in mm]) >= 0.8
    assert np.mean([r.narrowing_fraction for r in mm]) > 0.5


@pytest.mark.slow
def test_averaged_decoders_calibrate_like_a_standard_decoder(tubes_runs):
    results = tubes_runs[1]
    averaged = np.mean([r.mean_ece for r in _by_name(results, "alpha=0.002")])
    single = np.mean([r.decoder1_ece for r in _by_name(results, "MM-a")])
    assert averaged <= single + 0.05
