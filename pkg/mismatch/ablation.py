"""Ablation grids: decoder variants, consistency weight, dilation, stop-gradient
and the supervised / morphological baselines."""
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from dataclasses import replace
from logging import getLogger
from typing import Optional

import numpy as np
from tqdm import tqdm

from .calibration import attention_band_report
from .calibration import expected_calibration_error
from .calibration import image_metrics
from .calibration import mann_whitney_u
from .network import BlockKind
from .network import NetworkConfig
from .synth import Dataset
from .synth import stack_batch
from .training import fit
from .training import predict_final
from .training import TrainConfig
from .utils import add_clock
from .utils import create_directory
from .utils import write_csv

logger = getLogger(__name__)

GRIDS = ("decoders", "alpha", "dilation", "stopgrad", "baselines")
ALPHAS = (0.0, 0.0005, 0.001, 0.002, 0.004)
DILATIONS = (2, 5, 9)
FLIP_NOISE = ("hflip", "vflip", "gaussian_noise")
# grid -> (reference cell, summary column of Mann-Whitney p against it)
REFERENCES = {"alpha": ("alpha=0", "p_vs_alpha0"), "baselines": ("MM", "p_vs_mm")}

STD, POS, NEG = BlockKind.STANDARD, BlockKind.POSITIVE, BlockKind.NEGATIVE


@dataclass(frozen=True)
class Cell:
    name: str
    network: NetworkConfig
    train: TrainConfig


def grid_cells(
    grid: str, network_config: NetworkConfig, train_config: TrainConfig
) -> list[Cell]:
    """Expand a named grid around the given base configs."""

    def cell(name, net_kws=None, train_kws=None):
        return Cell(
            name,
            replace(network_config, **(net_kws or {})),
            replace(train_config, **(train_kws or {})),
        )

    def kinds(k1, k2):
        return {"decoder1_kind": k1, "decoder2_kind": k2}

    if grid == "decoders":
        return [
            cell("MM-a", kinds(STD, STD)),
            cell("MM-b", kinds(STD, NEG)),
            cell("MM-c", kinds(STD, POS)),
            cell("MM", kinds(POS, NEG)),
        ]
    if grid == "alpha":
        return [cell(f"alpha={a:g}", kinds(POS, NEG), {"alpha": a}) for a in ALPHAS]
    if grid == "dilation":
        return [
            cell(f"dilation={d}", {**kinds(POS, NEG), "dilation_rate": d})
            for d in DILATIONS
        ]
    if grid == "stopgrad":
        return [
            cell(f"stopgrad={label}", kinds(POS, NEG), {"stop_gradient": flag})
            for label, flag in (("on", True), ("off", False))
        ]
    if grid == "baselines":
        return [
            cell("Sup1", kinds(STD, STD), {"alpha": 0.0, "augment": FLIP_NOISE}),
            cell("Sup2", kinds(POS, NEG), {"alpha": 0.0, "augment": FLIP_NOISE}),
            cell(
                "Morph",
                kinds(BlockKind.MORPH_DILATE, BlockKind.MORPH_ERODE),
                {"augment": ("gaussian_noise",)},
            ),
            cell("MM", kinds(POS, NEG)),
        ]
    raise ValueError(f"Unknown ablation grid {grid!r}; expected one of {GRIDS}")


@dataclass
class CellResult:
    """
    Test split scores of one trained cell. ``ious``/``eces`` are per image for the
    averaged prediction; ``decoder1_ece`` is the per-image mean for decoder 1
    alone. The fractions come from :func:`attention_band_report`.
    """

    name: str
    seed: int
    ious: list[float]
    eces: list[float]
    decoder1_ece: float
    widening_fraction: float = float("nan")
    narrowing_fraction: float = float("nan")

    @property
    def mean_iou(self) -> float:
        return float(np.mean(self.ious))

    @property
    def mean_ece(self) -> float:
        return float(np.mean(self.eces))


def run_cell(cell: Cell, dataset: Dataset, seed: int) -> CellResult:
    """Train one cell with ``seed`` and score it on the test split."""
    cfg = replace(cell.train, seed=seed)
    fitted = fit(
        cell.network, cfg, dataset.train_labeled, dataset.train_unlabeled, dataset.val
    )
    images, masks = stack_batch(dataset.test, cell.network.dtype)
    pred = predict_final(fitted, images, cfg.average)
    scores = [image_metrics(pred.prob[i, 0], masks[i, 0]) for i in range(len(images))]
    bands = attention_band_report(fitted.net, images, masks, pred.p1, pred.p2)
    decoder1_eces = [expected_calibration_error(p, m) for p, m in zip(pred.p1, masks)]
    return CellResult(
        cell.name,
        seed,
        [s.iou for s in scores],
        [s.ece for s in scores],
        float(np.mean(decoder1_eces)),
        bands.widening_fraction,
        bands.narrowing_fraction,
    )


def _run_cell_args(args) -> CellResult:
    return run_cell(*args)


def _n_workers() -> int:
    value = os.environ.get("MISMATCH_THREADS", "1")
    try:
        n = int(value)
    except ValueError:
        raise ValueError(f"MISMATCH_THREADS must be an integer, got {value!r}")
    return max(n, 1)


@dataclass
class AblationResult:
    grid: str
    summary: dict[str, list]
    per_seed: dict[str, list]
    results: list[CellResult]


def summarize(
    grid: str, cells: list[Cell], results: list[CellResult], n_seeds: int
) -> AblationResult:
    """
    Per-cell mean and std of the per-seed mean IoU, mean ECE of the averaged and
    of the decoder 1 prediction, and for the ``alpha`` and ``baselines`` grids
    the Mann-Whitney p of the reference cell against each row over pooled
    per-image IoUs.
    """
    summary = {
        "name": [],
        "mean_iou": [],
        "std_iou": [],
        "n_seeds": [],
        "mean_ece": [],
        "decoder1_ece": [],
    }
    per_seed = {
        "name": [r.name for r in results],
        "seed": [r.seed for r in results],
        "iou": [r.mean_iou for r in results],
        "ece": [r.mean_ece for r in results],
        "decoder1_ece": [r.decoder1_ece for r in results],
        "widening_fraction": [r.widening_fraction for r in results],
        "narrowing_fraction": [r.narrowing_fraction for r in results],
    }
    by_name = {c.name: [r for r in results if r.name == c.name] for c in cells}
    for name, rows in by_name.items():
        means = [r.mean_iou for r in rows]
        summary["name"].append(name)
        summary["mean_iou"].append(float(np.mean(means)))
        summary["std_iou"].append(float(np.std(means)))
        summary["n_seeds"].append(n_seeds)
        summary["mean_ece"].append(float(np.mean([r.mean_ece for r in rows])))
        summary["decoder1_ece"].append(float(np.mean([r.decoder1_ece for r in rows])))
    if grid in REFERENCES:
        reference, column = REFERENCES[grid]
        pooled = {
            name: [v for r in rows for v in r.ious] for name, rows in by_name.items()
        }
        summary[column] = [
            mann_whitney_u(pooled[reference], pooled[name]).p_two_sided
            for name in by_name
        ]
    return AblationResult(grid, summary, per_seed, results)


@add_clock
def ablation_matrix(
    grid: str,
    dataset: Dataset,
    network_config: NetworkConfig,
    train_config: TrainConfig,
    n_seeds: int = 5,
    base_seed: int = 0,
    workers: Optional[int] = None,
) -> AblationResult:
    """
    Run every cell of ``grid`` for ``n_seeds`` training seeds.

    Parameters:
    ----------
    grid:
        one of ``decoders``, ``alpha``, ``dilation``, ``stopgrad``, ``baselines``.
    dataset:
        shared by every cell; only the training seed varies.
    network_config, train_config:
        base configs each cell modifies.
    n_seeds:
        seeds ``base_seed .. base_seed + n_seeds - 1`` per cell.
    workers:
        process pool size; defaults to ``MISMATCH_THREADS`` (1, serial).
    """
    if n_seeds < 1:
        raise ValueError(f"n_seeds must be >= 1, got {n_seeds}")
    cells = grid_cells(grid, network_config, train_config)
    jobs = [(c, dataset, base_seed + s) for c in cells for s in range(n_seeds)]
    workers = workers or _n_workers()
    logger.info("ablation %s: %d runs on %d worker(s)", grid, len(jobs), workers)
    if workers == 1:
        results = [_run_cell_args(job) for job in tqdm(jobs, desc=grid)]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = pool.map(_run_cell_args, jobs)
            results = list(tqdm(runs, total=len(jobs), desc=grid))
    return summarize(grid, cells, results, n_seeds)


def write_ablation(result: AblationResult, directory: str) -> tuple[str, str]:
    create_directory(directory)
    summary_path = os.path.join(directory, f"ablation_{result.grid}.csv")
    per_seed_path = os.path.join(directory, f"ablation_{result.grid}_per_seed.csv")
    write_csv(summary_path, result.summary)
    write_csv(per_seed_path, result.per_seed)
    return summary_path, per_seed_path
