"""
Command-line entry point:
``mismatch <subcommand> [--config c.json] [--seed s] --out d``.
"""
import argparse
import glob
import os
import sys
from dataclasses import dataclass
from dataclasses import field
from dataclasses import replace
from logging import getLogger
from typing import Optional
from typing import Sequence

import numpy as np

from .ablation import ablation_matrix
from .ablation import GRIDS
from .ablation import write_ablation
from .calibration import attention_band_report
from .calibration import bin_stats
from .calibration import ece
from .calibration import ece_iou_scatter
from .calibration import image_metrics
from .calibration import plot_reliability
from .calibration import write_reliability_csv
from .erf import branch_reports
from .erf import depth_reports
from .erf import ERFConfig
from .erf import fit_sqrt_growth
from .erf import write_erf_reports
from .network import build_network
from .network import NetworkConfig
from .synth import Dataset
from .synth import DatasetSpec
from .synth import generate_dataset
from .synth import read_dataset
from .synth import stack_batch
from .synth import write_dataset
from .training import average_checkpoints
from .training import fit
from .training import FitResult
from .training import load_checkpoint
from .training import predict_final
from .training import save_checkpoint
from .training import TrainConfig
from .training import TrainResult
from .training import write_metrics
from .utils import config_from_dict
from .utils import config_to_dict
from .utils import create_directory
from .utils import read_json
from .utils import write_csv
from .utils import write_json

logger = getLogger(__name__)

COMMANDS = ("gen-data", "train", "eval", "erf", "calibrate", "ablate")
RESOLVED_CONFIG = "resolved_config.json"


@dataclass(frozen=True)
class CalibrateConfig:
    n_bins: int = 5
    band_radius: int = 1

    def validate(self) -> None:
        if self.n_bins < 1:
            raise ValueError(f"CalibrateConfig.n_bins must be >= 1, got {self.n_bins}")
        if self.band_radius < 1:
            raise ValueError(
                f"CalibrateConfig.band_radius must be >= 1, got {self.band_radius}"
            )


@dataclass(frozen=True)
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    erf: ERFConfig = field(default_factory=ERFConfig)
    calibrate: CalibrateConfig = field(default_factory=CalibrateConfig)

    @classmethod
    def from_dict(cls, payload: Optional[dict]) -> "RunConfig":
        payload = payload or {}
        sections = {
            "network": NetworkConfig,
            "train": TrainConfig,
            "data": DatasetSpec,
            "erf": ERFConfig,
            "calibrate": CalibrateConfig,
        }
        unknown = sorted(set(payload) - set(sections))
        if unknown:
            raise ValueError(f"Unknown config section(s): {', '.join(unknown)}")
        return cls(
            **{
                name: config_from_dict(kind, payload.get(name))
                for name, kind in sections.items()
            }
        )

    def with_seed(self, seed: Optional[int]) -> "RunConfig":
        if seed is None:
            return self
        train = replace(self.train, seed=seed)
        return replace(self, train=train, data=replace(self.data, seed=seed))

    def validate(self) -> None:
        self.network.validate()
        self.train.validate()
        self.data.validate()
        self.erf.validate()
        self.calibrate.validate()
        if self.data.size != self.network.input_size:
            raise ValueError(
                f"data.size {self.data.size} differs from network.input_size"
                f" {self.network.input_size}"
            )

    def to_dict(self) -> dict:
        return {
            "network": config_to_dict(self.network),
            "train": config_to_dict(self.train),
            "data": config_to_dict(self.data),
            "erf": config_to_dict(self.erf),
            "calibrate": config_to_dict(self.calibrate),
        }


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValueError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="mismatch", description="Semi-supervised segmentation toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", type=str, default=None, help="JSON run config")
        cmd.add_argument(
            "--seed", type=int, default=None, help="overrides data/train seeds"
        )
        cmd.add_argument("--out", type=str, required=True, help="output directory")
        if name in ("train", "eval", "calibrate", "ablate"):
            cmd.add_argument(
                "--data", type=str, default=None, help="gen-data directory"
            )
        if name in ("eval", "calibrate"):
            cmd.add_argument(
                "--run", type=str, required=True, help="train output directory"
            )
        if name == "ablate":
            cmd.add_argument("--grid", type=str, required=True, choices=GRIDS)
            cmd.add_argument("--n-seeds", type=int, default=5)
    return parser


def load_config(path: Optional[str], seed: Optional[int]) -> RunConfig:
    payload = read_json(path) if path is not None else None
    config = RunConfig.from_dict(payload).with_seed(seed)
    config.validate()
    return config


def _dataset(config: RunConfig, data_dir: Optional[str]) -> Dataset:
    if data_dir is not None:
        return read_dataset(data_dir)
    return generate_dataset(config.data)


def _load_run(run_dir: str) -> tuple[RunConfig, FitResult]:
    """Rebuild the final model of a ``train`` output directory."""
    config = RunConfig.from_dict(read_json(os.path.join(run_dir, RESOLVED_CONFIG)))
    epoch_dirs = sorted(glob.glob(os.path.join(run_dir, "checkpoints", "epoch_*")))
    if not epoch_dirs:
        raise FileNotFoundError(f"no checkpoints under {run_dir}/checkpoints")
    checkpoints = [load_checkpoint(d)[0] for d in epoch_dirs]
    final = checkpoints[-config.train.avg_last_k :]
    net = build_network(config.network, config.train.seed)
    if config.train.average == "parameters":
        net.load(average_checkpoints(final).params)
    else:
        net.load(final[-1].params)
    return config, FitResult(net, TrainResult(checkpoints, {}), final)


def cmd_gen_data(args, config: RunConfig) -> None:
    write_dataset(generate_dataset(config.data), args.out)


def cmd_train(args, config: RunConfig) -> None:
    dataset = _dataset(config, args.data)
    fitted = fit(
        config.network,
        config.train,
        dataset.train_labeled,
        dataset.train_unlabeled,
        dataset.val,
        progress=True,
    )
    ckpt_dir = os.path.join(args.out, "checkpoints")
    for ckpt in fitted.result.checkpoints:
        save_checkpoint(ckpt, ckpt_dir, config.network, config.train.seed)
    write_metrics(fitted.result.metrics, os.path.join(args.out, "metrics.csv"))


def cmd_eval(args, config: RunConfig) -> None:
    run_config, fitted = _load_run(args.run)
    dataset = _dataset(run_config, args.data)
    images, masks = stack_batch(dataset.test, run_config.network.dtype)
    prob = predict_final(fitted, images, run_config.train.average).prob
    scores = [image_metrics(prob[i, 0], masks[i, 0]) for i in range(len(dataset.test))]
    write_csv(
        os.path.join(args.out, "eval.csv"),
        {
            "id": [s.id for s in dataset.test],
            "iou": [s.iou for s in scores],
            "dice": [s.dice for s in scores],
            "ece": [s.ece for s in scores],
        },
    )
    logger.info(
        "test iou %.4f dice %.4f ece %.4f",
        np.mean([s.iou for s in scores]),
        np.mean([s.dice for s in scores]),
        np.mean([s.ece for s in scores]),
    )


def cmd_erf(args, config: RunConfig) -> None:
    seed = args.seed or 0
    reports = branch_reports(config.erf, config.network.dilation_rate, seed)
    depths = depth_reports(config.erf, seed)
    write_erf_reports({**reports, **depths}, args.out)
    c, r2 = fit_sqrt_growth(
        range(1, config.erf.max_depth + 1), [r.erf_size for r in depths.values()]
    )
    logger.info("erf size ~ %.3f sqrt(n), R^2 = %.4f", c, r2)


def cmd_calibrate(args, config: RunConfig) -> None:
    run_config, fitted = _load_run(args.run)
    dataset = _dataset(run_config, args.data)
    n_bins = config.calibrate.n_bins
    images, masks = stack_batch(dataset.test, run_config.network.dtype)
    pred = predict_final(fitted, images, run_config.train.average)
    maps = {"decoder1": pred.p1, "decoder2": pred.p2, "averaged": pred.prob}

    named = {}
    for name, prob in maps.items():
        named[name] = bin_stats(prob, masks, n_bins)
        csv_path = os.path.join(args.out, f"reliability_{name}.csv")
        write_reliability_csv(named[name], csv_path)
        logger.info("%s ece %.4f", name, ece(named[name], prob.size))
    plot_reliability(named, os.path.join(args.out, "reliability.svg"))

    scores = [
        image_metrics(pred.prob[i, 0], masks[i, 0]) for i in range(len(dataset.test))
    ]
    ece_iou_scatter(
        {"averaged": ([s.iou for s in scores], [s.ece for s in scores])},
        os.path.join(args.out, "ece_vs_iou"),
    )

    report = attention_band_report(
        fitted.net, images, masks, pred.p1, pred.p2, config.calibrate.band_radius
    )
    n = len(dataset.test)
    write_csv(
        os.path.join(args.out, "confidence_delta.csv"),
        {
            "id": [s.id for s in dataset.test] * 2,
            "decoder": [1] * n + [2] * n,
            "band_mean": report.delta_band.ravel().tolist(),
            "elsewhere_mean": report.delta_elsewhere.ravel().tolist(),
            "prob_band": report.prob_band.ravel().tolist(),
        },
    )
    logger.info(
        "decoder 1 band probability >= decoder 2 on %.0f%% of images; decoder 2"
        " band confidence drops on %.0f%%",
        100 * report.widening_fraction,
        100 * report.narrowing_fraction,
    )


def cmd_ablate(args, config: RunConfig) -> None:
    dataset = _dataset(config, args.data)
    result = ablation_matrix(
        args.grid,
        dataset,
        config.network,
        config.train,
        n_seeds=args.n_seeds,
        base_seed=config.train.seed,
    )
    write_ablation(result, args.out)


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "erf": cmd_erf,
    "calibrate": cmd_calibrate,
    "ablate": cmd_ablate,
}


def run(argv: Sequence[str]) -> int:
    """
    Execute one subcommand.

    Returns:
    -------
    0 on success, 2 for usage or configuration errors, 1 for failures while
    running; the diagnostic is a single line on stderr.
    """
    try:
        args = build_parser().parse_args(list(argv))
        if getattr(args, "n_seeds", 1) < 1:
            raise ValueError(f"--n-seeds must be >= 1, got {args.n_seeds}")
        config = load_config(args.config, args.seed)
        create_directory(args.out)
        write_json(os.path.join(args.out, RESOLVED_CONFIG), config.to_dict())
    except (ValueError, TypeError, OSError) as err:
        print(f"mismatch: error: {err}", file=sys.stderr)
        return 2
    try:
        HANDLERS[args.command](args, config)
    except (ValueError, TypeError, RuntimeError, OSError, KeyError) as err:
        print(f"mismatch {args.command}: error: {err}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run(sys.argv[1:]))
