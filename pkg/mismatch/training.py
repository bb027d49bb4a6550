"""Optimizer, training regimes, checkpoints and ensemble inference."""
import hashlib
import json
import os
from dataclasses import dataclass
from dataclasses import field
from logging import getLogger
from math import ceil
from typing import Literal
from typing import Mapping
from typing import NamedTuple
from typing import Optional
from typing import Sequence

import numpy as np
from tqdm import tqdm

from .calibration import image_metrics
from .calibration import ImageMetrics
from .losses import consistency_loss
from .losses import soft_dice_loss
from .network import build_network
from .network import forward
from .network import Network
from .network import NetworkConfig
from .synth import augment_sample
from .synth import Sample
from .synth import stack_batch
from .tensor import backward
from .tensor import read_mmt
from .tensor import Tensor
from .tensor import write_mmt
from .utils import _warn_external
from .utils import add_clock
from .utils import config_from_dict
from .utils import config_to_dict
from .utils import create_directory
from .utils import read_json
from .utils import write_csv
from .utils import write_json

logger = getLogger(__name__)

METRIC_COLUMNS = ("epoch", "dice_loss", "consistency_loss", "val_iou", "val_ece")


@dataclass(frozen=True)
class TrainConfig:
    """
    Hyperparameters of one training run.

    Parameters:
    ----------
    alpha:
        weight of the consistency term on unlabeled batches.
    lr:
        Adam learning rate.
    epochs:
        passes over the unlabeled stream.
    batch_size:
        samples per optimizer step.
    regime:
        ``streaming`` interleaves labeled batches into the unlabeled stream;
        ``joint`` sums a labeled and an unlabeled batch at every step.
    stop_gradient:
        symmetric stop-gradient in the consistency term.
    batch_dim_normalize:
        standardize predictions across the batch before the consistency term.
    avg_last_k:
        number of final epoch checkpoints to average.
    seed:
        seeds data order, augmentation and (through :func:`fit`) initialization.
    augment:
        augmentations applied to labeled samples.
    noise_sigma:
        standard deviation of the ``gaussian_noise`` augmentation.
    average:
        average the last checkpoints' ``parameters`` or their ``predictions``.
    include_consistency:
        when False the consistency term is left out of the graph entirely; the
        step schedule and random draws are unchanged.
    """

    alpha: float = 0.002
    lr: float = 2e-5
    epochs: int = 50
    batch_size: int = 1
    regime: Literal["streaming", "joint"] = "streaming"
    stop_gradient: bool = False
    batch_dim_normalize: bool = False
    avg_last_k: int = 10
    seed: int = 0
    augment: tuple[str, ...] = ()
    noise_sigma: float = 0.1
    average: Literal["parameters", "predictions"] = "parameters"
    include_consistency: bool = True

    def validate(self) -> None:
        if self.alpha < 0:
            raise ValueError(f"TrainConfig.alpha must be >= 0, got {self.alpha}")
        if self.lr <= 0:
            raise ValueError(f"TrainConfig.lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"TrainConfig.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(
                f"TrainConfig.batch_size must be >= 1, got {self.batch_size}"
            )
        if not 1 <= self.avg_last_k <= self.epochs:
            raise ValueError(
                f"TrainConfig.avg_last_k must be in [1, epochs={self.epochs}],"
                f" got {self.avg_last_k}"
            )
        if self.regime not in ("streaming", "joint"):
            raise ValueError(
                f"TrainConfig.regime must be streaming/joint, got {self.regime!r}"
            )
        if self.average not in ("parameters", "predictions"):
            raise ValueError(
                "TrainConfig.average must be parameters/predictions,"
                f" got {self.average!r}"
            )
        unknown = set(self.augment) - {"hflip", "vflip", "gaussian_noise"}
        if unknown:
            raise ValueError(f"TrainConfig.augment has unknown kinds {sorted(unknown)}")

    @classmethod
    def from_dict(cls, payload: Optional[dict]) -> "TrainConfig":
        return config_from_dict(cls, payload)

    def hash(self) -> str:
        payload = json.dumps(config_to_dict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()


########
# Adam #
########


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Optional[np.ndarray]],
    state: AdamState,
    lr: float,
) -> AdamState:
    """
    One bias-corrected Adam update of ``params`` in place.

    A missing or None gradient counts as zero; moments are created lazily with
    the parameter's shape.
    """
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, param in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(param.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(param.data)
            state.v[name] = np.zeros_like(param.data)
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        param.data = (param.data - update).astype(param.dtype)
    return state


###############
# Checkpoints #
###############


@dataclass
class Checkpoint:
    epoch: int
    params: dict[str, np.ndarray]
    config_hash: str = ""


def average_checkpoints(checkpoints: Sequence[Checkpoint]) -> Checkpoint:
    """
    Elementwise mean of each parameter over ``checkpoints``.

    Values are sorted along the checkpoint axis and summed in float64, so the
    result does not depend on the order of the checkpoints.
    """
    if not checkpoints:
        raise ValueError("average_checkpoints needs at least one checkpoint")
    first = checkpoints[0]
    for ckpt in checkpoints[1:]:
        if set(ckpt.params) != set(first.params):
            raise ValueError(
                f"checkpoint of epoch {ckpt.epoch} has a different parameter registry"
            )
        for name, value in ckpt.params.items():
            if value.shape != first.params[name].shape:
                raise ValueError(
                    f"parameter {name} has shape {value.shape} in epoch {ckpt.epoch},"
                    f" {first.params[name].shape} in epoch {first.epoch}"
                )
    averaged = {}
    for name, value in first.params.items():
        stacked = np.stack([c.params[name] for c in checkpoints]).astype(np.float64)
        mean = np.sort(stacked, axis=0).sum(axis=0) / len(checkpoints)
        averaged[name] = mean.astype(value.dtype)
    return Checkpoint(checkpoints[-1].epoch, averaged, first.config_hash)


def save_checkpoint(
    checkpoint: Checkpoint, directory: str, network_config: NetworkConfig, seed: int
) -> str:
    """
    Write ``<directory>/epoch_<k>/manifest.json`` and one MMT1 file per parameter.

    Returns:
    -------
    The epoch directory.
    """
    epoch_dir = os.path.join(directory, f"epoch_{checkpoint.epoch:03d}")
    create_directory(os.path.join(epoch_dir, "params"))
    files = {}
    for name, value in checkpoint.params.items():
        files[name] = os.path.join("params", f"{name}.mmt")
        write_mmt(os.path.join(epoch_dir, files[name]), value)
    write_json(
        os.path.join(epoch_dir, "manifest.json"),
        {
            "epoch": checkpoint.epoch,
            "seed": seed,
            "config_hash": checkpoint.config_hash,
            "network": config_to_dict(network_config),
            "params": files,
        },
    )
    return epoch_dir


def load_checkpoint(epoch_dir: str) -> tuple[Checkpoint, NetworkConfig, int]:
    manifest = read_json(os.path.join(epoch_dir, "manifest.json"))
    params = {
        name: read_mmt(os.path.join(epoch_dir, rel))
        for name, rel in manifest["params"].items()
    }
    network_config = config_from_dict(NetworkConfig, manifest["network"])
    checkpoint = Checkpoint(manifest["epoch"], params, manifest["config_hash"])
    return checkpoint, network_config, manifest["seed"]


#############
# Inference #
#############


class Prediction(NamedTuple):
    prob: np.ndarray
    mask: np.ndarray
    p1: np.ndarray
    p2: np.ndarray


def average_prediction(p1: np.ndarray, p2: np.ndarray) -> Prediction:
    """Mean of the two decoders' maps, thresholded at 0.5 (ties to foreground)."""
    p1, p2 = np.asarray(p1), np.asarray(p2)
    prob = (p1 + p2) / 2
    return Prediction(prob, prob >= 0.5, p1, p2)


def predict(net: Network, images: np.ndarray) -> Prediction:
    out = forward(net, images)
    return average_prediction(out.p1.data, out.p2.data)


def predict_ensemble(
    net: Network, checkpoints: Sequence[Checkpoint], images: np.ndarray
) -> Prediction:
    """Average the predictions of ``net`` loaded with each checkpoint in turn."""
    if not checkpoints:
        raise ValueError("predict_ensemble needs at least one checkpoint")
    p1 = p2 = 0.0
    for ckpt in checkpoints:
        net.load(ckpt.params)
        pred = predict(net, images)
        p1, p2 = p1 + pred.p1, p2 + pred.p2
    return average_prediction(p1 / len(checkpoints), p2 / len(checkpoints))


def evaluate(net: Network, samples: Sequence[Sample]) -> list[ImageMetrics]:
    """Per-sample (iou, dice, ece) of the averaged prediction."""
    if not samples:
        return []
    images, masks = stack_batch(samples, net.config.dtype)
    prob = predict(net, images).prob
    return [image_metrics(prob[i, 0], masks[i, 0]) for i in range(len(samples))]


############
# Training #
############


@dataclass
class TrainResult:
    checkpoints: list[Checkpoint]
    metrics: dict[str, list]


def _batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def _gradients(net: Network, loss: Optional[Tensor]) -> dict[str, Optional[np.ndarray]]:
    net.zero_grad()
    if loss is not None and loss.requires_grad:
        backward(loss)
    return {name: t.grad for name, t in net.params.items()}


def _check_finite(loss: Tensor, epoch: int, step: int) -> None:
    value = loss.item()
    if not np.isfinite(value):
        raise RuntimeError(f"non-finite loss {value} at epoch {epoch}, step {step}")


@add_clock
def train(
    net: Network,
    labeled: Sequence[Sample],
    unlabeled: Sequence[Sample],
    cfg: TrainConfig,
    val: Sequence[Sample] = (),
    progress: bool = False,
) -> TrainResult:
    """
    Train both decoders: Dice on labeled batches, alpha-weighted consistency on
    unlabeled ones.

    Parameters:
    ----------
    net:
        network trained in place.
    labeled, unlabeled:
        training samples; both non-empty.
    cfg:
        training hyperparameters.
    val:
        samples for the per-epoch validation IoU / ECE.
    progress:
        show a progress bar over epochs.

    Returns:
    -------
    One checkpoint per epoch and the per-epoch metrics log.
    """
    cfg.validate()
    if not labeled or not unlabeled:
        raise ValueError(
            f"train needs non-empty datasets, got {len(labeled)} labeled and"
            f" {len(unlabeled)} unlabeled samples"
        )
    if not val:
        _warn_external("no validation samples: val_iou and val_ece are NaN", logger)
    scale = 2**net.config.depth
    size = labeled[0].image.shape
    if size[0] % scale or size[1] % scale:
        raise ValueError(f"sample size {size} is not divisible by 2**depth={scale}")

    order_rng = np.random.default_rng(cfg.seed)
    augment_rng = np.random.default_rng([cfg.seed, 1])
    dtype = net.config.dtype
    state = AdamState()
    config_hash = cfg.hash()
    checkpoints, metrics = [], {name: [] for name in METRIC_COLUMNS}

    def labeled_loss(indices):
        samples = [labeled[i] for i in indices]
        if cfg.augment:
            samples = [
                augment_sample(s, cfg.augment, augment_rng, cfg.noise_sigma)
                for s in samples
            ]
        images, masks = stack_batch(samples, dtype)
        out = forward(net, images)
        return soft_dice_loss(out.p1, masks) + soft_dice_loss(out.p2, masks)

    def unlabeled_loss(indices):
        images, _ = stack_batch([unlabeled[i] for i in indices], dtype)
        out = forward(net, images)
        return consistency_loss(
            out.p1, out.p2, cfg.stop_gradient, cfg.batch_dim_normalize
        )

    for epoch in tqdm(range(cfg.epochs), desc="epochs", disable=not progress):
        u_batches = _batches(order_rng.permutation(len(unlabeled)), cfg.batch_size)
        l_batches = _batches(order_rng.permutation(len(labeled)), cfg.batch_size)
        ratio = ceil(len(u_batches) / len(l_batches))
        dice_values, cons_values = [], []
        n_labeled = 0
        for step, u_idx in enumerate(u_batches):
            l_idx = None
            if cfg.regime == "joint" or step % ratio == 0:
                l_idx = l_batches[n_labeled % len(l_batches)]
                n_labeled += 1

            sup = labeled_loss(l_idx) if l_idx is not None else None
            cons = unlabeled_loss(u_idx) if cfg.include_consistency else None
            if sup is not None:
                _check_finite(sup, epoch, step)
                dice_values.append(sup.item())
            if cons is not None:
                _check_finite(cons, epoch, step)
                cons_values.append(cons.item())
                cons = cons * cfg.alpha

            if cfg.regime == "joint":
                total = sup if cons is None else sup + cons
                adam_step(net.params, _gradients(net, total), state, cfg.lr)
                continue
            if sup is not None:
                adam_step(net.params, _gradients(net, sup), state, cfg.lr)
            adam_step(net.params, _gradients(net, cons), state, cfg.lr)

        net.zero_grad()
        checkpoints.append(Checkpoint(epoch, net.state(), config_hash))
        val_iou = val_ece = float("nan")
        if val:
            scores = evaluate(net, val)
            val_iou = float(np.mean([s.iou for s in scores]))
            val_ece = float(np.mean([s.ece for s in scores]))
        metrics["epoch"].append(epoch)
        metrics["dice_loss"].append(float(np.mean(dice_values)))
        metrics["consistency_loss"].append(
            float(np.mean(cons_values)) if cons_values else float("nan")
        )
        metrics["val_iou"].append(val_iou)
        metrics["val_ece"].append(val_ece)
        logger.info(
            "epoch %d: dice %.4f consistency %.4g val iou %.4f val ece %.4f",
            epoch,
            metrics["dice_loss"][-1],
            metrics["consistency_loss"][-1],
            val_iou,
            val_ece,
        )
    return TrainResult(checkpoints, metrics)


def write_metrics(metrics: Mapping[str, Sequence], path: str) -> None:
    write_csv(path, {name: list(metrics[name]) for name in METRIC_COLUMNS})


@dataclass
class FitResult:
    net: Network
    result: TrainResult
    final: list[Checkpoint]


def fit(
    network_config: NetworkConfig,
    cfg: TrainConfig,
    labeled: Sequence[Sample],
    unlabeled: Sequence[Sample],
    val: Sequence[Sample] = (),
    progress: bool = False,
) -> FitResult:
    """
    Build a network from ``cfg.seed``, train it, and load the average of the last
    ``avg_last_k`` checkpoints when averaging parameters.
    """
    net = build_network(network_config, cfg.seed)
    result = train(net, labeled, unlabeled, cfg, val, progress)
    final = result.checkpoints[-cfg.avg_last_k :]
    if cfg.average == "parameters":
        net.load(average_checkpoints(final).params)
    return FitResult(net, result, final)


def predict_final(fitted: FitResult, images: np.ndarray, average: str) -> Prediction:
    """Prediction of a fitted model under the configured averaging rule."""
    if average == "predictions":
        return predict_ensemble(fitted.net, fitted.final, images)
    return predict(fitted.net, images)
