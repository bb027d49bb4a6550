"""
Effective receptive field: closed-form ratios for the attention shifting blocks
and a gradient-of-center measurement of ERFs of small layer stacks.
"""
import os
from dataclasses import dataclass
from logging import getLogger
from typing import Literal
from typing import Mapping
from typing import Optional
from typing import Sequence

import numpy as np
from scipy.stats import binom
from sklearn.metrics import r2_score

from .network import _unit
from .network import BlockKind
from .network import ConvUnit
from .network import init_params
from .network import main_forward
from .network import make_block
from .network import nasb_side_forward
from .network import ParamSpec
from .network import pasb_side_forward
from .tensor import Tensor
from .tensor import backward
from .tensor import write_mmt
from .typing import ERFMode
from .typing import Float1D
from .typing import Float2D
from .utils import add_clock
from .utils import config_from_dict
from .utils import create_directory
from .utils import write_csv

logger = getLogger(__name__)


###############
# Closed form #
###############


@dataclass(frozen=True)
class PathEnsemble:
    """A residual stack of ``n_units`` skip units seen as an ensemble of paths."""

    n_units: int = 2
    p: float = 0.5


def path_weights(ensemble: PathEnsemble) -> Float1D:
    """Share of paths traversing ``k`` residual units, ``k = 0 .. n_units``."""
    if ensemble.n_units < 0:
        raise ValueError(f"PathEnsemble.n_units must be >= 0, got {ensemble.n_units}")
    if not 0 <= ensemble.p <= 1:
        raise ValueError(f"PathEnsemble.p must lie in [0, 1], got {ensemble.p}")
    return binom.pmf(np.arange(ensemble.n_units + 1), ensemble.n_units, ensemble.p)


def analytic_erf_ratio_pasb(K: int, K_prime: int, n: int) -> float:
    """
    ERF of a block with a ``K_prime`` side branch over the ERF of the plain block
    with ``n`` preceding ``K``-wide layers: ``(K'/K) sqrt((n + 1) / (n + 2))``.
    """
    if K < 1 or K_prime < 1:
        raise ValueError(f"kernel sizes must be >= 1, got K={K}, K_prime={K_prime}")
    if n < 0:
        raise ValueError(f"layer depth n must be >= 0, got {n}")
    return K_prime / K * np.sqrt((n + 1) / (n + 2))


def analytic_erf_ratio_nasb(n: int, ensemble: PathEnsemble = PathEnsemble()) -> float:
    """
    ERF of the residual side branch over the ERF of the plain branch after ``n``
    layers: paths crossing ``k`` of the ``N`` units see ``n + k`` layers, so the
    ratio is ``sum_k w_k sqrt((n + k) / (n + N))``.
    """
    if n < 1:
        raise ValueError(f"layer depth n must be >= 1, got {n}")
    weights = path_weights(ensemble)
    k = np.arange(ensemble.n_units + 1)
    return float(np.sum(weights * np.sqrt((n + k) / (n + ensemble.n_units))))


##########
# Stacks #
##########


@dataclass(frozen=True)
class ConvStack:
    """``n_layers`` single-channel 3x3 conv units."""

    n_layers: int
    name: str = "stack"

    @property
    def units(self) -> tuple[ConvUnit, ...]:
        return tuple(_unit(f"{self.name}.{i}", 1, 1) for i in range(self.n_layers))

    def param_specs(self) -> list[ParamSpec]:
        return [p for unit in self.units for p in unit.param_specs()]

    def __call__(self, x: Tensor, params, linearized: bool) -> Tensor:
        return main_forward(x, self.units, params, linearized)


@dataclass(frozen=True)
class BranchStack:
    """One branch of a single-channel decoder block."""

    kind: BlockKind
    branch: Literal["main", "side"]
    dilation_rate: int = 5

    @property
    def block(self):
        return make_block("branch", self.kind, 1, 1, self.dilation_rate)

    def param_specs(self) -> list[ParamSpec]:
        return self.block.param_specs()

    def __call__(self, x: Tensor, params, linearized: bool) -> Tensor:
        block = self.block
        if self.branch == "main":
            return main_forward(x, block.main, params, linearized)
        if block.kind == BlockKind.POSITIVE:
            return pasb_side_forward(x, block.side_conv, params)
        if block.kind == BlockKind.NEGATIVE:
            return nasb_side_forward(
                x, block.side, block.projection, params, linearized
            )
        raise ValueError(f"{block.kind.value} blocks have no side branch")


@dataclass
class ERFReport:
    grad_map: Float2D
    erf_size: float
    extent: int
    peak: tuple[int, int]
    mode: ERFMode
    seeds: tuple[int, ...]
    per_seed_sizes: tuple[float, ...]


def _support(grad_map: Float2D, threshold: float) -> np.ndarray:
    return grad_map >= threshold * grad_map.max()


def erf_size(grad_map: Float2D, threshold: float = 0.05) -> float:
    """Square root of the number of pixels at or above ``threshold`` of the peak."""
    if grad_map.max() <= 0:
        return 0.0
    return float(np.sqrt(_support(grad_map, threshold).sum()))


def _extent(support: np.ndarray) -> int:
    rows, cols = np.nonzero(support)
    return int(max(rows.max() - rows.min(), cols.max() - cols.min()) + 1)


@add_clock
def measure_erf(
    stack,
    mode: ERFMode = "linearized",
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    size: int = 33,
    prefix_layers: int = 0,
    threshold: float = 0.05,
) -> ERFReport:
    """
    Average |d out[center] / d input| of a single-channel stack over seeds.

    Parameters:
    ----------
    stack:
        a :class:`ConvStack` or :class:`BranchStack`.
    mode:
        ``linearized`` drops activations and normalization and draws strictly
        positive weights; ``as_is`` keeps them with Kaiming initialization.
    seeds:
        one initialization (and random input) per seed.
    size:
        odd side of the square input plane.
    prefix_layers:
        plain 3x3 units run before ``stack``.
    threshold:
        support threshold relative to the peak.
    """
    if mode not in ("linearized", "as_is"):
        raise ValueError(f"Unknown ERF mode: {mode!r}")
    if size % 2 == 0:
        raise ValueError(f"measure_erf needs an odd input size, got {size}")
    if not seeds:
        raise ValueError("measure_erf needs at least one seed")
    linearized = mode == "linearized"
    prefix = ConvStack(prefix_layers, name="prefix")
    specs = prefix.param_specs() + stack.param_specs()
    center = size // 2
    impulse = np.zeros((1, 1, size, size))
    impulse[0, 0, center, center] = 1.0

    maps = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        params = init_params(specs, rng, "positive" if linearized else "kaiming")
        x = Tensor(rng.standard_normal((1, 1, size, size)), requires_grad=True)
        out = stack(prefix(x, params, linearized), params, linearized)
        if out.shape != x.shape:
            raise ValueError(
                f"measured stack maps {x.shape} to {out.shape}; need 1 channel"
            )
        backward((out * Tensor(impulse)).sum())
        maps.append(np.abs(x.grad[0, 0]))

    grad_map = np.mean(maps, axis=0)
    support = _support(grad_map, threshold)
    rim = np.concatenate([support[0], support[-1], support[:, 0], support[:, -1]])
    if rim.any():
        raise ValueError(
            f"ERF support touches the border of the {size}x{size} input; enlarge size"
        )
    peak = np.unravel_index(np.argmax(grad_map), grad_map.shape)
    return ERFReport(
        grad_map=grad_map,
        erf_size=erf_size(grad_map, threshold),
        extent=_extent(support),
        peak=(int(peak[0]), int(peak[1])),
        mode=mode,
        seeds=tuple(seeds),
        per_seed_sizes=tuple(erf_size(m, threshold) for m in maps),
    )


def fit_sqrt_growth(
    depths: Sequence[int], sizes: Sequence[float]
) -> tuple[float, float]:
    """Least-squares ``c`` of ``size = c sqrt(depth)`` and the R^2 of that fit."""
    root = np.sqrt(np.asarray(depths, dtype=float))
    sizes = np.asarray(sizes, dtype=float)
    c = float(root @ sizes / (root @ root))
    return c, float(r2_score(sizes, c * root))


@dataclass(frozen=True)
class ERFConfig:
    size: int = 33
    n_seeds: int = 5
    threshold: float = 0.05
    prefix_layers: int = 1
    max_depth: int = 8
    mode: ERFMode = "linearized"

    def validate(self) -> None:
        if self.size < 3 or self.size % 2 == 0:
            raise ValueError(f"ERFConfig.size must be odd and >= 3, got {self.size}")
        if self.n_seeds < 1:
            raise ValueError(f"ERFConfig.n_seeds must be >= 1, got {self.n_seeds}")
        if not 0 < self.threshold < 1:
            raise ValueError(
                f"ERFConfig.threshold must lie in (0, 1), got {self.threshold}"
            )
        if self.prefix_layers < 0:
            raise ValueError(
                f"ERFConfig.prefix_layers must be >= 0, got {self.prefix_layers}"
            )
        if self.max_depth < 2:
            raise ValueError(f"ERFConfig.max_depth must be >= 2, got {self.max_depth}")
        if self.mode not in ("linearized", "as_is"):
            raise ValueError(
                f"ERFConfig.mode must be linearized/as_is, got {self.mode!r}"
            )

    @classmethod
    def from_dict(cls, payload: Optional[dict]) -> "ERFConfig":
        return config_from_dict(cls, payload)


def branch_reports(
    cfg: ERFConfig, dilation_rate: int = 5, seed: int = 0
) -> dict[str, ERFReport]:
    """
    ERF of every branch of both attention shifting blocks, plus the bare dilated
    side conv (``pasb_side_alone``) whose extent is ``d (K - 1) + 1``.
    """
    seeds = tuple(range(seed, seed + cfg.n_seeds))
    kwargs = dict(mode=cfg.mode, seeds=seeds, size=cfg.size, threshold=cfg.threshold)
    reports = {}
    for kind, label in ((BlockKind.POSITIVE, "pasb"), (BlockKind.NEGATIVE, "nasb")):
        for branch in ("main", "side"):
            reports[f"{label}_{branch}"] = measure_erf(
                BranchStack(kind, branch, dilation_rate),
                prefix_layers=cfg.prefix_layers,
                **kwargs,
            )
    reports["pasb_side_alone"] = measure_erf(
        BranchStack(BlockKind.POSITIVE, "side", dilation_rate),
        prefix_layers=0,
        **kwargs,
    )
    return reports


def depth_reports(cfg: ERFConfig, seed: int = 0) -> dict[str, ERFReport]:
    seeds = tuple(range(seed, seed + cfg.n_seeds))
    return {
        f"stack_{n}": measure_erf(
            ConvStack(n), cfg.mode, seeds, cfg.size, threshold=cfg.threshold
        )
        for n in range(1, cfg.max_depth + 1)
    }


def write_erf_reports(reports: Mapping[str, ERFReport], directory: str) -> str:
    """
    One MMT1 gradient map per stack and a long-format ``erf_summary.csv``: a row
    per seed and an ``averaged_map`` row holding the size of the seed-averaged
    map. ``extent`` is always that of the averaged map.
    """
    create_directory(directory)
    stacks, modes, seeds, sizes, extents = [], [], [], [], []
    for name, report in reports.items():
        write_mmt(os.path.join(directory, f"erf_{name}.mmt"), report.grad_map)
        rows = [(str(s), v) for s, v in zip(report.seeds, report.per_seed_sizes)]
        for seed, value in rows + [("averaged_map", report.erf_size)]:
            stacks.append(name)
            modes.append(report.mode)
            seeds.append(seed)
            sizes.append(float(value))
            extents.append(report.extent)
    path = os.path.join(directory, "erf_summary.csv")
    write_csv(
        path,
        {
            "stack": stacks,
            "mode": modes,
            "seed": seeds,
            "erf_size": sizes,
            "extent": extents,
        },
    )
    return path
