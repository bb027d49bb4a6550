"""Synthetic segmentation datasets, binary morphology and augmentations."""
import os
from dataclasses import dataclass
from dataclasses import field
from dataclasses import replace
from logging import getLogger
from typing import Literal
from typing import Optional
from typing import Sequence

import cv2
import numpy as np
from scipy import ndimage
from scipy.ndimage import convolve1d
from scipy.signal.windows import gaussian

from .tensor import read_mmt
from .tensor import write_mmt
from .typing import AX_HEIGHT
from .typing import AX_WIDTH
from .typing import FeatureMap
from .typing import Float2D
from .typing import FloatND
from .typing import Mask2D
from .typing import MorphOp
from .utils import add_clock
from .utils import config_from_dict
from .utils import config_to_dict
from .utils import create_directory
from .utils import read_json
from .utils import write_json

logger = getLogger(__name__)

FORMAT_VERSION = 1
SPLITS = ("train_labeled", "train_unlabeled", "val", "test")
AugmentKind = Literal["hflip", "vflip", "gaussian_noise"]


@dataclass(frozen=True)
class DatasetSpec:
    """
    Parameters of a synthetic segmentation dataset.

    Parameters:
    ----------
    kind:
        ``tubes`` (vessel-like smooth curves) or ``blobs`` (unions of ellipses).
    size:
        image side, a power of two >= 32.
    seed:
        root seed; sample ``i`` is drawn from ``SeedSequence([seed, i])``.
    noise_sigma:
        standard deviation of the additive image noise.
    thickness:
        inclusive range of tube line thickness in pixels.
    n_shapes:
        inclusive range of curves (tubes) or ellipses (blobs) per image.
    radius:
        inclusive range of ellipse semi-axes in pixels.
    foreground_fraction:
        accepted band of mask foreground fraction.
    n_labeled, n_unlabeled, n_val, n_test:
        split sizes.
    max_retries:
        draws per sample before giving up on the foreground band.
    """

    kind: Literal["tubes", "blobs"] = "tubes"
    size: int = 32
    seed: int = 0
    noise_sigma: float = 0.3
    thickness: tuple[int, int] = (1, 3)
    n_shapes: tuple[int, int] = (1, 3)
    radius: tuple[int, int] = (3, 8)
    foreground_fraction: tuple[float, float] = (0.03, 0.25)
    n_labeled: int = 5
    n_unlabeled: int = 200
    n_val: int = 10
    n_test: int = 50
    max_retries: int = 100

    @property
    def count(self) -> int:
        return self.n_labeled + self.n_unlabeled + self.n_val + self.n_test

    def validate(self) -> None:
        if self.kind not in ("tubes", "blobs"):
            raise ValueError(f"DatasetSpec.kind must be tubes/blobs, got {self.kind!r}")
        if self.size < 32 or self.size & (self.size - 1):
            raise ValueError(
                f"DatasetSpec.size must be a power of two >= 32, got {self.size}"
            )
        if self.noise_sigma < 0:
            raise ValueError(
                f"DatasetSpec.noise_sigma must be >= 0, got {self.noise_sigma}"
            )
        for name in ("thickness", "n_shapes", "radius"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise ValueError(
                    f"DatasetSpec.{name} must be 1 <= lo <= hi, got {(lo, hi)}"
                )
        lo, hi = self.foreground_fraction
        if not 0 < lo <= hi < 1:
            raise ValueError(
                f"DatasetSpec.foreground_fraction must satisfy 0 < lo <= hi < 1,"
                f" got {(lo, hi)}"
            )
        for name in ("n_labeled", "n_unlabeled", "n_val", "n_test"):
            if getattr(self, name) < 0:
                raise ValueError(f"DatasetSpec.{name} must be >= 0")
        if self.count < 1:
            raise ValueError("DatasetSpec describes an empty dataset")
        if self.max_retries < 1:
            raise ValueError(
                f"DatasetSpec.max_retries must be >= 1, got {self.max_retries}"
            )

    @classmethod
    def from_dict(cls, payload: Optional[dict]) -> "DatasetSpec":
        return config_from_dict(cls, payload)


@dataclass(frozen=True)
class Sample:
    id: str
    image: Float2D
    mask: Mask2D

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise ValueError(
                f"sample {self.id}: image {self.image.shape} and mask"
                f" {self.mask.shape} differ in shape"
            )


@dataclass
class Dataset:
    spec: DatasetSpec
    train_labeled: list[Sample] = field(default_factory=list)
    train_unlabeled: list[Sample] = field(default_factory=list)
    val: list[Sample] = field(default_factory=list)
    test: list[Sample] = field(default_factory=list)

    def split(self, name: str) -> list[Sample]:
        if name not in SPLITS:
            raise ValueError(f"Unknown split {name!r}; expected one of {SPLITS}")
        return getattr(self, name)


##############
# Generation #
##############


def _smooth(arr: np.ndarray, window: int = 9, std: float = 2.0) -> np.ndarray:
    kernel = gaussian(window, std)
    return convolve1d(arr, kernel / kernel.sum(), axis=0, mode="nearest")


def _draw_tubes(rng: np.random.Generator, spec: DatasetSpec) -> Mask2D:
    size = spec.size
    mask = np.zeros((size, size), dtype=np.uint8)
    n_curves = rng.integers(spec.n_shapes[0], spec.n_shapes[1] + 1)
    n_steps = size + size // 2
    for _ in range(n_curves):
        start = rng.uniform(0.25 * size, 0.75 * size, size=2)
        heading = rng.uniform(0, 2 * np.pi) + np.cumsum(rng.normal(0, 0.3, n_steps))
        heading = _smooth(heading)
        steps = np.stack([np.cos(heading), np.sin(heading)], axis=1)
        points = start + np.cumsum(steps, axis=0)
        pts = np.round(points).astype(np.int32).reshape(-1, 1, 2)
        thickness = int(rng.integers(spec.thickness[0], spec.thickness[1] + 1))
        cv2.polylines(mask, [pts], isClosed=False, color=1, thickness=thickness)
    return mask


def _draw_blobs(rng: np.random.Generator, spec: DatasetSpec) -> Mask2D:
    size = spec.size
    mask = np.zeros((size, size), dtype=np.uint8)
    n_blobs = rng.integers(spec.n_shapes[0], spec.n_shapes[1] + 1)
    for _ in range(n_blobs):
        margin = size // 8
        center = tuple(int(v) for v in rng.integers(margin, size - margin, size=2))
        lo, hi = spec.radius
        axes = tuple(int(v) for v in rng.integers(lo, hi + 1, 2))
        angle = float(rng.uniform(0, 180))
        cv2.ellipse(mask, center, axes, angle, 0, 360, color=1, thickness=-1)
    return mask


def _render_image(
    rng: np.random.Generator, mask: Mask2D, noise_sigma: float
) -> Float2D:
    size = mask.shape[0]
    blurred = cv2.GaussianBlur(mask.astype(np.float32), (5, 5), 1.0)
    yy, xx = np.mgrid[-1 : 1 : size * 1j, -1 : 1 : size * 1j]
    gx, gy = rng.uniform(-0.5, 0.5, size=2)
    image = blurred + gx * xx + gy * yy + rng.normal(0, noise_sigma, mask.shape)
    std = image.std()
    image = (image - image.mean()) / (std if std > 0 else 1.0)
    return image.astype(np.float32)


def generate_sample(spec: DatasetSpec, index: int) -> Sample:
    """Draw sample ``index`` of ``spec``; a pure function of (spec, index)."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    draw = _draw_tubes if spec.kind == "tubes" else _draw_blobs
    lo, hi = spec.foreground_fraction
    for _ in range(spec.max_retries):
        mask = draw(rng, spec)
        if lo <= mask.mean() <= hi and mask.any():
            image = _render_image(rng, mask, spec.noise_sigma)
            return Sample(f"{spec.kind}-{index:05d}", image, mask)
    raise ValueError(
        f"could not draw a {spec.kind} mask with foreground fraction in"
        f" {spec.foreground_fraction} after {spec.max_retries} retries (sample {index})"
    )


@add_clock
def generate_dataset(spec: DatasetSpec) -> Dataset:
    """
    Generate the four disjoint splits of ``spec``.

    Samples are numbered consecutively through train_labeled, train_unlabeled,
    val and test, so every split is deterministic and ids never repeat.
    """
    spec.validate()
    samples = [generate_sample(spec, i) for i in range(spec.count)]
    bounds = np.cumsum([0, spec.n_labeled, spec.n_unlabeled, spec.n_val, spec.n_test])
    dataset = Dataset(spec)
    for name, start, stop in zip(SPLITS, bounds[:-1], bounds[1:]):
        getattr(dataset, name).extend(samples[start:stop])
    logger.debug("generated %d %s samples", spec.count, spec.kind)
    return dataset


##############
# Morphology #
##############


def morph_binary(mask: np.ndarray, op: MorphOp, radius: int = 1) -> Mask2D:
    """
    Binary dilation or erosion with a square structuring element of side
    ``2 radius + 1``.

    Outside the image counts as background for dilation and as foreground for
    erosion, so ``erode(m) == ~dilate(~m)`` everywhere.
    """
    if radius < 1:
        raise ValueError(f"morph_binary radius must be >= 1, got {radius}")
    structure = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    mask = np.asarray(mask).astype(bool)
    if op == "dilate":
        out = ndimage.binary_dilation(mask, structure=structure, border_value=0)
    elif op == "erode":
        out = ndimage.binary_erosion(mask, structure=structure, border_value=1)
    else:
        raise ValueError(f"Unknown morphological op: {op!r}")
    return out.astype(np.uint8)


def boundary_band(mask: np.ndarray, radius: int = 1) -> np.ndarray:
    """Pixels within ``radius`` of the mask boundary, inside or outside."""
    outer = morph_binary(mask, "dilate", radius).astype(bool)
    inner = morph_binary(mask, "erode", radius).astype(bool)
    return outer & ~inner


################
# Augmentation #
################


def augment(
    image: FloatND, kind: AugmentKind, seed: int = 0, sigma: float = 0.1
) -> FloatND:
    """
    Flip along the last (hflip) or second-to-last (vflip) axis, or add seeded
    Gaussian noise of standard deviation ``sigma``.
    """
    image = np.asarray(image)
    if kind == "hflip":
        return np.flip(image, axis=AX_WIDTH).copy()
    if kind == "vflip":
        return np.flip(image, axis=AX_HEIGHT).copy()
    if kind == "gaussian_noise":
        rng = np.random.default_rng(seed)
        return (image + rng.normal(0, sigma, image.shape)).astype(image.dtype)
    raise ValueError(f"Unknown augmentation: {kind!r}")


def augment_sample(
    sample: Sample,
    kinds: Sequence[AugmentKind],
    rng: np.random.Generator,
    sigma: float = 0.1,
) -> Sample:
    """
    Apply each of ``kinds`` to a sample: flips with probability 1/2 (and to the
    mask too), noise always (image only). Draws a fixed amount from ``rng``.
    """
    image, mask = sample.image, sample.mask
    for kind in kinds:
        if kind not in ("hflip", "vflip", "gaussian_noise"):
            raise ValueError(f"Unknown augmentation: {kind!r}")
        coin, seed = rng.random(), int(rng.integers(2**31))
        if kind == "gaussian_noise":
            image = augment(image, kind, seed, sigma)
        elif coin < 0.5:
            image = augment(image, kind)
            mask = augment(mask, kind)
    return replace(sample, image=image, mask=mask)


def stack_batch(
    samples: Sequence[Sample], dtype: str = "float32"
) -> tuple[FeatureMap, FeatureMap]:
    """Images and masks of ``samples`` as [N, 1, H, W] arrays."""
    images = np.stack([s.image for s in samples])[:, None].astype(dtype)
    masks = np.stack([s.mask for s in samples])[:, None].astype(dtype)
    return images, masks


###########
# File IO #
###########


def write_sample(sample: Sample, directory: str) -> None:
    """
    Write ``images/<id>.mmt``, its ``images/<id>.json`` sidecar and
    ``masks/<id>.mmt``.
    """
    create_directory(os.path.join(directory, "images"))
    create_directory(os.path.join(directory, "masks"))
    write_mmt(os.path.join(directory, "images", f"{sample.id}.mmt"), sample.image)
    write_json(
        os.path.join(directory, "images", f"{sample.id}.json"),
        {"id": sample.id, "shape": list(sample.image.shape), "format": "MMT1"},
    )
    write_mmt(os.path.join(directory, "masks", f"{sample.id}.mmt"), sample.mask)


def read_sample(directory: str, sample_id: str) -> Sample:
    sidecar = read_json(os.path.join(directory, "images", f"{sample_id}.json"))
    image = read_mmt(os.path.join(directory, "images", f"{sample_id}.mmt"))
    mask_path = os.path.join(directory, "masks", f"{sample_id}.mmt")
    mask = read_mmt(mask_path)
    if list(image.shape) != sidecar["shape"]:
        raise ValueError(
            f"image {sample_id} has shape {image.shape},"
            f" sidecar says {sidecar['shape']}"
        )
    if not np.isin(mask, (0.0, 1.0)).all():
        raise ValueError(f"non-binary mask: {mask_path} holds values other than 0/1")
    return Sample(sample_id, image, mask.astype(np.uint8))


def write_dataset(dataset: Dataset, directory: str) -> None:
    create_directory(directory)
    for name in SPLITS:
        for sample in dataset.split(name):
            write_sample(sample, directory)
    write_json(
        os.path.join(directory, "meta.json"),
        {
            "format_version": FORMAT_VERSION,
            "spec": config_to_dict(dataset.spec),
            "splits": {name: [s.id for s in dataset.split(name)] for name in SPLITS},
        },
    )


def read_dataset(directory: str) -> Dataset:
    meta = read_json(os.path.join(directory, "meta.json"))
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(
            f"unsupported dataset format version {meta.get('format_version')!r}"
        )
    dataset = Dataset(DatasetSpec.from_dict(meta["spec"]))
    for name in SPLITS:
        getattr(dataset, name).extend(
            read_sample(directory, sample_id) for sample_id in meta["splits"][name]
        )
    return dataset
