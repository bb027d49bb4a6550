"""Encoder with two attention-shifting decoders.

A shared U-net encoder feeds two decoders. Each decoder block is either a
standard block, a Positive Attention Shifting Block (dilated side branch, larger
effective receptive field) or a Negative Attention Shifting Block (residual side
branch, smaller effective receptive field). The side branch output goes through a
sigmoid and gates the main branch features.
"""
from dataclasses import dataclass
from dataclasses import field
from enum import Enum
from logging import getLogger
from typing import Literal
from typing import Mapping
from typing import NamedTuple
from typing import Optional
from typing import Union

import numpy as np

from .tensor import apply_activation
from .tensor import concat
from .tensor import conv2d
from .tensor import ConvSpec
from .tensor import morph_features
from .tensor import normalize_features
from .tensor import resample
from .tensor import Tensor
from .typing import AX_CHANNEL

logger = getLogger(__name__)

ParamInit = Literal["kaiming", "positive"]


class BlockKind(str, Enum):
    STANDARD = "standard"
    POSITIVE = "positive_attention"
    NEGATIVE = "negative_attention"
    MORPH_DILATE = "morph_dilate"
    MORPH_ERODE = "morph_erode"


class AttentionMode(str, Enum):
    MULTIPLICATIVE = "multiplicative"
    RESIDUAL = "residual"


@dataclass(frozen=True)
class NetworkConfig:
    """
    Declarative description of the encoder + two-decoder model.

    Parameters:
    ----------
    width:
        channels of the first encoder stage; doubled at every level.
    depth:
        number of down/up levels.
    dilation_rate:
        dilation of the positive attention side branch.
    decoder1_kind, decoder2_kind:
        block kind used throughout each decoder.
    attention_mode:
        how the sigmoid mask is applied to the main branch features.
    in_channels, out_classes:
        image channels and output maps (binary segmentation: 1).
    input_size:
        spatial size the network is configured for; the deepest level must be at
        least 4 pixels wide.
    dtype:
        parameter precision, ``float32`` or ``float64``.
    morph_radius:
        window radius of the morph_dilate / morph_erode baseline blocks.
    """

    width: int = 8
    depth: int = 3
    dilation_rate: int = 5
    decoder1_kind: BlockKind = BlockKind.POSITIVE
    decoder2_kind: BlockKind = BlockKind.NEGATIVE
    attention_mode: AttentionMode = AttentionMode.MULTIPLICATIVE
    in_channels: int = 1
    out_classes: int = 1
    input_size: int = 32
    dtype: str = "float32"
    morph_radius: int = 1

    def __post_init__(self):
        # accept plain strings, e.g. from JSON
        for name in ("decoder1_kind", "decoder2_kind"):
            value = getattr(self, name)
            try:
                object.__setattr__(self, name, BlockKind(value))
            except ValueError:
                raise ValueError(f"NetworkConfig.{name}: unknown block kind {value!r}")
        try:
            object.__setattr__(
                self, "attention_mode", AttentionMode(self.attention_mode)
            )
        except ValueError:
            raise ValueError(
                f"NetworkConfig.attention_mode: unknown mode {self.attention_mode!r}"
            )

    def validate(self) -> None:
        if self.width < 4:
            raise ValueError(f"NetworkConfig.width must be >= 4, got {self.width}")
        if self.depth < 2:
            raise ValueError(f"NetworkConfig.depth must be >= 2, got {self.depth}")
        if self.dilation_rate < 1:
            raise ValueError(
                f"NetworkConfig.dilation_rate must be >= 1, got {self.dilation_rate}"
            )
        if self.in_channels < 1:
            raise ValueError(
                f"NetworkConfig.in_channels must be >= 1, got {self.in_channels}"
            )
        if self.out_classes != 1:
            raise ValueError(
                f"NetworkConfig.out_classes must be 1 (binary), got {self.out_classes}"
            )
        scale = 2**self.depth
        if self.input_size % scale or self.input_size // scale < 4:
            raise ValueError(
                f"NetworkConfig.input_size {self.input_size} must be divisible by"
                f" 2**depth={scale} and leave >= 4 pixels at the deepest level"
            )
        if self.dtype not in ("float32", "float64"):
            raise ValueError(
                f"NetworkConfig.dtype must be float32/float64, got {self.dtype}"
            )
        if self.morph_radius < 1:
            raise ValueError(
                f"NetworkConfig.morph_radius must be >= 1, got {self.morph_radius}"
            )


##########
# Layout #
##########


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    role: Literal["weight", "bias", "gain", "shift"]
    fan_in: int = 1


@dataclass(frozen=True)
class ConvLayer:
    name: str
    spec: ConvSpec

    @property
    def weight(self) -> str:
        return f"{self.name}.weight"

    @property
    def bias(self) -> str:
        return f"{self.name}.bias"

    def param_specs(self) -> list[ParamSpec]:
        s = self.spec
        fan_in = s.in_channels * s.kernel * s.kernel
        return [
            ParamSpec(self.weight, s.weight_shape, "weight", fan_in),
            ParamSpec(self.bias, (s.out_channels,), "bias"),
        ]


@dataclass(frozen=True)
class ConvUnit:
    """Convolution followed by activation and normalization."""

    conv: ConvLayer

    @property
    def gain(self) -> str:
        return f"{self.conv.name}.norm.gain"

    @property
    def shift(self) -> str:
        return f"{self.conv.name}.norm.shift"

    def param_specs(self) -> list[ParamSpec]:
        c = self.conv.spec.out_channels
        return self.conv.param_specs() + [
            ParamSpec(self.gain, (c,), "gain"),
            ParamSpec(self.shift, (c,), "shift"),
        ]


def _unit(name: str, in_ch: int, out_ch: int, dilation: int = 1) -> ConvUnit:
    return ConvUnit(ConvLayer(name, ConvSpec.same(in_ch, out_ch, 3, dilation)))


@dataclass(frozen=True)
class DecoderBlock:
    name: str
    kind: BlockKind
    main: tuple[ConvUnit, ...]
    side_conv: Optional[ConvLayer] = None
    side: tuple[ConvUnit, ...] = ()
    projection: Optional[ConvLayer] = None

    def param_specs(self) -> list[ParamSpec]:
        specs = [p for unit in self.main for p in unit.param_specs()]
        if self.side_conv is not None:
            specs += self.side_conv.param_specs()
        specs += [p for unit in self.side for p in unit.param_specs()]
        if self.projection is not None:
            specs += self.projection.param_specs()
        return specs


def make_block(
    name: str, kind: BlockKind, in_ch: int, out_ch: int, dilation_rate: int = 5
) -> DecoderBlock:
    """Layout of one decoder block of the given kind."""
    kind = BlockKind(kind)
    main = (
        _unit(f"{name}.main0", in_ch, out_ch),
        _unit(f"{name}.main1", out_ch, out_ch),
    )
    if kind == BlockKind.POSITIVE:
        spec = ConvSpec.same(in_ch, out_ch, 3, dilation_rate)
        side_conv = ConvLayer(f"{name}.side", spec)
        return DecoderBlock(name, kind, main, side_conv=side_conv)
    if kind == BlockKind.NEGATIVE:
        side = (
            _unit(f"{name}.side0", in_ch, out_ch),
            _unit(f"{name}.side1", out_ch, out_ch),
        )
        projection = None
        if in_ch != out_ch:
            projection = ConvLayer(f"{name}.proj", ConvSpec.same(in_ch, out_ch, 1))
        return DecoderBlock(name, kind, main, side=side, projection=projection)
    return DecoderBlock(name, kind, main)


def init_params(
    specs: list[ParamSpec],
    rng: np.random.Generator,
    init: ParamInit = "kaiming",
    dtype: str = "float64",
) -> dict[str, Tensor]:
    """
    Create trainable tensors for ``specs`` in order.

    ``kaiming`` draws conv weights from U(-b, b) with ``b = sqrt(6 / fan_in)``;
    ``positive`` draws them from U(0.5, 1.5) / fan_in so that no two paths through
    the network cancel. Biases and shifts start at zero, gains at one.
    """
    params = {}
    for spec in specs:
        if spec.role == "weight":
            if init == "kaiming":
                bound = np.sqrt(6.0 / spec.fan_in)
                values = rng.uniform(-bound, bound, size=spec.shape)
            else:
                values = rng.uniform(0.5, 1.5, size=spec.shape) / spec.fan_in
        elif spec.role == "gain":
            values = np.ones(spec.shape)
        else:
            values = np.zeros(spec.shape)
        params[spec.name] = Tensor(values.astype(dtype), requires_grad=True)
    return params


###########
# Network #
###########


@dataclass
class Network:
    """
    Instantiated encoder + two decoders.

    ``params`` is the registry of every trainable tensor; the layout objects only
    hold names, so swapping a registry entry changes what ``forward`` uses.
    """

    config: NetworkConfig
    seed: int
    encoder: tuple[tuple[ConvUnit, ...], ...]
    up: tuple[tuple[ConvLayer, ...], tuple[ConvLayer, ...]]
    decoders: tuple[tuple[DecoderBlock, ...], tuple[DecoderBlock, ...]]
    heads: tuple[ConvLayer, ConvLayer]
    params: dict[str, Tensor] = field(default_factory=dict)

    def param_specs(self) -> list[ParamSpec]:
        specs = [
            p for level in self.encoder for unit in level for p in unit.param_specs()
        ]
        for d in range(2):
            for up, block in zip(self.up[d], self.decoders[d]):
                specs += up.param_specs() + block.param_specs()
            specs += self.heads[d].param_specs()
        return specs

    @property
    def names(self) -> list[str]:
        return list(self.params)

    def parameter_count(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        """Copy of every parameter value, keyed by registry name."""
        return {name: t.data.copy() for name, t in self.params.items()}

    def load(self, state: Mapping[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = sorted(set(self.params) - set(state))
            extra = sorted(set(state) - set(self.params))
            raise ValueError(
                f"parameter names do not match the registry; missing={missing[:3]}"
                f" unexpected={extra[:3]}"
            )
        for name, t in self.params.items():
            value = np.asarray(state[name])
            if value.shape != t.shape:
                raise ValueError(
                    f"parameter {name} has shape {value.shape}, expected {t.shape}"
                )
            t.data = value.astype(t.dtype, copy=True)
            t.zero_grad()


def build_network(config: NetworkConfig, seed: int = 0) -> Network:
    """
    Instantiate the model of ``config`` with Kaiming-uniform weights drawn from
    ``seed``. Identical (config, seed) pairs yield identical registries.
    """
    config.validate()
    channels = [config.width * 2**i for i in range(config.depth + 1)]

    encoder = []
    in_ch = config.in_channels
    for level, ch in enumerate(channels):
        encoder.append(
            (
                _unit(f"encoder.{level}.unit0", in_ch, ch),
                _unit(f"encoder.{level}.unit1", ch, ch),
            )
        )
        in_ch = ch

    ups, decoders, heads = [], [], []
    for d, kind in ((1, config.decoder1_kind), (2, config.decoder2_kind)):
        up, blocks = [], []
        for level in reversed(range(config.depth)):
            prefix = f"decoder{d}.{level}"
            spec = ConvSpec.same(channels[level + 1], channels[level])
            up.append(ConvLayer(f"{prefix}.up", spec))
            blocks.append(
                make_block(
                    f"{prefix}.block",
                    kind,
                    2 * channels[level],
                    channels[level],
                    config.dilation_rate,
                )
            )
        ups.append(tuple(up))
        decoders.append(tuple(blocks))
        spec = ConvSpec.same(channels[0], config.out_classes, 1)
        heads.append(ConvLayer(f"decoder{d}.head", spec))

    net = Network(
        config=config,
        seed=seed,
        encoder=tuple(encoder),
        up=(ups[0], ups[1]),
        decoders=(decoders[0], decoders[1]),
        heads=(heads[0], heads[1]),
    )
    rng = np.random.default_rng(seed)
    net.params = init_params(net.param_specs(), rng, "kaiming", config.dtype)
    logger.debug("built network with %d parameters", net.parameter_count())
    return net


###########
# Forward #
###########

Params = Mapping[str, Tensor]


def conv_forward(x: Tensor, layer: ConvLayer, params: Params) -> Tensor:
    return conv2d(x, layer.spec, params[layer.weight], params[layer.bias])


def unit_forward(
    x: Tensor, unit: ConvUnit, params: Params, linearized: bool = False
) -> Tensor:
    """conv -> relu -> normalization; only the conv when ``linearized``."""
    y = conv_forward(x, unit.conv, params)
    if linearized:
        return y
    y = apply_activation(y, "relu")
    return normalize_features(y, params[unit.gain], params[unit.shift])


def main_forward(
    x: Tensor, main: tuple[ConvUnit, ...], params: Params, linearized: bool = False
) -> Tensor:
    for unit in main:
        x = unit_forward(x, unit, params, linearized)
    return x


def _attention(side_out: Tensor, linearized: bool) -> Tensor:
    return side_out if linearized else apply_activation(side_out, "sigmoid")


def _gate(features: Tensor, attention: Tensor, mode: AttentionMode) -> Tensor:
    if AttentionMode(mode) == AttentionMode.MULTIPLICATIVE:
        return features * attention
    return features + features * attention


def pasb_side_forward(x: Tensor, side: ConvLayer, params: Params) -> Tensor:
    """Dilated side branch of the positive block, before the sigmoid."""
    return conv_forward(x, side, params)


def nasb_side_forward(
    x: Tensor,
    side: tuple[ConvUnit, ...],
    projection: Optional[ConvLayer],
    params: Params,
    linearized: bool = False,
) -> Tensor:
    """Residual side branch of the negative block, before the sigmoid."""
    for i, unit in enumerate(side):
        skip = x
        if i == 0 and projection is not None:
            skip = conv_forward(x, projection, params)
        x = skip + unit_forward(x, unit, params, linearized)
    return x


def pasb_forward(
    x: Tensor,
    main: tuple[ConvUnit, ...],
    side: ConvLayer,
    params: Params,
    mode: AttentionMode = AttentionMode.MULTIPLICATIVE,
    linearized: bool = False,
) -> tuple[Tensor, Tensor]:
    """
    Positive Attention Shifting Block.

    Returns:
    -------
    out:
        main branch features gated by the attention mask.
    attention:
        sigmoid of the dilated side branch, strictly inside (0, 1).
    """
    features = main_forward(x, main, params, linearized)
    attention = _attention(pasb_side_forward(x, side, params), linearized)
    return _gate(features, attention, mode), attention


def nasb_forward(
    x: Tensor,
    main: tuple[ConvUnit, ...],
    side: tuple[ConvUnit, ...],
    projection: Optional[ConvLayer],
    params: Params,
    mode: AttentionMode = AttentionMode.MULTIPLICATIVE,
    linearized: bool = False,
) -> tuple[Tensor, Tensor]:
    """Negative Attention Shifting Block; see :func:`pasb_forward`."""
    features = main_forward(x, main, params, linearized)
    side_out = nasb_side_forward(x, side, projection, params, linearized)
    attention = _attention(side_out, linearized)
    return _gate(features, attention, mode), attention


class BlockTaps(NamedTuple):
    pre: Tensor
    attention: Optional[Tensor]
    post: Tensor


def block_forward(
    x: Tensor,
    block: DecoderBlock,
    params: Params,
    mode: AttentionMode,
    morph_radius: int = 1,
) -> BlockTaps:
    if block.kind == BlockKind.POSITIVE:
        pre = main_forward(x, block.main, params)
        attention = _attention(pasb_side_forward(x, block.side_conv, params), False)
        return BlockTaps(pre, attention, _gate(pre, attention, mode))
    if block.kind == BlockKind.NEGATIVE:
        pre = main_forward(x, block.main, params)
        side_out = nasb_side_forward(x, block.side, block.projection, params)
        attention = _attention(side_out, False)
        return BlockTaps(pre, attention, _gate(pre, attention, mode))
    pre = main_forward(x, block.main, params)
    if block.kind == BlockKind.MORPH_DILATE:
        return BlockTaps(pre, None, morph_features(pre, "dilate", morph_radius))
    if block.kind == BlockKind.MORPH_ERODE:
        return BlockTaps(pre, None, morph_features(pre, "erode", morph_radius))
    return BlockTaps(pre, None, pre)


class ForwardOutput(NamedTuple):
    p1: Tensor
    p2: Tensor
    taps: dict[str, BlockTaps]


def _as_input(net: Network, images: Union[Tensor, np.ndarray]) -> Tensor:
    if isinstance(images, Tensor):
        if images.dtype == np.dtype(net.config.dtype):
            return images
        images = images.data
    return Tensor(np.asarray(images, dtype=net.config.dtype))


def forward(net: Network, images: Union[Tensor, np.ndarray]) -> ForwardOutput:
    """
    Run the encoder once and both decoders on its skip features.

    Parameters:
    ----------
    net:
        the network.
    images:
        batch of shape [N, Cin, H, W] with H, W divisible by 2**depth.

    Returns:
    -------
    p1, p2:
        sigmoid probability maps [N, 1, H, W] of decoder 1 and decoder 2.
    taps:
        per decoder block (``decoder{d}.{level}``) the pre-attention features,
        attention mask and post-attention features.
    """
    cfg = net.config
    x = _as_input(net, images)
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ValueError(
            f"forward expects [N, {cfg.in_channels}, H, W] images, got {x.shape}"
        )
    scale = 2**cfg.depth
    h, w = x.shape[2:]
    if h % scale or w % scale:
        raise ValueError(
            f"spatial dims {h}x{w} are not divisible by 2**depth={scale}"
        )

    params = net.params
    skips = []
    for level, units in enumerate(net.encoder):
        if level > 0:
            x = resample(x, "maxpool2")
        x = main_forward(x, units, params)
        skips.append(x)

    outputs, taps = [], {}
    for d in range(2):
        y = skips[-1]
        for up, block in zip(net.up[d], net.decoders[d]):
            level = int(up.name.split(".")[1])
            y = conv_forward(resample(y, "upsample2_nearest"), up, params)
            y = concat([skips[level], y], axis=AX_CHANNEL)
            block_taps = block_forward(
                y, block, params, cfg.attention_mode, cfg.morph_radius
            )
            taps[f"decoder{d + 1}.{level}"] = block_taps
            y = block_taps.post
        logits = conv_forward(y, net.heads[d], params)
        outputs.append(apply_activation(logits, "sigmoid"))
    return ForwardOutput(outputs[0], outputs[1], taps)


def head_probability(net: Network, decoder: int, features: Tensor) -> Tensor:
    """Probability map obtained by applying decoder ``decoder``'s head to a tap."""
    head = net.heads[decoder - 1]
    return apply_activation(conv_forward(features, head, net.params), "sigmoid")
