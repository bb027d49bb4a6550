"""Dense tensors with reverse-mode automatic differentiation.

The engine is deliberately small: every differentiable operation is a
:class:`Function` subclass that computes its forward pass on numpy arrays and
returns the gradient with respect to each input in its backward pass.
:func:`backward` walks the graph recorded by those functions in reverse
topological order.
"""
from dataclasses import dataclass
from dataclasses import field
from logging import getLogger
from typing import Any
from typing import Callable
from typing import Optional
from typing import Sequence
from typing import Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .typing import Activation
from .typing import FloatND
from .typing import MorphOp
from .typing import Resample

logger = getLogger(__name__)

NORM_EPS = 1e-5
REL_ERR_FLOOR = 1e-8

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]


class Function:
    """
    Base class for differentiable operations.

    Subclasses implement ``forward`` on raw arrays and ``backward`` mapping the
    gradient of the output to one gradient (or None) per input tensor.
    """

    def __init__(self, *tensors: "Tensor"):
        self.tensors = tensors
        self.output: Optional["Tensor"] = None

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError("Forward pass not implemented for this function")

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError("Backward pass not implemented for this function")

    @classmethod
    def apply(cls, *tensors: "Tensor", **kwargs: Any) -> "Tensor":
        func = cls(*tensors)
        out_data = func.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = any(t.requires_grad for t in tensors)
        out = Tensor(out_data, requires_grad=requires_grad)
        if requires_grad:
            out.creator = func
            func.output = out
        return out

    @staticmethod
    def unbroadcast(grad: np.ndarray, to_shape: tuple[int, ...]) -> np.ndarray:
        """Sum out broadcast dimensions so that ``grad`` matches ``to_shape``."""
        if grad.shape == to_shape:
            return grad
        while grad.ndim > len(to_shape):
            grad = grad.sum(axis=0)
        for dim, size in enumerate(to_shape):
            if size == 1 and grad.shape[dim] != 1:
                grad = grad.sum(axis=dim, keepdims=True)
        return grad


class Tensor:
    """
    N-dimensional float array that can take part in a differentiation graph.

    Parameters:
    ----------
    data:
        values; non-floating input is converted to float64.
    requires_grad:
        whether gradients should be accumulated into ``grad``.
    dtype:
        optional dtype to cast ``data`` to.
    """

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype: Optional[np.dtype] = None,
    ):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.creator: Optional[Function] = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """A constant view of this tensor: no gradient flows through it."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def _lift(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        return Add.apply(self, self._lift(other))

    def __radd__(self, other):
        return Add.apply(self._lift(other), self)

    def __sub__(self, other):
        return Sub.apply(self, self._lift(other))

    def __rsub__(self, other):
        return Sub.apply(self._lift(other), self)

    def __mul__(self, other):
        return Mul.apply(self, self._lift(other))

    def __rmul__(self, other):
        return Mul.apply(self._lift(other), self)

    def __truediv__(self, other):
        return Div.apply(self, self._lift(other))

    def __rtruediv__(self, other):
        return Div.apply(self._lift(other), self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent: float):
        return Pow.apply(self, exponent=float(exponent))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Mean.apply(self, axis=axis, keepdims=keepdims)


##########################
# Elementwise arithmetic #
##########################


class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        sa, sb = self.shapes
        return self.unbroadcast(grad, sa), self.unbroadcast(grad, sb)


class Sub(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        sa, sb = self.shapes
        return self.unbroadcast(grad, sa), self.unbroadcast(-grad, sb)


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return (
            self.unbroadcast(grad * self.b, self.a.shape),
            self.unbroadcast(grad * self.a, self.b.shape),
        )


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        return (
            self.unbroadcast(grad / self.b, self.a.shape),
            self.unbroadcast(-grad * self.a / (self.b * self.b), self.b.shape),
        )


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Pow(Function):
    def forward(self, a, exponent: float):
        self.a, self.exponent = a, exponent
        return a**exponent

    def backward(self, grad):
        return (grad * self.exponent * self.a ** (self.exponent - 1),)


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.in_shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.in_shape).copy(),)


class Mean(Sum):
    def forward(self, a, axis=None, keepdims=False):
        out = super().forward(a, axis=axis, keepdims=keepdims)
        self.count = a.size // max(out.size, 1)
        return out / self.count

    def backward(self, grad):
        (g,) = super().backward(grad)
        return (g / self.count,)


class Concat(Function):
    def forward(self, *arrays, axis: int = 1):
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate tensors along ``axis`` (channels by default)."""
    return Concat.apply(*tensors, axis=axis)


#######################
# Feature-map helpers #
#######################


@dataclass(frozen=True)
class ConvSpec:
    """
    Geometry of a 2D convolution.

    The effective kernel extent is ``dilation * (kernel - 1) + 1``.
    """

    in_channels: int
    out_channels: int
    kernel: int = 3
    dilation: int = 1
    padding: int = 0
    stride: int = 1

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel", "dilation", "stride"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"ConvSpec.{name} must be a positive int, got {value}")
        if self.padding < 0:
            raise ValueError(f"ConvSpec.padding must be >= 0, got {self.padding}")
        if self.kernel % 2 == 0:
            raise ValueError(f"ConvSpec.kernel must be odd, got {self.kernel}")

    @property
    def extent(self) -> int:
        return self.dilation * (self.kernel - 1) + 1

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)

    @classmethod
    def same(
        cls, in_channels: int, out_channels: int, kernel: int = 3, dilation: int = 1
    ) -> "ConvSpec":
        """Stride-1 convolution padded so that spatial size is preserved."""
        return cls(
            in_channels,
            out_channels,
            kernel=kernel,
            dilation=dilation,
            padding=dilation * (kernel - 1) // 2,
        )

    def output_size(self, size: int) -> int:
        return (size + 2 * self.padding - self.extent) // self.stride + 1


class Conv2d(Function):
    def forward(self, x, w, b, spec: ConvSpec):
        p, d, s, k = spec.padding, spec.dilation, spec.stride, spec.kernel
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(xp, (spec.extent, spec.extent), axis=(2, 3))
        win = win[:, :, ::s, ::s, ::d, ::d]
        self.spec, self.w, self.win, self.xp_shape = spec, w, win, xp.shape
        self.in_hw = x.shape[2:]
        out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
        out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
        return np.ascontiguousarray(out)

    def backward(self, grad):
        spec, w, win = self.spec, self.w, self.win
        p, d, s, k = spec.padding, spec.dilation, spec.stride, spec.kernel
        dw = np.tensordot(grad, win, axes=([0, 2, 3], [0, 2, 3]))
        db = grad.sum(axis=(0, 2, 3))
        dxp = np.zeros(self.xp_shape, dtype=grad.dtype)
        h_out, w_out = grad.shape[2:]
        for i in range(k):
            for j in range(k):
                contrib = np.tensordot(w[:, :, i, j], grad, axes=([0], [1]))
                dxp[
                    :,
                    :,
                    i * d : i * d + s * (h_out - 1) + 1 : s,
                    j * d : j * d + s * (w_out - 1) + 1 : s,
                ] += contrib.transpose(1, 0, 2, 3)
        h, w_in = self.in_hw
        dx = dxp[:, :, p : p + h, p : p + w_in]
        return dx, dw, db


def conv2d(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Tensor) -> Tensor:
    """
    Dilated 2D cross-correlation.

    Parameters:
    ----------
    x:
        input of shape [N, Cin, H, W].
    spec:
        convolution geometry.
    weight:
        kernel of shape [Cout, Cin, K, K].
    bias:
        per output channel offset of shape [Cout].

    Returns:
    -------
    Tensor of shape [N, Cout, H', W'] with
    ``H' = (H + 2 padding - d (K - 1) - 1) // stride + 1``.
    """
    if x.ndim != 4:
        raise ValueError(f"conv2d expects a [N, C, H, W] input, got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ValueError(
            f"conv2d input has {x.shape[1]} channels but ConvSpec expects"
            f" {spec.in_channels} (input shape {x.shape})"
        )
    if weight.shape != spec.weight_shape:
        raise ValueError(
            f"conv2d weight shape {weight.shape} does not match {spec.weight_shape}"
        )
    if bias.shape != (spec.out_channels,):
        raise ValueError(
            f"conv2d bias shape {bias.shape} does not match ({spec.out_channels},)"
        )
    h, w = x.shape[2:]
    if min(h, w) + 2 * spec.padding < spec.extent:
        raise ValueError(
            f"conv2d effective kernel extent {spec.extent} exceeds padded input"
            f" {h + 2 * spec.padding}x{w + 2 * spec.padding}"
        )
    return Conv2d.apply(x, weight, bias, spec=spec)


class ActivationFn(Function):
    def forward(self, x, kind: Activation):
        self.kind = kind
        if kind == "relu":
            self.mask = x > 0
            # NaN propagates
            return np.maximum(x, 0).astype(x.dtype)
        if kind == "sigmoid":
            self.out = expit(x)
            return self.out
        return x.copy()

    def backward(self, grad):
        if self.kind == "relu":
            return (grad * self.mask,)
        if self.kind == "sigmoid":
            return (grad * self.out * (1 - self.out),)
        return (grad,)


def apply_activation(x: Tensor, kind: Activation) -> Tensor:
    """Elementwise relu, sigmoid or identity."""
    if kind not in ("relu", "sigmoid", "identity"):
        raise ValueError(f"Unknown activation kind: {kind!r}")
    return ActivationFn.apply(x, kind=kind)


class MaxPool2(Function):
    def forward(self, x):
        n, c, h, w = x.shape
        blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
        # argmax returns the first maximum, i.e. row-major order within the window
        self.idx = blocks.argmax(axis=-1)[..., None]
        self.in_shape = x.shape
        return np.take_along_axis(blocks, self.idx, axis=-1)[..., 0]

    def backward(self, grad):
        n, c, h, w = self.in_shape
        gb = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad.dtype)
        np.put_along_axis(gb, self.idx, grad[..., None], axis=-1)
        gb = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(n, c, h, w),)


class Upsample2(Function):
    def forward(self, x):
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, grad):
        n, c, h, w = grad.shape
        return (grad.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)),)


def resample(x: Tensor, mode: Resample) -> Tensor:
    """Halve (``maxpool2``) or double (``upsample2_nearest``) the spatial size."""
    if x.ndim != 4:
        raise ValueError(f"resample expects a [N, C, H, W] input, got {x.shape}")
    if mode == "maxpool2":
        h, w = x.shape[2:]
        if h % 2 or w % 2:
            raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
        return MaxPool2.apply(x)
    if mode == "upsample2_nearest":
        return Upsample2.apply(x)
    raise ValueError(f"Unknown resample mode: {mode!r}")


class NormalizeFeatures(Function):
    def forward(self, x, gain, shift, eps: float):
        mu = x.mean(axis=(2, 3), keepdims=True)
        var = x.var(axis=(2, 3), keepdims=True)
        self.inv = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mu) * self.inv
        self.gain = gain
        return gain[None, :, None, None] * self.xhat + shift[None, :, None, None]

    def backward(self, grad):
        xhat, inv = self.xhat, self.inv
        dxhat = grad * self.gain[None, :, None, None]
        dx = inv * (
            dxhat
            - dxhat.mean(axis=(2, 3), keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=(2, 3), keepdims=True)
        )
        dgain = (grad * xhat).sum(axis=(0, 2, 3))
        dshift = grad.sum(axis=(0, 2, 3))
        return dx, dgain, dshift


def normalize_features(
    x: Tensor, gain: Tensor, shift: Tensor, eps: float = NORM_EPS
) -> Tensor:
    """
    Per-sample, per-channel standardization over the spatial dims followed by a
    per-channel affine map.
    """
    if x.ndim != 4:
        raise ValueError(f"normalize_features expects [N, C, H, W], got {x.shape}")
    if x.shape[2] * x.shape[3] < 2:
        raise ValueError(f"normalize_features needs H*W >= 2, got {x.shape}")
    c = x.shape[1]
    if gain.shape != (c,) or shift.shape != (c,):
        raise ValueError(
            f"normalize_features gain/shift must have shape ({c},), got"
            f" {gain.shape} and {shift.shape}"
        )
    return NormalizeFeatures.apply(x, gain, shift, eps=eps)


class MorphFeatures(Function):
    def forward(self, x, op: MorphOp, radius: int):
        k = 2 * radius + 1
        fill = -np.inf if op == "dilate" else np.inf
        pad = ((0, 0), (0, 0), (radius, radius), (radius, radius))
        xp = np.pad(x, pad, constant_values=fill)
        n, c, h, w = x.shape
        win = sliding_window_view(xp, (k, k), axis=(2, 3)).reshape(n, c, h, w, k * k)
        idx = win.argmax(axis=-1) if op == "dilate" else win.argmin(axis=-1)
        self.idx, self.k, self.radius, self.in_shape = idx, k, radius, x.shape
        return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        n, c, h, w = self.in_shape
        r, k = self.radius, self.k
        gxp = np.zeros((n, c, h + 2 * r, w + 2 * r), dtype=grad.dtype)
        ni, ci, hi, wi = np.indices((n, c, h, w))
        np.add.at(gxp, (ni, ci, hi + self.idx // k, wi + self.idx % k), grad)
        return (gxp[:, :, r : r + h, r : r + w],)


def morph_features(x: Tensor, op: MorphOp, radius: int = 1) -> Tensor:
    """
    Grayscale dilation (max filter) or erosion (min filter) of feature maps over a
    square ``(2 radius + 1)`` window, ignoring out-of-bounds positions.
    """
    if op not in ("dilate", "erode"):
        raise ValueError(f"Unknown morphological op: {op!r}")
    if radius < 1:
        raise ValueError(f"morph_features radius must be >= 1, got {radius}")
    return MorphFeatures.apply(x, op=op, radius=radius)


##################
# Graph handling #
##################


@dataclass
class Graph:
    """Op nodes reachable from an output, inputs before outputs."""

    nodes: list[Function] = field(default_factory=list)
    leaves: list[Tensor] = field(default_factory=list)


def build_graph(output: Tensor) -> Graph:
    """Topologically order every op node that ``output`` depends on."""
    graph = Graph()
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        tensor, expanded = stack.pop()
        func = tensor.creator
        if func is None:
            if tensor.requires_grad and id(tensor) not in seen:
                seen.add(id(tensor))
                graph.leaves.append(tensor)
            continue
        if expanded:
            graph.nodes.append(func)
            continue
        if id(func) in seen:
            continue
        seen.add(id(func))
        stack.append((tensor, True))
        for parent in reversed(func.tensors):
            if parent.requires_grad:
                stack.append((parent, False))
    return graph


def backward(loss: Tensor, graph: Optional[Graph] = None) -> list[Tensor]:
    """
    Accumulate d(loss)/d(leaf) into ``grad`` of every leaf that requires it.

    Returns:
    -------
    The leaves that received a gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward called on a loss that does not require grad")
    if graph is None:
        graph = build_graph(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for func in reversed(graph.nodes):
        grad_out = grads.pop(id(func.output), None)
        if grad_out is None:
            continue
        for parent, grad_in in zip(func.tensors, func.backward(grad_out)):
            if grad_in is None or not parent.requires_grad:
                continue
            grad_in = np.asarray(grad_in, dtype=parent.dtype)
            if parent.creator is None:
                if parent.grad is None:
                    parent.grad = grad_in.copy()
                else:
                    parent.grad = parent.grad + grad_in
            elif id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + grad_in
            else:
                grads[id(parent)] = grad_in
    if loss.creator is None:
        loss.grad = np.ones_like(loss.data)
    return graph.leaves


###########################
# Finite-difference check #
###########################


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    n_checked: int
    n_skipped: int = 0


def grad_check(
    op: Callable[..., Tensor],
    inputs: Sequence[ArrayLike],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    seed: int = 0,
    samples_per_input: Optional[int] = None,
    skip_kinks: bool = False,
) -> GradCheckReport:
    """
    Compare analytic gradients of ``op`` with central finite differences.

    The output is scalarized with a seeded random projection so that every output
    element contributes. Relative error per element is
    ``|a - b| / max(|a|, |b|, 1e-8)``.

    Parameters:
    ----------
    op:
        callable taking one Tensor per input and returning a Tensor.
    inputs:
        input values, evaluated in float64.
    step:
        finite-difference half step.
    tolerance:
        maximum allowed relative error.
    seed:
        seeds the projection and the element sampling.
    samples_per_input:
        check only this many randomly chosen elements per input; all if None.
    skip_kinks:
        skip elements whose forward and backward one-sided differences disagree
        by more than ``tolerance``, i.e. where a relu or max switches branch
        within one step. They are counted in ``n_skipped``.
    """
    if step <= 0:
        raise ValueError(f"grad_check step must be positive, got {step}")
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*tensors)
    proj = rng.standard_normal(out.shape)
    loss = (out * Tensor(proj)).sum()
    if loss.requires_grad:
        backward(loss)

    def scalar(arrs: list[np.ndarray]) -> float:
        return float((op(*(Tensor(a) for a in arrs)).data * proj).sum())

    base = scalar(arrays) if skip_kinks else 0.0
    max_rel_err = 0.0
    n_checked = n_skipped = 0
    for i, arr in enumerate(arrays):
        analytic = tensors[i].grad
        if analytic is None:
            analytic = np.zeros_like(arr)
        indices = np.arange(arr.size)
        if samples_per_input is not None and samples_per_input < arr.size:
            indices = np.sort(rng.choice(arr.size, samples_per_input, replace=False))
        for flat in indices:
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i].flat[flat] += step
            minus[i].flat[flat] -= step
            f_plus, f_minus = scalar(plus), scalar(minus)
            if skip_kinks:
                ahead, behind = (f_plus - base) / step, (base - f_minus) / step
                scale = max(abs(ahead), abs(behind), REL_ERR_FLOOR)
                if abs(ahead - behind) > tolerance * scale:
                    n_skipped += 1
                    continue
            numeric = (f_plus - f_minus) / (2 * step)
            a = float(analytic.flat[flat])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), REL_ERR_FLOOR)
            max_rel_err = max(max_rel_err, rel)
            n_checked += 1
    logger.debug(
        "grad_check: %d elements (%d skipped), max rel err %.3e",
        n_checked,
        n_skipped,
        max_rel_err,
    )
    passed = max_rel_err <= tolerance
    return GradCheckReport(max_rel_err, passed, n_checked, n_skipped)


#################
# MMT1 file I/O #
#################

MMT_MAGIC = b"MMT1"


def encode_mmt(array: FloatND) -> bytes:
    """Serialize an array as MMT1: magic, u32 rank, u32 dims, float32 payload."""
    arr = np.asarray(array, dtype="<f4")
    header = np.array([arr.ndim, *arr.shape], dtype="<u4").tobytes()
    return MMT_MAGIC + header + arr.tobytes()


def decode_mmt(payload: bytes) -> np.ndarray:
    if len(payload) < 8 or payload[:4] != MMT_MAGIC:
        raise ValueError("bad magic: not an MMT1 tensor file")
    rank = int(np.frombuffer(payload, dtype="<u4", count=1, offset=4)[0])
    header_len = 8 + 4 * rank
    if len(payload) < header_len:
        raise ValueError(f"truncated header: rank {rank} needs {header_len} bytes")
    dims = np.frombuffer(payload, "<u4", count=rank, offset=8) if rank else []
    shape = tuple(int(v) for v in dims)
    expected = header_len + 4 * int(np.prod(shape, dtype=np.int64))
    if len(payload) != expected:
        raise ValueError(
            f"truncated payload: expected {expected} bytes for shape {shape},"
            f" got {len(payload)}"
        )
    data = np.frombuffer(payload, dtype="<f4", offset=header_len)
    return data.reshape(shape).astype(np.float32)


def write_mmt(path: str, array: FloatND) -> None:
    with open(path, "wb") as f:
        f.write(encode_mmt(array))


def read_mmt(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_mmt(f.read())
