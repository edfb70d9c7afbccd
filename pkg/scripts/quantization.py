#!/usr/bin/env python3
"""
quantization.py - INT8 post-training quantization of the encoder

Weights are quantized symmetrically (z = 0), by default per output channel; activations
asymmetrically. Three range observers (MinMax, MovingAverage, Histogram) feed static
calibration; dynamic mode derives one activation range per live tensor at every call.
Quantized projections multiply integer activations by integer weights with an int32
(or wider) accumulator and rescale by the product of the two scales.

Only dense projections are quantized. Layernorm affines, positional/channel embeddings
and softmax stay in floating point; the floating residue is stored as float16.

Usage::

    from quantization import calibrate_static, convert, save_quantized

    acts = calibrate_static(model, calib_ds, observer="histogram")
    qmodel = convert(model, "static", activations=acts)
    save_quantized(qmodel, "model.bpqnt")

Quantized model file "BPQNT1":
    magic "BPQNT1", version byte (1), mode byte (0 dynamic, 1 static),
    config block (as in BPMDL1), target normalization (4 x f64),
    floating residue: per tensor u64 count + f16 data (canonical order),
    per dense layer: scheme descriptor (u8 symmetry, u8 granularity, u8 axis, u8 bits),
        u32 param count n, n x f32 scale, n x i32 zero point (asymmetric schemes only;
        symmetric zero points are 0 and not stored),
        u64 count + packed signed weights (1 byte each for bits <= 8, else 2),
        bias: u64 count + f16 (dynamic) or i32 at scale dw*dx (static),
    static mode only, per dense layer: u32 n, n x f32 scale, n x i32 zero point.
"""

import math
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

from common import (
    ConfigError,
    ModelFileError,
    ObserverStateError,
    RangeError,
    ShapeError,
    atomic_write_bytes,
    log,
)
from encoder_model import (
    CONFIG_STRUCT,
    LENGTH_STRUCT,
    MODEL_MAGIC,
    NORM_STRUCT,
    EncoderModel,
    ModelConfig,
    TargetNorm,
    decode_config,
    decode_model,
    decode_norm,
    encode_config,
    encode_model,
    encode_norm,
    forward_patches,
    linear_layers,
    param_shapes,
    tokenize,
)
import numpy as np
from signal_data import SegmentDataset
from tensor_numerics import Tensor

QUANT_MAGIC = b"BPQNT1"
QUANT_VERSION = 1
MODES = ("dynamic", "static")
OBSERVERS = ("minmax", "moving_avg", "histogram")
SYMMETRIES = ("symmetric", "asymmetric")
GRANULARITIES = ("per_tensor", "per_channel")

DESCRIPTOR_STRUCT = struct.Struct("<4B")
COUNT_STRUCT = struct.Struct("<I")

# The raw input to the patch embedding is quantized per signal channel (ECG, PPG).
INPUT_CHANNEL_AXES = {"patch_embed": 1}


# ---------------------------------------------------------------------------
# Schemes and parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuantScheme:
    symmetry: str = "symmetric"
    granularity: str = "per_channel"
    axis: int = 1
    bits: int = 8

    def __post_init__(self):
        if self.symmetry not in SYMMETRIES:
            raise ConfigError(f"symmetry must be one of {SYMMETRIES}, got {self.symmetry!r}")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(
                f"granularity must be one of {GRANULARITIES}, got {self.granularity!r}"
            )
        if not 2 <= self.bits <= 16:
            raise ConfigError(f"bits must be in [2, 16], got {self.bits}")
        if self.axis < 0:
            raise ConfigError(f"axis must be >= 0, got {self.axis}")

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1)) if self.symmetry == "symmetric" else 0

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1 if self.symmetry == "symmetric" else 2**self.bits - 1

    @property
    def storage_dtype(self):
        if self.symmetry == "symmetric":
            return np.int8 if self.bits <= 8 else np.int16
        return np.uint8 if self.bits <= 8 else np.uint16


WEIGHT_SCHEME = QuantScheme()
ACTIVATION_SCHEME = QuantScheme("asymmetric", "per_tensor", 0)


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise RangeError(f"scale must be finite and > 0, got {self.scale}")


def _check_range(x_min, x_max) -> None:
    if not (np.all(np.isfinite(x_min)) and np.all(np.isfinite(x_max))):
        raise RangeError("Quantization range must be finite")
    if np.any(np.asarray(x_min) > np.asarray(x_max)):
        raise RangeError(f"x_min > x_max in range ({x_min}, {x_max})")


def symmetric_scales(x_min, x_max, bits: int) -> np.ndarray:
    """Vectorized max(|x_min|, |x_max|) / 2^(b-1); all-zero ranges get 1."""
    _check_range(x_min, x_max)
    amax = np.maximum(np.abs(np.asarray(x_min, np.float64)), np.abs(np.asarray(x_max, np.float64)))
    return np.where(amax > 0, amax / 2 ** (bits - 1), 1.0)


def asymmetric_params(x_min, x_max, bits: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized (scale, zero_point) over the range widened to include 0."""
    _check_range(x_min, x_max)
    lo = np.minimum(np.asarray(x_min, np.float64), 0.0)
    hi = np.maximum(np.asarray(x_max, np.float64), 0.0)
    width = hi - lo
    scale = np.where(width > 0, width / (2**bits - 1), 1.0)
    zero_point = np.where(width > 0, np.floor(-lo / scale + 0.5), 0.0)
    return scale, zero_point.astype(np.int64)


def qparams_symmetric(x_min: float, x_max: float, bits: int = 8) -> QuantParams:
    """Delta = max(|x_min|, |x_max|) / 2^(b-1), z = 0.

    Raises:
        RangeError: If either bound is non-finite or x_min > x_max.
    """
    return QuantParams(float(symmetric_scales(x_min, x_max, bits)), 0)


def qparams_asymmetric(x_min: float, x_max: float, bits: int = 8) -> QuantParams:
    """Delta = (x_max - x_min) / (2^b - 1), z = floor(-x_min/Delta + 0.5) on the zero-widened range.

    Raises:
        RangeError: If either bound is non-finite or x_min > x_max.
    """
    scale, zero_point = asymmetric_params(x_min, x_max, bits)
    return QuantParams(float(scale), int(zero_point))


def round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


# ---------------------------------------------------------------------------
# Quantize / dequantize
# ---------------------------------------------------------------------------


@dataclass
class QuantizedTensor:
    """Integer payload plus one (scale, zero point) per tensor or per channel slice."""

    data: np.ndarray
    scales: np.ndarray
    zero_points: np.ndarray
    scheme: QuantScheme

    def __post_init__(self):
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(-1)
        self.zero_points = np.asarray(self.zero_points, dtype=np.int64).reshape(-1)
        if self.data.min(initial=self.scheme.qmax) < self.scheme.qmin or self.data.max(
            initial=self.scheme.qmin
        ) > self.scheme.qmax:
            raise RangeError("Quantized payload outside the scheme's integer range")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def params(self) -> list[QuantParams]:
        return [QuantParams(float(s), int(z)) for s, z in zip(self.scales, self.zero_points)]


def _param_arrays(params, scheme: QuantScheme, shape: tuple[int, ...]):
    """Scale and zero-point arrays broadcastable against a tensor of ``shape``."""
    if isinstance(params, QuantParams):
        params = [params]
    scales = np.array([p.scale for p in params], dtype=np.float64)
    zps = np.array([p.zero_point for p in params], dtype=np.int64)
    return _broadcast_params(scales, zps, scheme, shape)


def _broadcast_params(scales, zps, scheme: QuantScheme, shape: tuple[int, ...]):
    if scheme.granularity == "per_tensor":
        if scales.size != 1:
            raise ShapeError(f"per_tensor scheme needs one parameter set, got {scales.size}")
        return scales.reshape(()), zps.reshape(())
    if scheme.axis >= len(shape):
        raise ShapeError(f"per_channel axis {scheme.axis} invalid for shape {shape}")
    if scales.size != shape[scheme.axis]:
        raise ShapeError(
            f"{scales.size} channel parameters for extent {shape[scheme.axis]} "
            f"along axis {scheme.axis}"
        )
    view = [1] * len(shape)
    view[scheme.axis] = -1
    return scales.reshape(view), zps.reshape(view)


def _quantize_values(x: np.ndarray, scale, zero_point, scheme: QuantScheme) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise RangeError("Cannot quantize non-finite values")
    q = round_half_away(np.asarray(x, dtype=np.float64) / scale)
    if scheme.symmetry == "asymmetric":
        q = q + zero_point
    return np.clip(q, scheme.qmin, scheme.qmax).astype(scheme.storage_dtype)


def quantize(
    x, params: Union[QuantParams, Sequence[QuantParams]], scheme: QuantScheme
) -> QuantizedTensor:
    """Symmetric: clip(round(x/D), -2^(b-1), 2^(b-1)-1); asymmetric: clip(round(x/D) + z, 0, 2^b-1).

    ``round`` is half-away-from-zero. Per-channel params are applied per slice along
    ``scheme.axis``.

    Raises:
        ShapeError: If the number of channel params does not match the axis extent.
        RangeError: If x holds NaN or Inf.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if data.ndim == 0:
        data = data.reshape(1)
    scale, zp = _param_arrays(params, scheme, data.shape)
    q = _quantize_values(data, scale, zp, scheme)
    return QuantizedTensor(q, scale, zp, scheme)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """x_hat = D * (x_int - z), per channel slice when per_channel."""
    scale, zp = _broadcast_params(q.scales, q.zero_points, q.scheme, q.shape)
    return scale * (q.data.astype(np.int64) - zp)


# ---------------------------------------------------------------------------
# Observers
# ---------------------------------------------------------------------------


def _finite_batch(x) -> np.ndarray:
    data = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if data.size == 0:
        raise ShapeError("Observer received an empty batch")
    if not np.all(np.isfinite(data)):
        raise RangeError("Observer received non-finite values")
    return data


class MinMaxObserver:
    """Running minimum and maximum."""

    def __init__(self):
        self.x_min: Optional[float] = None
        self.x_max: Optional[float] = None

    def observe(self, x) -> "MinMaxObserver":
        data = _finite_batch(x)
        lo, hi = float(data.min()), float(data.max())
        if self.x_min is None:
            self.x_min, self.x_max = lo, hi
        else:
            self.x_min, self.x_max = min(self.x_min, lo), max(self.x_max, hi)
        return self

    def range(self) -> tuple[float, float]:
        if self.x_min is None:
            raise ObserverStateError("Observer has not seen any batch")
        return self.x_min, self.x_max


class MovingAverageObserver(MinMaxObserver):
    """Exponential moving average of per-batch min/max, initialized by the first batch."""

    def __init__(self, momentum: float = 0.01):
        super().__init__()
        if not 0.0 < momentum <= 1.0:
            raise ConfigError(f"momentum must be in (0, 1], got {momentum}")
        self.momentum = momentum

    def observe(self, x) -> "MovingAverageObserver":
        data = _finite_batch(x)
        lo, hi = float(data.min()), float(data.max())
        if self.x_min is None:
            self.x_min, self.x_max = lo, hi
        else:
            a = self.momentum
            self.x_min = (1.0 - a) * self.x_min + a * lo
            self.x_max = (1.0 - a) * self.x_max + a * hi
        return self


class HistogramObserver:
    """Fixed-bin histogram whose range is chosen by exhaustive edge-pair search.

    Bounds come from the first batch; values outside the current bounds extend them and
    the existing counts are re-binned (mass at the old bin centers) onto the new grid.
    """

    def __init__(self, num_bins: int = 256, bits: int = 8):
        if num_bins < 1:
            raise ConfigError(f"num_bins must be >= 1, got {num_bins}")
        self.num_bins = num_bins
        self.bits = bits
        self.lo: Optional[float] = None
        self.hi: Optional[float] = None
        self.counts: Optional[np.ndarray] = None

    @property
    def edges(self) -> np.ndarray:
        return self.lo + (self.hi - self.lo) * np.arange(self.num_bins + 1) / self.num_bins

    def _centers(self) -> np.ndarray:
        if self.hi > self.lo:
            e = self.edges
            return 0.5 * (e[:-1] + e[1:])
        return np.full(self.num_bins, self.lo)

    def _histogram(self, values: np.ndarray, weights=None) -> np.ndarray:
        if self.hi > self.lo:
            counts, _ = np.histogram(
                values, bins=self.num_bins, range=(self.lo, self.hi), weights=weights
            )
            return counts.astype(np.float64)
        counts = np.zeros(self.num_bins)
        counts[0] = values.size if weights is None else float(np.sum(weights))
        return counts

    def observe(self, x) -> "HistogramObserver":
        data = _finite_batch(x).reshape(-1)
        lo, hi = float(data.min()), float(data.max())
        if self.counts is None:
            self.lo, self.hi = lo, hi
            self.counts = np.zeros(self.num_bins)
        elif lo < self.lo or hi > self.hi:
            centers = self._centers()
            old = self.counts
            self.lo, self.hi = min(lo, self.lo), max(hi, self.hi)
            self.counts = self._histogram(centers, weights=old)
        self.counts += self._histogram(data)
        return self

    def range(self) -> tuple[float, float]:
        """(lo', hi') over bin-edge pairs minimizing expected squared quantization error.

        In-range mass costs D^2/12 per sample with D the asymmetric step of the
        zero-widened candidate range; clipped bins cost their squared distance (bin
        center) to the nearest bound. Ties go to the wider range.
        """
        if self.counts is None:
            raise ObserverStateError("Observer has not seen any batch")
        if not self.hi > self.lo:
            return self.lo, self.hi

        edges = self.edges
        centers = self._centers()
        c = self.counts
        p0 = np.concatenate([[0.0], np.cumsum(c)])
        p1 = np.concatenate([[0.0], np.cumsum(c * centers)])
        p2 = np.concatenate([[0.0], np.cumsum(c * centers * centers)])

        n = self.num_bins
        i = np.arange(n)[:, None]
        j = np.arange(n)[None, :]
        a = edges[:-1][:, None]
        b = edges[1:][None, :]
        below = a * a * p0[i] - 2 * a * p1[i] + p2[i]
        above = (p2[n] - p2[j + 1]) - 2 * b * (p1[n] - p1[j + 1]) + b * b * (p0[n] - p0[j + 1])
        inside = p0[j + 1] - p0[i]
        step = (np.maximum(b, 0.0) - np.minimum(a, 0.0)) / (2**self.bits - 1)
        err = inside * step * step / 12.0 + np.maximum(below, 0.0) + np.maximum(above, 0.0)
        err = np.where(i <= j, err, np.inf)

        best = err.min()
        ties = err <= best + 1e-9 * max(best, 1e-300)
        width = np.where(ties, b - a, -np.inf)
        bi, bj = np.unravel_index(int(np.argmax(width)), width.shape)
        return float(edges[bi]), float(edges[bj + 1])


Observer = Union[MinMaxObserver, MovingAverageObserver, HistogramObserver]


def make_observer(kind: str, bits: int = 8) -> Observer:
    if kind == "minmax":
        return MinMaxObserver()
    if kind == "moving_avg":
        return MovingAverageObserver()
    if kind == "histogram":
        return HistogramObserver(bits=bits)
    raise ConfigError(f"Unknown observer '{kind}' (choose from {', '.join(OBSERVERS)})")


def observe(state: Observer, x) -> Observer:
    return state.observe(x)


def observer_range(state: Observer) -> tuple[float, float]:
    return state.range()


# ---------------------------------------------------------------------------
# Static calibration
# ---------------------------------------------------------------------------


@dataclass
class ActivationQuant:
    """Calibrated asymmetric params for one dense layer's input.

    The patch embedding holds one (scale, zero point) per signal channel; every other layer one.
    """

    scales: np.ndarray
    zero_points: np.ndarray

    def __post_init__(self):
        self.scales = np.asarray(self.scales, dtype=np.float32).astype(np.float64).reshape(-1)
        self.zero_points = np.asarray(self.zero_points, dtype=np.int64).reshape(-1)

    @property
    def params(self) -> list[QuantParams]:
        return [QuantParams(float(s), int(z)) for s, z in zip(self.scales, self.zero_points)]


def calibrate_static(
    model: EncoderModel,
    calib_ds: Optional[SegmentDataset],
    observer: str = "minmax",
    bits: int = 8,
    batch_size: int = 64,
) -> dict[str, ActivationQuant]:
    """Run float forward passes, observing every dense layer's input.

    Returns:
        Layer name -> asymmetric activation params from the observer ranges.

    Raises:
        ConfigError: If the calibration set is missing or empty, or the observer is unknown.
    """
    if calib_ds is None or len(calib_ds) == 0:
        raise ConfigError("Static quantization needs a non-empty calibration dataset")
    make_observer(observer, bits)

    observers: dict[str, list[Observer]] = {}
    for name in linear_layers(model.cfg):
        count = model.cfg.num_channels if name in INPUT_CHANNEL_AXES else 1
        observers[name] = [make_observer(observer, bits) for _ in range(count)]

    def observing_linear(name: str, x: Tensor) -> Tensor:
        obs = observers[name]
        if name in INPUT_CHANNEL_AXES:
            slices = np.moveaxis(x.data, INPUT_CHANNEL_AXES[name], 0)
            for ob, part in zip(obs, slices):
                ob.observe(part)
        else:
            obs[0].observe(x.data)
        return model.linear(name, x)

    signals = calib_ds.signals
    for start in range(0, len(calib_ds), batch_size):
        batch = signals[start : start + batch_size]
        patches = Tensor(tokenize(batch, model.cfg), dtype=model.dtype)
        forward_patches(model.params, model.cfg, patches, observing_linear)

    result = {}
    for name, obs in observers.items():
        ranges = [observer_range(ob) for ob in obs]
        scales, zps = asymmetric_params([r[0] for r in ranges], [r[1] for r in ranges], bits)
        result[name] = ActivationQuant(scales, zps)
    log(
        "Calibrated activation ranges",
        segments=len(calib_ds),
        observer=observer,
        layers=len(result),
    )
    return result


# ---------------------------------------------------------------------------
# Quantized execution
# ---------------------------------------------------------------------------


def accumulator_dtype(bits: int, fan_in: int):
    """Narrowest of int32/int64 holding 2b + ceil(log2 k) + 1 bits.

    Raises:
        ConfigError: If even 64 bits could overflow.
    """
    width = 2 * bits + math.ceil(math.log2(max(fan_in, 1))) + 1
    if width <= 32:
        return np.int32
    if width <= 64:
        return np.int64
    raise ConfigError(f"{bits}-bit products over {fan_in} inputs need a {width}-bit accumulator")


def _f16_round(a: np.ndarray) -> np.ndarray:
    return np.asarray(a).astype(np.float16).astype(np.float32)


@dataclass
class QuantizedLinear:
    """y = dx * dw_c * sum((x_int - z_x) * w_int_c) + bias, with an integer accumulator.

    ``act`` holds calibrated input params (static); ``None`` means the input range is
    taken from the whole live tensor at every call (dynamic, one asymmetric (dx, z) per
    tensor). ``input_channel_axis`` gives each slice along that axis its own (dx, z) in
    both modes; only the raw ECG/PPG input of the patch embedding uses it.
    """

    weight: QuantizedTensor
    bias: Optional[np.ndarray] = None
    bias_int: Optional[np.ndarray] = None
    act: Optional[ActivationQuant] = None
    input_channel_axis: Optional[int] = None
    acc_dtype: type = field(init=False)

    def __post_init__(self):
        scheme = self.weight.scheme
        if scheme.symmetry != "symmetric":
            raise ConfigError("Weights must use a symmetric scheme")
        if scheme.granularity == "per_channel" and scheme.axis != 1:
            raise ConfigError("Per-channel weight params must run along the output axis (1)")
        self.acc_dtype = accumulator_dtype(self.weight.scheme.bits, self.weight.shape[0])

    @property
    def bits(self) -> int:
        return self.weight.scheme.bits

    @property
    def weight_scales(self) -> np.ndarray:
        scale, _ = _broadcast_params(
            self.weight.scales, self.weight.zero_points, self.weight.scheme, self.weight.shape
        )
        return np.broadcast_to(scale, self.weight.shape)[0]

    def input_params(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Activation (scale, zero point) arrays broadcastable against ``x``."""
        axis = self.input_channel_axis
        if self.act is None:
            reduce = tuple(a for a in range(x.ndim) if a != axis)
            return asymmetric_params(
                x.min(axis=reduce, keepdims=True), x.max(axis=reduce, keepdims=True), self.bits
            )
        view = [1] * x.ndim
        if axis is not None:
            view[axis] = -1
        if self.act.scales.size != (1 if axis is None else x.shape[axis]):
            raise ShapeError(f"{self.act.scales.size} activation params for input {x.shape}")
        return self.act.scales.reshape(view), self.act.zero_points.reshape(view)

    def integer_accumulate(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(integer accumulator, input scale array) for a float input."""
        scale, zp = self.input_params(x)
        xq = _quantize_values(x, scale, zp, QuantScheme("asymmetric", "per_tensor", 0, self.bits))
        xi = xq.astype(self.acc_dtype) - zp.astype(self.acc_dtype)
        return np.matmul(xi, self.weight.data.astype(self.acc_dtype)), scale

    def __call__(self, x) -> np.ndarray:
        data = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        acc, scale = self.integer_accumulate(data)
        out_scale = scale * self.weight_scales
        if self.bias_int is not None:
            y = (acc.astype(np.int64) + self.bias_int).astype(np.float64) * out_scale
        else:
            y = acc.astype(np.float64) * out_scale
            if self.bias is not None:
                y = y + self.bias
        return y.astype(np.float32)


@dataclass
class QuantizedModel:
    cfg: ModelConfig
    mode: str
    layers: dict[str, QuantizedLinear]
    residue: dict[str, Tensor]
    target_norm: TargetNorm = field(default_factory=TargetNorm)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        missing = [n for n in linear_layers(self.cfg) if n not in self.layers]
        if missing:
            raise ShapeError(f"Quantized model is missing layers {missing}")
        if self.mode == "static" and any(l.act is None for l in self.layers.values()):
            raise ConfigError("Static quantized model needs activation params for every layer")
        if self.mode == "dynamic" and any(l.act is not None for l in self.layers.values()):
            raise ConfigError("Dynamic quantized model must not carry activation params")

    @property
    def dtype(self):
        return np.float32

    @property
    def weight_scheme(self) -> QuantScheme:
        return self.layers["head"].weight.scheme

    def linear(self, name: str, x: Tensor) -> Tensor:
        return Tensor(self.layers[name](x))

    def forward(self, signals: np.ndarray, trace: Optional[dict] = None) -> np.ndarray:
        return quantized_forward(self, signals, trace)

    def quantized_param_count(self) -> int:
        return sum(layer.weight.data.size for layer in self.layers.values())


def quantized_forward(
    qmodel: QuantizedModel, signals: np.ndarray, trace: Optional[dict] = None
) -> np.ndarray:
    """Predictions [B, 2] with every dense projection run in integer arithmetic."""
    patches = Tensor(tokenize(signals, qmodel.cfg), dtype=np.float32)
    return forward_patches(qmodel.residue, qmodel.cfg, patches, qmodel.linear, trace).data


# ---------------------------------------------------------------------------
# Conversion
# ---------------------------------------------------------------------------


def quantize_weight(w: np.ndarray, scheme: QuantScheme) -> QuantizedTensor:
    """Min-max symmetric quantization with scales stored at f32 precision."""
    if scheme.granularity == "per_channel":
        if scheme.axis >= w.ndim:
            raise ShapeError(f"per_channel axis {scheme.axis} invalid for weight {w.shape}")
        reduce = tuple(a for a in range(w.ndim) if a != scheme.axis)
        lo, hi = w.min(axis=reduce), w.max(axis=reduce)
    else:
        lo, hi = np.array([w.min()]), np.array([w.max()])
    scales = symmetric_scales(lo, hi, scheme.bits).astype(np.float32).astype(np.float64)
    scale, zp = _broadcast_params(scales, np.zeros(scales.size, np.int64), scheme, w.shape)
    data = _quantize_values(w, scale, zp, scheme)
    return QuantizedTensor(data, scales, np.zeros(scales.size), scheme)


def _residue_names(cfg: ModelConfig) -> list[str]:
    dense = {f"{n}.{s}" for n in linear_layers(cfg) for s in ("weight", "bias")}
    return [n for n in param_shapes(cfg) if n not in dense]


def _static_bias(
    bias: np.ndarray, w_scales: np.ndarray, act: ActivationQuant, channel_axis
) -> np.ndarray:
    """int32 bias at scale dw*dx; one row per input channel when the input is per-channel."""
    x_scales = act.scales if channel_axis is not None else act.scales[:1]
    q = round_half_away(bias[None, :] / (x_scales[:, None] * w_scales[None, :]))
    info = np.iinfo(np.int32)
    q = np.clip(q, info.min, info.max).astype(np.int32)
    if channel_axis is None:
        return q[0]
    # [C, out] -> broadcastable against [B, C, P, out]
    return q.reshape(q.shape[0], 1, q.shape[1])


def convert(
    model: EncoderModel,
    mode: str,
    weight_scheme: Optional[QuantScheme] = None,
    activations: Optional[dict[str, ActivationQuant]] = None,
) -> QuantizedModel:
    """Quantize every dense projection; keep the rest as float16-rounded residue.

    Raises:
        ConfigError: On an unknown mode, static mode without calibration output, or a
            non-symmetric weight scheme.
    """
    weight_scheme = weight_scheme or WEIGHT_SCHEME
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "static":
        if not activations:
            raise ConfigError("Static quantization requires calibration (activation params)")
        missing = [n for n in linear_layers(model.cfg) if n not in activations]
        if missing:
            raise ConfigError(f"Calibration output is missing layers {missing}")
    if weight_scheme.symmetry != "symmetric":
        raise ConfigError("Weights must use a symmetric scheme")
    if weight_scheme.granularity == "per_channel" and weight_scheme.axis != 1:
        raise ConfigError("Per-channel weight params must run along the output axis (1)")

    layers: dict[str, QuantizedLinear] = {}
    for name in linear_layers(model.cfg):
        w = model.params[f"{name}.weight"].data.astype(np.float64)
        b = model.params[f"{name}.bias"].data.astype(np.float64)
        qw = quantize_weight(w, weight_scheme)
        channel_axis = INPUT_CHANNEL_AXES.get(name)
        if mode == "static":
            act = activations[name]
            w_scales = np.broadcast_to(
                _broadcast_params(qw.scales, qw.zero_points, weight_scheme, qw.shape)[0], qw.shape
            )[0]
            layers[name] = QuantizedLinear(
                qw,
                bias_int=_static_bias(b, w_scales, act, channel_axis),
                act=act,
                input_channel_axis=channel_axis,
            )
        else:
            layers[name] = QuantizedLinear(
                qw, bias=_f16_round(b), input_channel_axis=channel_axis
            )

    residue = {
        n: Tensor(_f16_round(model.params[n].data), name=n) for n in _residue_names(model.cfg)
    }
    qmodel = QuantizedModel(model.cfg, mode, layers, residue, model.target_norm)
    log(
        "Converted model",
        mode=mode,
        granularity=weight_scheme.granularity,
        bits=weight_scheme.bits,
        quantized_params=qmodel.quantized_param_count(),
    )
    return qmodel


# ---------------------------------------------------------------------------
# Serialization and size accounting
# ---------------------------------------------------------------------------


def _pack_array(values: np.ndarray, dtype: str) -> bytes:
    data = np.ascontiguousarray(values, dtype=dtype)
    return LENGTH_STRUCT.pack(data.size) + data.tobytes()


def encode_quantized(qmodel: QuantizedModel) -> bytes:
    chunks = [
        QUANT_MAGIC,
        bytes([QUANT_VERSION, MODES.index(qmodel.mode)]),
        encode_config(qmodel.cfg),
        encode_norm(qmodel.target_norm),
    ]
    for name in _residue_names(qmodel.cfg):
        chunks.append(_pack_array(qmodel.residue[name].data, "<f2"))

    for name in linear_layers(qmodel.cfg):
        layer = qmodel.layers[name]
        scheme = layer.weight.scheme
        chunks.append(
            DESCRIPTOR_STRUCT.pack(
                SYMMETRIES.index(scheme.symmetry),
                GRANULARITIES.index(scheme.granularity),
                scheme.axis,
                scheme.bits,
            )
        )
        chunks.append(COUNT_STRUCT.pack(layer.weight.scales.size))
        chunks.append(np.ascontiguousarray(layer.weight.scales, "<f4").tobytes())
        if scheme.symmetry == "asymmetric":
            chunks.append(np.ascontiguousarray(layer.weight.zero_points, "<i4").tobytes())
        chunks.append(_pack_array(layer.weight.data, "<i1" if scheme.bits <= 8 else "<i2"))
        if qmodel.mode == "static":
            chunks.append(_pack_array(layer.bias_int, "<i4"))
        else:
            chunks.append(_pack_array(layer.bias, "<f2"))

    if qmodel.mode == "static":
        for name in linear_layers(qmodel.cfg):
            act = qmodel.layers[name].act
            chunks.append(COUNT_STRUCT.pack(act.scales.size))
            chunks.append(np.ascontiguousarray(act.scales, "<f4").tobytes())
            chunks.append(np.ascontiguousarray(act.zero_points, "<i4").tobytes())
    return b"".join(chunks)


class _Reader:
    """Cursor over a payload; every read past the end is a ModelFileError."""

    def __init__(self, payload: bytes, offset: int = 0):
        self.payload = payload
        self.offset = offset

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.payload):
            raise ModelFileError(f"Truncated quantized model file reading {what}")
        chunk = self.payload[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, st: struct.Struct, what: str) -> tuple:
        return st.unpack(self.take(st.size, what))

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(itemsize * count, what), dtype=dtype).copy()

    def counted(self, dtype: str, what: str, expected: Optional[int] = None) -> np.ndarray:
        (count,) = self.unpack(LENGTH_STRUCT, what)
        if expected is not None and count != expected:
            raise ModelFileError(f"{what}: {count} values, expected {expected}")
        return self.array(dtype, count, what)


def decode_quantized(payload: bytes) -> QuantizedModel:
    """Parse a BPQNT1 byte string.

    Raises:
        ModelFileError: On bad magic, unknown version or mode, truncation, size
            mismatches or trailing bytes.
    """
    if payload[:6] != QUANT_MAGIC:
        raise ModelFileError(f"Bad quantized model magic {payload[:6]!r}")
    r = _Reader(payload, 6)
    version, mode_byte = r.take(2, "header")
    if version != QUANT_VERSION:
        raise ModelFileError(f"Unsupported quantized model version {version}")
    if mode_byte >= len(MODES):
        raise ModelFileError(f"Unknown quantization mode byte {mode_byte}")
    mode = MODES[mode_byte]
    r.take(CONFIG_STRUCT.size, "config")
    cfg = decode_config(payload, 8)
    r.take(NORM_STRUCT.size, "normalization")
    norm = decode_norm(payload, 8 + CONFIG_STRUCT.size)
    shapes = param_shapes(cfg)

    residue = {}
    for name in _residue_names(cfg):
        data = r.counted("<f2", name, int(np.prod(shapes[name])))
        residue[name] = Tensor(data.astype(np.float32).reshape(shapes[name]), name=name)

    parts = {}
    try:
        for name, (fan_in, fan_out) in linear_layers(cfg).items():
            sym, gran, axis, bits = r.unpack(DESCRIPTOR_STRUCT, f"{name} scheme")
            if sym >= len(SYMMETRIES) or gran >= len(GRANULARITIES):
                raise ModelFileError(f"{name}: invalid scheme descriptor")
            scheme = QuantScheme(SYMMETRIES[sym], GRANULARITIES[gran], axis, bits)
            (n,) = r.unpack(COUNT_STRUCT, f"{name} params")
            scales = r.array("<f4", n, f"{name} scales").astype(np.float64)
            if scheme.symmetry == "asymmetric":
                zps = r.array("<i4", n, f"{name} zero points")
            else:
                zps = np.zeros(n, dtype=np.int64)
            wdtype = "<i1" if bits <= 8 else "<i2"
            wq = r.counted(wdtype, f"{name} weights", fan_in * fan_out).reshape(fan_in, fan_out)
            qw = QuantizedTensor(wq.astype(scheme.storage_dtype), scales, zps, scheme)
            _broadcast_params(qw.scales, qw.zero_points, scheme, qw.shape)
            bias = r.counted("<i4" if mode == "static" else "<f2", f"{name} bias")
            parts[name] = (qw, bias)

        layers = {}
        for name, (qw, bias) in parts.items():
            axis = INPUT_CHANNEL_AXES.get(name)
            if mode == "static":
                (n,) = r.unpack(COUNT_STRUCT, f"{name} activation params")
                act = ActivationQuant(
                    r.array("<f4", n, f"{name} activation scales"),
                    r.array("<i4", n, f"{name} activation zero points"),
                )
                bias_int = bias.reshape(n, 1, -1) if axis is not None else bias
                layers[name] = QuantizedLinear(
                    qw, bias_int=bias_int, act=act, input_channel_axis=axis
                )
            else:
                layers[name] = QuantizedLinear(
                    qw, bias=bias.astype(np.float32), input_channel_axis=axis
                )
    except (ConfigError, RangeError, ShapeError) as exc:
        raise ModelFileError(f"Invalid quantized layer: {exc}") from exc

    if r.offset != len(payload):
        raise ModelFileError(f"{len(payload) - r.offset} trailing bytes in quantized model file")
    return QuantizedModel(cfg, mode, layers, residue, norm)


def save_quantized(qmodel: QuantizedModel, path: str) -> int:
    written = atomic_write_bytes(path, encode_quantized(qmodel))
    log("Saved quantized model", path=path, mode=qmodel.mode, bytes=written)
    return written


def load_quantized(path: str) -> QuantizedModel:
    with open(path, "rb") as f:
        return decode_quantized(f.read())


def load_any(path: str) -> Union[EncoderModel, QuantizedModel]:
    """Load a float or quantized model file, chosen by its magic."""
    with open(path, "rb") as f:
        payload = f.read()
    if payload[:6] == QUANT_MAGIC:
        return decode_quantized(payload)
    if payload[:6] == MODEL_MAGIC:
        return decode_model(payload)
    raise ModelFileError(f"{path}: unrecognized model file magic {payload[:6]!r}")


def model_size_bytes(model: Union[EncoderModel, QuantizedModel]) -> int:
    """Exact serialized size in the BPMDL1 / BPQNT1 formats."""
    if isinstance(model, QuantizedModel):
        return len(encode_quantized(model))
    return len(encode_model(model))


def reduction_factor(float_bytes: int, quant_bytes: int) -> float:
    if float_bytes <= 0 or quant_bytes <= 0:
        raise ConfigError("Model sizes must be positive")
    return float_bytes / quant_bytes
