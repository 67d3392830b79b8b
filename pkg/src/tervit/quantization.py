"""Channel-wise ternarization, min-max 8-bit quantization and their STE rules.

Weights follow the ``f @ W`` convention: a matrix has shape ``(n_w, d_out)``
and a *channel* is one output column ``W[:, j]``.

Packed ternary layout (shared with the kernels and the checkpoint format):
four codes per byte, code ``i`` of a byte in bits ``2i..2i+1``, mapping
``0b00 -> 0``, ``0b01 -> +1``, ``0b10 -> -1`` (``0b11`` is invalid), codes
streamed channel by channel (column-major).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from tervit.autodiff import Tensor, apply_op
from tervit.exceptions import ConfigError, DimensionError, FormatError

THRESHOLD_FACTOR = 0.7
LEVELS = 255

_DECODE = np.array([0, 1, -1, 0], dtype=np.int8)


def _as_array(W) -> np.ndarray:
    return W.data if isinstance(W, Tensor) else np.asarray(W)


def _check_matrix(W: np.ndarray) -> None:
    if W.ndim != 2:
        raise DimensionError(f"expected a 2-D weight matrix, got shape {W.shape}")
    if not np.all(np.isfinite(W)):
        raise ValueError("weight matrix contains non-finite values")


# -- packing ------------------------------------------------------------------


def pack_codes(codes: np.ndarray) -> np.ndarray:
    """Pack an ``(n_w, d_out)`` int array of {-1, 0, +1} into bytes."""
    codes = np.asarray(codes)
    flat = codes.T.reshape(-1)
    bits = np.zeros(flat.shape, dtype=np.uint8)
    bits[flat == 1] = 1
    bits[flat == -1] = 2
    if np.any((flat != 0) & (flat != 1) & (flat != -1)):
        raise FormatError("ternary codes must be in {-1, 0, +1}")
    pad = (-flat.size) % 4
    if pad:
        bits = np.concatenate([bits, np.zeros(pad, dtype=np.uint8)])
    quads = bits.reshape(-1, 4)
    return (quads[:, 0] | (quads[:, 1] << 2) | (quads[:, 2] << 4) | (quads[:, 3] << 6)).astype(
        np.uint8
    )


def unpack_codes(packed: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Inverse of :func:`pack_codes`; raises FormatError on a 0b11 code."""
    n_w, d_out = shape
    count = n_w * d_out
    packed = np.asarray(packed, dtype=np.uint8)
    if packed.size != -(-count // 4):
        raise FormatError(f"packed buffer has {packed.size} bytes, expected {-(-count // 4)}")
    bits = np.stack([(packed >> s) & 0b11 for s in (0, 2, 4, 6)], axis=1).reshape(-1)[:count]
    if np.any(bits == 0b11):
        raise FormatError("invalid ternary code 0b11 in packed buffer")
    return _DECODE[bits].reshape(d_out, n_w).T.copy()


# -- ternary ------------------------------------------------------------------


@dataclass(frozen=True)
class TernaryTensor:
    """Packed ternary weight matrix with one scale per output channel."""

    shape: tuple[int, int]
    codes: np.ndarray  # packed uint8
    alpha: np.ndarray  # float32, length d_out
    delta: np.ndarray  # float64 thresholds used, length d_out

    @property
    def nbytes(self) -> int:
        """Packed codes plus float32 alphas."""
        return int(self.codes.size + 4 * self.alpha.size)

    def unpack(self) -> np.ndarray:
        return unpack_codes(self.codes, self.shape)

    def dequantize(self) -> np.ndarray:
        return dequantize_ternary(self)


def channel_threshold(W, j: int) -> float:
    """Threshold of channel ``j``: ``0.7 * ||W[:, j]||_1 / n_w``."""
    W = _as_array(W)
    if W.ndim != 2:
        raise DimensionError(f"expected a 2-D weight matrix, got shape {W.shape}")
    if not 0 <= j < W.shape[1]:
        raise IndexError(f"channel {j} out of range for {W.shape[1]} channels")
    col = W[:, j].astype(np.float64)
    return float(THRESHOLD_FACTOR * np.abs(col).sum() / W.shape[0])


def channel_abs_mean(W) -> np.ndarray:
    """Mean of ``|W[:, j]|`` per column, in float64."""
    W64 = np.asarray(_as_array(W), dtype=np.float64)
    return np.abs(W64).sum(axis=0) / W64.shape[0]


def channel_thresholds(W: np.ndarray) -> np.ndarray:
    W64 = np.asarray(W, dtype=np.float64)
    return THRESHOLD_FACTOR * np.abs(W64).sum(axis=0) / W64.shape[0]


def ternary_codes(W: np.ndarray, delta) -> np.ndarray:
    """Three-way split of ``W`` against ``delta`` (broadcast over channels).

    ``W < -delta -> -1``, ``-delta <= W < delta -> 0``, ``W >= delta -> +1``.
    A zero threshold only arises from an all-zero channel; such channels map
    to 0 so that their scale and codes agree.
    """
    W64 = np.asarray(W, dtype=np.float64)
    delta = np.broadcast_to(np.asarray(delta, dtype=np.float64), (W64.shape[-1],))
    codes = np.where(W64 >= delta, 1, np.where(W64 < -delta, -1, 0)).astype(np.int8)
    codes[:, delta == 0] = 0
    return codes


def ternarize(W, granularity: str = "channel") -> TernaryTensor:
    """Ternarize a ``(n_w, d_out)`` matrix.

    ``granularity="channel"`` gives every column its own threshold and scale
    ``alpha[j] = mean(|W[:, j]|)``. ``"layer"`` is the TWN baseline: a single
    threshold ``0.7 * mean(|W|)`` and one scale ``mean(|W|)`` for the matrix.
    """
    W = _as_array(W)
    _check_matrix(W)
    n_w, d_out = W.shape
    absW = np.abs(W.astype(np.float64))
    if granularity == "channel":
        delta = channel_thresholds(W)
        alpha = channel_abs_mean(W)
    elif granularity == "layer":
        mean_abs = absW.sum() / absW.size
        delta = np.full(d_out, THRESHOLD_FACTOR * mean_abs)
        alpha = np.full(d_out, mean_abs)
    else:
        raise ConfigError(f"unknown granularity {granularity!r}", key="granularity")
    codes = ternary_codes(W, delta)
    return TernaryTensor(
        shape=(n_w, d_out),
        codes=pack_codes(codes),
        alpha=alpha.astype(np.float32),
        delta=delta,
    )


def dequantize_ternary(t: TernaryTensor) -> np.ndarray:
    return (t.unpack().astype(np.float32) * t.alpha[None, :]).astype(np.float32)


# -- min-max 8-bit --------------------------------------------------------------


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _minmax_codes(f: np.ndarray, x_min, scale) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(scale > 0, (f - x_min) / np.where(scale > 0, scale, 1), 0)
    return np.clip(round_half_away(q), 0, LEVELS).astype(np.uint8)


@dataclass(frozen=True)
class QuantizedActivation:
    """Unsigned 8-bit codes with ``value = code * scale + x_min``."""

    shape: tuple[int, ...]
    data: np.ndarray  # uint8
    scale: float
    x_min: float

    @property
    def x_max(self) -> float:
        return self.x_min + LEVELS * self.scale

    def dequantize(self) -> np.ndarray:
        return (self.data.astype(np.float32) * np.float32(self.scale) + np.float32(self.x_min))


def quantize_minmax8(f) -> QuantizedActivation:
    """Min-max 8-bit quantization of a whole tensor.

    A constant tensor gets ``scale = 0`` and all-zero codes, so it
    dequantizes to itself.
    """
    f = np.asarray(_as_array(f), dtype=np.float32)
    x_min, x_max = np.float32(f.min()), np.float32(f.max())
    scale = np.float32((np.float64(x_max) - np.float64(x_min)) / LEVELS)
    codes = _minmax_codes(f, x_min, scale)
    return QuantizedActivation(shape=f.shape, data=codes, scale=float(scale), x_min=float(x_min))


@dataclass(frozen=True)
class Int8Weight:
    """Per-output-channel min-max 8-bit weight matrix."""

    shape: tuple[int, int]
    codes: np.ndarray  # uint8, (n_w, d_out)
    scale: np.ndarray  # float32, d_out
    offset: np.ndarray  # float32, d_out (the channel minimum)

    @property
    def nbytes(self) -> int:
        return int(self.codes.size + 4 * self.scale.size + 4 * self.offset.size)

    def dequantize(self) -> np.ndarray:
        return (self.codes.astype(np.float32) * self.scale[None, :] + self.offset[None, :]).astype(
            np.float32
        )


def quantize_minmax8_channelwise(W) -> Int8Weight:
    W = np.asarray(_as_array(W), dtype=np.float32)
    if W.ndim != 2:
        raise DimensionError(f"expected a 2-D weight matrix, got shape {W.shape}")
    lo, hi = W.min(axis=0), W.max(axis=0)
    scale = ((hi.astype(np.float64) - lo) / LEVELS).astype(np.float32)
    codes = _minmax_codes(W, lo[None, :], scale[None, :])
    return Int8Weight(shape=W.shape, codes=codes, scale=scale, offset=lo.astype(np.float32))


# -- straight-through estimators ------------------------------------------------


def ste_backward_ternarize(upstream_grad, W, alpha=None) -> np.ndarray:
    """Weight gradient through ternarization: ``g[k, j] * alpha[j]``.

    The scale is treated as a constant, so it receives no gradient.
    """
    g = _as_array(upstream_grad)
    Wd = _as_array(W)
    if g.shape != Wd.shape:
        raise DimensionError(f"gradient shape {g.shape} does not match weight shape {Wd.shape}")
    if alpha is None:
        alpha = ternarize(Wd).alpha
    return g * np.asarray(alpha, dtype=g.dtype)[None, :]


def ste_backward_round(upstream_grad) -> np.ndarray:
    """Rounding passes gradients through unchanged."""
    return _as_array(upstream_grad)


def ternary_weight(W: Tensor, granularity: str = "channel") -> tuple[Tensor, TernaryTensor]:
    """Differentiable ternarized view of latent weights ``W``."""
    t = ternarize(W.data, granularity)
    out = dequantize_ternary(t).astype(W.dtype, copy=False)
    alpha = t.alpha.astype(W.dtype)
    return apply_op(out, (W,), lambda g: (g * alpha[None, :],)), t


def int8_weight(W: Tensor) -> tuple[Tensor, Int8Weight]:
    """Differentiable per-channel 8-bit view of latent weights ``W``."""
    q = quantize_minmax8_channelwise(W.data)
    out = q.dequantize().astype(W.dtype, copy=False)
    return apply_op(out, (W,), lambda g: (g,)), q


def fake_quant_minmax8(x: Tensor, per_sample: bool = True, frozen_range=None) -> Tensor:
    """Quantize-dequantize ``x`` to 8 bits with an identity backward.

    Ranges are taken per sample (all axes but the first) when ``per_sample``
    is set, otherwise over the whole tensor. ``frozen_range=(lo, hi)`` uses a
    calibrated range instead and clamps values outside it.
    """
    xd = x.data
    if frozen_range is not None:
        lo, hi = (np.asarray(v, dtype=np.float64) for v in frozen_range)
    elif per_sample and xd.ndim > 1:
        axes = tuple(range(1, xd.ndim))
        lo = xd.min(axis=axes, keepdims=True).astype(np.float64)
        hi = xd.max(axis=axes, keepdims=True).astype(np.float64)
    else:
        lo = np.asarray(xd.min(), dtype=np.float64)
        hi = np.asarray(xd.max(), dtype=np.float64)
    scale = (hi - lo) / LEVELS
    codes = _minmax_codes(xd.astype(np.float64), lo, scale)
    out = (codes * scale + lo).astype(xd.dtype)
    return apply_op(out, (x,), lambda g: (g,))


# -- policy ---------------------------------------------------------------------

WEIGHT_BITS = (32, 8, 2)
ACTIVATION_BITS = (32, 8)


@dataclass
class QuantizationPolicy:
    """Per-layer weight bit-widths plus the activation bit-width.

    Transformer-body linear layers use ``body_bits`` unless overridden by
    layer id in ``overrides``. Norm layers (ids containing ``norm``) are
    always 32-bit.
    """

    body_bits: int = 2
    patch_embed_bits: int = 8
    head_bits: int = 8
    activation_bits: int = 8
    granularity: str = "channel"
    calibration: str = "dynamic"
    overrides: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        for key in ("body_bits", "patch_embed_bits", "head_bits"):
            if getattr(self, key) not in WEIGHT_BITS:
                raise ConfigError(f"{key} must be one of {WEIGHT_BITS}", key=key)
        if self.activation_bits not in ACTIVATION_BITS:
            raise ConfigError(f"activation_bits must be one of {ACTIVATION_BITS}",
                              key="activation_bits")
        if self.granularity not in ("channel", "layer"):
            raise ConfigError("granularity must be 'channel' or 'layer'", key="granularity")
        if self.calibration not in ("dynamic", "frozen"):
            raise ConfigError("calibration must be 'dynamic' or 'frozen'", key="calibration")
        for layer_id, bits in self.overrides.items():
            if "norm" in layer_id or "softmax" in layer_id:
                if bits != 32:
                    raise ConfigError(f"{layer_id} is never quantized; it must stay 32-bit",
                                      key=layer_id)
            elif bits not in WEIGHT_BITS:
                raise ConfigError(f"{layer_id}: bits must be one of {WEIGHT_BITS}", key=layer_id)

    @classmethod
    def real32(cls) -> "QuantizationPolicy":
        return cls(body_bits=32, patch_embed_bits=32, head_bits=32, activation_bits=32)

    @classmethod
    def int8(cls) -> "QuantizationPolicy":
        return cls(body_bits=8, patch_embed_bits=8, head_bits=8, activation_bits=8)

    @classmethod
    def ternary(cls, patch_embed_bits: int = 8, head_bits: int = 8,
                granularity: str = "channel") -> "QuantizationPolicy":
        return cls(body_bits=2, patch_embed_bits=patch_embed_bits, head_bits=head_bits,
                   activation_bits=8, granularity=granularity)

    @classmethod
    def preset(cls, name: str) -> "QuantizationPolicy":
        presets = {
            "real32": cls.real32,
            "int8": cls.int8,
            "ternary": cls.ternary,
            "ternary-layerwise": lambda: cls.ternary(granularity="layer"),
            "ternary-all": lambda: cls.ternary(patch_embed_bits=2, head_bits=2),
        }
        if name not in presets:
            raise ConfigError(f"unknown policy preset {name!r}; choose from {sorted(presets)}",
                              key="policy")
        return presets[name]()

    def with_mode(self, mode: str) -> "QuantizationPolicy":
        """Copy with the body switched to ``mode`` (real32, int8 or ternary)."""
        if mode == "real32":
            return replace(self, body_bits=32, patch_embed_bits=32, head_bits=32,
                           activation_bits=32, overrides=dict(self.overrides))
        if mode == "int8":
            return replace(self, body_bits=8, overrides=dict(self.overrides))
        if mode == "ternary":
            return replace(self, body_bits=2, overrides=dict(self.overrides))
        raise ConfigError(f"unknown mode {mode!r}", key="mode")

    def bits_for(self, layer_id: str) -> int:
        if layer_id in self.overrides:
            return self.overrides[layer_id]
        if "norm" in layer_id:
            return 32
        if layer_id == "patch_embed":
            return self.patch_embed_bits
        if layer_id == "head":
            return self.head_bits
        return self.body_bits

    def validate(self, layer_ids) -> None:
        known = set(layer_ids)
        unknown = sorted(set(self.overrides) - known)
        if unknown:
            raise ConfigError(f"policy references unknown layer ids: {unknown}", key=unknown[0])

    def to_dict(self) -> dict:
        return {
            "body_bits": self.body_bits,
            "patch_embed_bits": self.patch_embed_bits,
            "head_bits": self.head_bits,
            "activation_bits": self.activation_bits,
            "granularity": self.granularity,
            "calibration": self.calibration,
            "overrides": dict(sorted(self.overrides.items())),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantizationPolicy":
        return cls(**{**d, "overrides": dict(d.get("overrides", {}))})
