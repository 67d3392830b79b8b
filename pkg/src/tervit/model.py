"""DeiT-style vision transformer built from quantizable linear layers."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

from tervit import autodiff as ad
from tervit.autodiff import Tensor
from tervit.exceptions import ConfigError, DimensionError
from tervit.quantization import (
    Int8Weight,
    QuantizationPolicy,
    TernaryTensor,
    fake_quant_minmax8,
    int8_weight,
    quantize_minmax8_channelwise,
    ternarize,
    ternary_weight,
)


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 16
    patch_size: int = 8
    in_chans: int = 1
    embed_dim: int = 16
    depth: int = 2
    num_heads: int = 2
    mlp_ratio: float = 4.0
    num_classes: int = 10
    attn_scale_per_head: bool = False

    def __post_init__(self):
        for key in ("image_size", "patch_size", "in_chans", "embed_dim", "depth", "num_heads",
                    "num_classes"):
            value = getattr(self, key)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise ConfigError(f"{key} must be a positive integer, got {value!r}", key=key)
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive", key="mlp_ratio")
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim ({self.embed_dim}) must be divisible by num_heads ({self.num_heads})",
                key="num_heads",
            )
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size ({self.image_size}) must be divisible by patch_size "
                f"({self.patch_size})",
                key="patch_size",
            )
        hidden = Fraction(self.mlp_ratio).limit_denominator(1000) * self.embed_dim
        if hidden.denominator != 1:
            raise ConfigError("mlp_ratio * embed_dim must be an integer", key="mlp_ratio")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.mlp_ratio * self.embed_dim))

    @property
    def patch_dim(self) -> int:
        return self.in_chans * self.patch_size**2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def deit_tiny(cls) -> "ViTConfig":
        return cls(224, 16, 3, 192, 12, 3, 4.0, 1000)

    @classmethod
    def deit_small(cls) -> "ViTConfig":
        return cls(224, 16, 3, 384, 12, 6, 4.0, 1000)

    @classmethod
    def deit_base(cls) -> "ViTConfig":
        return cls(224, 16, 3, 768, 12, 12, 4.0, 1000)


def parameter_shapes(config: ViTConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape of every trainable parameter, in model order."""
    d, h = config.embed_dim, config.mlp_hidden
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (config.patch_dim, d),
        "patch_embed.bias": (d,),
        "cls_token": (1, 1, d),
        "pos_embed": (1, config.num_tokens, d),
    }
    for i in range(config.depth):
        p = f"blocks.{i}"
        shapes[f"{p}.norm1.weight"] = (d,)
        shapes[f"{p}.norm1.bias"] = (d,)
        for role in ("q", "k", "v", "o"):
            shapes[f"{p}.attn.{role}.weight"] = (d, d)
            shapes[f"{p}.attn.{role}.bias"] = (d,)
        shapes[f"{p}.norm2.weight"] = (d,)
        shapes[f"{p}.norm2.bias"] = (d,)
        shapes[f"{p}.mlp.fc1.weight"] = (d, h)
        shapes[f"{p}.mlp.fc1.bias"] = (h,)
        shapes[f"{p}.mlp.fc2.weight"] = (h, d)
        shapes[f"{p}.mlp.fc2.bias"] = (d,)
    shapes["norm.weight"] = (d,)
    shapes["norm.bias"] = (d,)
    shapes["head.weight"] = (d, config.num_classes)
    shapes["head.bias"] = (config.num_classes,)
    return shapes


def linear_layer_ids(config: ViTConfig) -> list[str]:
    ids = ["patch_embed"]
    for i in range(config.depth):
        ids += [f"blocks.{i}.attn.{r}" for r in ("q", "k", "v", "o")]
        ids += [f"blocks.{i}.mlp.fc1", f"blocks.{i}.mlp.fc2"]
    ids.append("head")
    return ids


def layer_ids(config: ViTConfig) -> list[str]:
    """All layer ids a policy may reference (linear and norm layers)."""
    ids = linear_layer_ids(config)
    ids += [f"blocks.{i}.norm{j}" for i in range(config.depth) for j in (1, 2)]
    ids.append("norm")
    return ids


def owning_layer(param_name: str) -> str:
    return param_name.rsplit(".", 1)[0] if param_name.endswith((".weight", ".bias")) else param_name


# -- layers ---------------------------------------------------------------------


class ActivationQuantizer:
    """Applies 8-bit fake quantization at named points of the forward pass."""

    def __init__(self, policy: QuantizationPolicy, ranges: dict | None = None,
                 calibrate: bool = False):
        self.enabled = policy.activation_bits == 8
        self.frozen = policy.calibration == "frozen"
        self.ranges = ranges if ranges is not None else {}
        self.calibrate = calibrate

    def __call__(self, name: str, x: Tensor) -> Tensor:
        if self.calibrate:
            lo, hi = float(x.data.min()), float(x.data.max())
            old = self.ranges.get(name)
            self.ranges[name] = (lo, hi) if old is None else (min(old[0], lo), max(old[1], hi))
        if not self.enabled:
            return x
        if self.frozen and not self.calibrate:
            if name not in self.ranges:
                raise ConfigError(f"frozen calibration has no range for {name!r}; "
                                  "run calibrate() first", key="calibration")
            return fake_quant_minmax8(x, frozen_range=self.ranges[name])
        return fake_quant_minmax8(x, per_sample=True)


NO_QUANT = ActivationQuantizer(QuantizationPolicy.real32())


class Linear:
    """``y = x @ W + b`` with the weight quantized according to the policy.

    ``frozen`` holds a deployed quantized weight (loaded from a checkpoint);
    when set it replaces the latent weight in the forward pass.
    """

    def __init__(self, layer_id: str, weight: Tensor, bias: Tensor | None = None):
        self.layer_id = layer_id
        self.weight = weight
        self.bias = bias
        self.frozen: TernaryTensor | Int8Weight | None = None

    def quantized_weight(self, policy: QuantizationPolicy):
        """Return ``(effective weight tensor, quantized object or None)``."""
        if self.frozen is not None:
            return Tensor(self.frozen.dequantize().astype(self.weight.dtype)), self.frozen
        bits = policy.bits_for(self.layer_id)
        if bits == 32:
            return self.weight, None
        if bits == 8:
            return int8_weight(self.weight)
        return ternary_weight(self.weight, policy.granularity)

    def __call__(self, x: Tensor, policy: QuantizationPolicy,
                 act: ActivationQuantizer = NO_QUANT) -> Tensor:
        W, _ = self.quantized_weight(policy)
        if W.shape[0] != x.shape[-1]:
            raise DimensionError(f"{self.layer_id}: input width {x.shape[-1]} does not match "
                                 f"weight {W.shape}")
        out = ad.matmul(act(f"{self.layer_id}.in", x), W)
        return out if self.bias is None else out + self.bias

    def forward_kernel(self, x: np.ndarray, policy: QuantizationPolicy) -> np.ndarray:
        """Inference through the packed kernels (per-sample 8-bit activations)."""
        from tervit import kernels

        W, q = self.quantized_weight(policy)
        bias = 0.0 if self.bias is None else self.bias.data
        if not isinstance(q, TernaryTensor):
            if policy.activation_bits == 8:
                x = fake_quant_minmax8(Tensor(x)).data
            return x @ W.data + bias
        lead = x.shape[:-1]
        # leading axis is the batch; each sample gets its own activation range
        x2 = x.reshape(lead[0], -1, x.shape[-1])
        outs = []
        for sample in x2:
            if policy.activation_bits == 8:
                outs.append(kernels.ternary_gemm_i8(kernels.quantize_activation(sample), q))
            else:
                outs.append(kernels.ternary_gemm_f32(sample, q))
        out = np.stack(outs).reshape(*lead, q.shape[1])
        return (out + bias).astype(x.dtype)


def attention_block(f_in: Tensor, q: Linear, k: Linear, v: Linear, o: Linear,
                    policy: QuantizationPolicy, num_heads: int, scale_per_head: bool = False,
                    act: ActivationQuantizer = NO_QUANT, prefix: str = "attn",
                    attention_sink: list | None = None) -> Tensor:
    """Multi-head self-attention on ``f_in`` of shape ``(B, n, d)``.

    Scores are divided by ``sqrt(d)`` unless ``scale_per_head`` selects the
    conventional ``sqrt(d / num_heads)``.
    """
    B, n, d = f_in.shape
    if q.weight.shape[0] != d:
        raise DimensionError(f"attention input width {d} does not match {q.weight.shape}")
    dh = d // num_heads
    scale = 1.0 / math.sqrt(dh if scale_per_head else d)

    def heads(t: Tensor, name: str) -> Tensor:
        t = act(f"{prefix}.{name}", t)
        return ad.transpose(t.reshape(B, n, num_heads, dh), (0, 2, 1, 3))

    fq, fk, fv = heads(q(f_in, policy, act), "fq"), heads(k(f_in, policy, act), "fk"), \
        heads(v(f_in, policy, act), "fv")
    scores = ad.matmul(fq, ad.swapaxes(fk, -1, -2)) * scale
    A = ad.softmax_lastdim(scores)
    if attention_sink is not None:
        attention_sink.append(A.data)
    ctx = ad.matmul(act(f"{prefix}.A", A), fv)
    ctx = ad.transpose(ctx, (0, 2, 1, 3)).reshape(B, n, d)
    return o(ctx, policy, act)


def mlp_block(f_in: Tensor, fc1: Linear, fc2: Linear, policy: QuantizationPolicy,
              act: ActivationQuantizer = NO_QUANT) -> Tensor:
    if fc1.weight.shape[1] != fc2.weight.shape[0] or fc1.weight.shape[0] != fc2.weight.shape[1]:
        raise DimensionError(f"mlp weights {fc1.weight.shape} and {fc2.weight.shape} "
                             "are not d x (E d) and (E d) x d")
    return fc2(ad.gelu(fc1(f_in, policy, act)), policy, act)


# -- model ----------------------------------------------------------------------


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    x = rng.standard_normal(shape)
    while np.any(bad := np.abs(x) > 2):
        x[bad] = rng.standard_normal(int(bad.sum()))
    return (x * std).astype(np.float32)


class VisionTransformer:
    """Pre-norm ViT with class token and learned positional embeddings."""

    def __init__(self, config: ViTConfig, seed: int = 0, dtype=np.float32,
                 init_std: float = 0.02):
        self.config = config
        self.act_ranges: dict[str, tuple[float, float]] = {}
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        for name, shape in parameter_shapes(config).items():
            if name.endswith("norm1.weight") or name.endswith("norm2.weight") or name == "norm.weight":
                arr = np.ones(shape, dtype=np.float32)
            elif name.endswith(".bias"):
                arr = np.zeros(shape, dtype=np.float32)
            else:
                arr = _trunc_normal(rng, shape, init_std)
            self.params[name] = Tensor(arr.astype(dtype), requires_grad=True)
        self.linears: dict[str, Linear] = {
            lid: Linear(lid, self.params[f"{lid}.weight"], self.params[f"{lid}.bias"])
            for lid in linear_layer_ids(config)
        }

    # -- parameter access -------------------------------------------------
    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ConfigError(f"state mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise DimensionError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=self.params[k].dtype)

    def export_quantized(self, policy: QuantizationPolicy) -> dict:
        """Parameters in deployed form: packed ternary / 8-bit / float arrays."""
        policy.validate(layer_ids(self.config))
        out: dict = {}
        for name, p in self.params.items():
            lid = owning_layer(name)
            if name.endswith(".weight") and lid in self.linears:
                lin = self.linears[lid]
                if lin.frozen is not None:
                    out[name] = lin.frozen
                    continue
                bits = policy.bits_for(lid)
                if bits == 2:
                    out[name] = ternarize(p.data, policy.granularity)
                    continue
                if bits == 8:
                    out[name] = quantize_minmax8_channelwise(p.data)
                    continue
            out[name] = p.data.copy()
        return out

    def load_quantized(self, tensors: dict) -> None:
        """Install deployed tensors; quantized weights become frozen layers."""
        plain = {}
        for name, value in tensors.items():
            if isinstance(value, (TernaryTensor, Int8Weight)):
                lin = self.linears[owning_layer(name)]
                lin.frozen = value
                plain[name] = value.dequantize()
            else:
                plain[name] = value
        self.load_state_dict(plain)

    # -- forward ----------------------------------------------------------
    def patchify(self, images: np.ndarray) -> np.ndarray:
        cfg = self.config
        if images.ndim != 4 or images.shape[1] != cfg.in_chans or \
                images.shape[2] != cfg.image_size or images.shape[3] != cfg.image_size:
            raise DimensionError(
                f"expected images of shape (B, {cfg.in_chans}, {cfg.image_size}, "
                f"{cfg.image_size}), got {images.shape}"
            )
        B, C, H, W = images.shape
        p = cfg.patch_size
        x = images.reshape(B, C, H // p, p, W // p, p).transpose(0, 2, 4, 1, 3, 5)
        return np.ascontiguousarray(x.reshape(B, cfg.num_patches, cfg.patch_dim))

    def forward(self, images, policy: QuantizationPolicy | None = None,
                attention_sink: list | None = None, calibrate: bool = False) -> Tensor:
        """Logits of shape ``(B, num_classes)``."""
        policy = policy or QuantizationPolicy.real32()
        cfg = self.config
        policy.validate(layer_ids(cfg))
        images = images.data if isinstance(images, Tensor) else np.asarray(images)
        dtype = self.params["pos_embed"].dtype
        patches = Tensor(self.patchify(images).astype(dtype))
        act = ActivationQuantizer(policy, self.act_ranges, calibrate=calibrate)
        P = self.params
        B = patches.shape[0]

        x = self.linears["patch_embed"](patches, policy, act)
        cls = ad.broadcast_to(P["cls_token"], (B, 1, cfg.embed_dim))
        x = ad.concatenate([cls, x], axis=1) + P["pos_embed"]
        for i in range(cfg.depth):
            b = f"blocks.{i}"
            L = self.linears
            h = ad.layernorm(x, P[f"{b}.norm1.weight"], P[f"{b}.norm1.bias"])
            x = x + attention_block(h, L[f"{b}.attn.q"], L[f"{b}.attn.k"], L[f"{b}.attn.v"],
                                    L[f"{b}.attn.o"], policy, cfg.num_heads,
                                    cfg.attn_scale_per_head, act, f"{b}.attn", attention_sink)
            h = ad.layernorm(x, P[f"{b}.norm2.weight"], P[f"{b}.norm2.bias"])
            x = x + mlp_block(h, L[f"{b}.mlp.fc1"], L[f"{b}.mlp.fc2"], policy, act)
        x = ad.layernorm(x, P["norm.weight"], P["norm.bias"])
        return self.linears["head"](x[:, 0, :], policy, act)

    __call__ = forward

    def calibrate(self, images, policy: QuantizationPolicy) -> None:
        """Record activation ranges for ``calibration="frozen"`` policies."""
        self.act_ranges.clear()
        self.forward(images, policy, calibrate=True)

    def forward_kernels(self, images, policy: QuantizationPolicy) -> np.ndarray:
        """Inference-only forward that routes ternary layers through packed GEMMs."""
        cfg = self.config
        P = {k: v.data for k, v in self.params.items()}
        L = self.linears
        x = L["patch_embed"].forward_kernel(self.patchify(np.asarray(images, np.float32)), policy)
        B = x.shape[0]
        x = np.concatenate([np.broadcast_to(P["cls_token"], (B, 1, cfg.embed_dim)), x], axis=1)
        x = x + P["pos_embed"]
        quant = policy.activation_bits == 8
        fq = (lambda t: fake_quant_minmax8(Tensor(t)).data) if quant else (lambda t: t)
        d, nh = cfg.embed_dim, cfg.num_heads
        dh = d // nh
        scale = 1.0 / math.sqrt(dh if cfg.attn_scale_per_head else d)
        n = x.shape[1]
        for i in range(cfg.depth):
            b = f"blocks.{i}"
            h = ad.layernorm(Tensor(x), P[f"{b}.norm1.weight"], P[f"{b}.norm1.bias"]).data
            q, k, v = (fq(L[f"{b}.attn.{r}"].forward_kernel(h, policy))
                       .reshape(B, n, nh, dh).transpose(0, 2, 1, 3) for r in ("q", "k", "v"))
            A = ad.softmax_lastdim(Tensor(q @ k.swapaxes(-1, -2) * scale)).data
            ctx = (fq(A) @ v).transpose(0, 2, 1, 3).reshape(B, n, d)
            x = x + L[f"{b}.attn.o"].forward_kernel(ctx, policy)
            h = ad.layernorm(Tensor(x), P[f"{b}.norm2.weight"], P[f"{b}.norm2.bias"]).data
            hid = ad.gelu(Tensor(L[f"{b}.mlp.fc1"].forward_kernel(h, policy))).data
            x = x + L[f"{b}.mlp.fc2"].forward_kernel(hid, policy)
        x = ad.layernorm(Tensor(x), P["norm.weight"], P["norm.bias"]).data
        return L["head"].forward_kernel(x[:, 0, :], policy)


def parameter_count(config: ViTConfig) -> int:
    """Closed-form parameter count."""
    d, h, c = config.embed_dim, config.mlp_hidden, config.num_classes
    embed = config.patch_dim * d + d + d + config.num_tokens * d
    block = 2 * 2 * d + 4 * (d * d + d) + (d * h + h) + (h * d + d)
    return embed + config.depth * block + 2 * d + d * c + c


# -- model size -------------------------------------------------------------------

MB = 1_000_000


@dataclass(frozen=True)
class SizeReport:
    """Model-size accounting.

    ``real_bytes`` stores every parameter at 32 bits. ``quantized_bytes``
    charges each parameter at the weight bit-width of its layer, with
    parameters outside the linear layers (norms, embeddings, class token)
    charged at the body bit-width and quantizer metadata excluded; this is
    the convention behind the published size/compression tables.
    ``storage_bytes`` is the deployed footprint instead: packed codes plus
    float32 alphas, 8-bit codes plus per-channel scale/offset, and every
    unquantized tensor at 4 bytes.
    """

    real_bytes: int
    quantized_bytes: float
    storage_bytes: int

    @property
    def compression_ratio(self) -> float:
        return self.real_bytes / self.quantized_bytes

    @property
    def storage_ratio(self) -> float:
        return self.real_bytes / self.storage_bytes

    @property
    def real_mb(self) -> float:
        return self.real_bytes / MB

    @property
    def quantized_mb(self) -> float:
        return self.quantized_bytes / MB

    @property
    def storage_mb(self) -> float:
        return self.storage_bytes / MB


def model_size_bytes(config: ViTConfig, policy: QuantizationPolicy) -> SizeReport:
    policy.validate(layer_ids(config))
    linears = set(linear_layer_ids(config))
    real = 0
    quantized = 0.0
    storage = 0
    for name, shape in parameter_shapes(config).items():
        count = int(np.prod(shape))
        real += 4 * count
        lid = owning_layer(name)
        bits = policy.bits_for(lid) if lid in linears else policy.body_bits
        quantized += count * bits / 8
        if lid in linears and name.endswith(".weight"):
            wbits = policy.bits_for(lid)
            d_out = shape[1]
            if wbits == 2:
                storage += -(-count // 4) + 4 * d_out
            elif wbits == 8:
                storage += count + 8 * d_out
            else:
                storage += 4 * count
        else:
            storage += 4 * count
    return SizeReport(real_bytes=real, quantized_bytes=quantized, storage_bytes=storage)
