"""Packed ternary GEMM kernels and a small benchmark harness.

Both kernels accumulate signed sums per output channel first and apply the
channel scale once per output element. The int8 path works on raw uint8
activation codes with 32-bit integer accumulation and folds the activation
offset in afterwards using per-channel code sums.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass

import numpy as np

from tervit.exceptions import DimensionError
from tervit.quantization import QuantizedActivation, TernaryTensor, quantize_minmax8

BENCH_HEADER = ["m", "k", "n", "kernel", "reps", "ns_per_call", "eff_gflops", "weight_bytes"]
INT8_MAX_K = 2**23


@dataclass(frozen=True)
class PackedGemmPlan:
    m: int
    k: int
    n: int
    tile_n: int = 64
    accumulate: str = "int32"  # "int32" for uint8 activations, "float32" otherwise

    def __post_init__(self):
        if min(self.m, self.k, self.n, self.tile_n) <= 0:
            raise ValueError("plan dimensions must be positive")
        if self.accumulate == "int32" and self.k > INT8_MAX_K:
            raise ValueError(f"k={self.k} exceeds the int32 accumulator bound {INT8_MAX_K}")


def packed_weight_bytes(k: int, n: int) -> int:
    """Footprint of a packed ``k x n`` ternary matrix: codes plus float32 alphas."""
    return -(-k * n // 4) + 4 * n


def quantize_activation(x: np.ndarray) -> QuantizedActivation:
    return quantize_minmax8(x)


def _signed_codes(w: TernaryTensor) -> np.ndarray:
    return w.unpack()


def _check(k: int, w: TernaryTensor) -> None:
    if w.shape[0] != k:
        raise DimensionError(f"activation width {k} does not match ternary weight {w.shape}")


def ternary_gemm_f32(x: np.ndarray, w: TernaryTensor, tile_n: int = 64) -> np.ndarray:
    """``x @ dequantize(w)`` as ``(sum over +1 codes - sum over -1 codes) * alpha``."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2:
        raise DimensionError(f"expected a 2-D activation, got {x.shape}")
    _check(x.shape[1], w)
    codes = _signed_codes(w)
    out = np.empty((x.shape[0], w.shape[1]), dtype=np.float32)
    for j0 in range(0, w.shape[1], tile_n):
        t = codes[:, j0:j0 + tile_n]
        plus = x @ (t == 1).astype(np.float32)
        minus = x @ (t == -1).astype(np.float32)
        out[:, j0:j0 + tile_n] = (plus - minus) * w.alpha[j0:j0 + tile_n]
    return out


def channel_code_sums(w: TernaryTensor) -> np.ndarray:
    return _signed_codes(w).sum(axis=0, dtype=np.int64)


def ternary_gemm_i8(xq: QuantizedActivation, w: TernaryTensor, tile_n: int = 64) -> np.ndarray:
    """GEMM of 8-bit activation codes against packed ternary weights.

    ``sum_k (c_x * s + x_min) * t = s * sum_k c_x * t + x_min * sum_k t``;
    the first sum is exact in int32, the correction is applied per channel.
    """
    if len(xq.shape) != 2:
        raise DimensionError(f"expected a 2-D activation, got {xq.shape}")
    k = xq.shape[1]
    _check(k, w)
    if k > INT8_MAX_K:
        raise ValueError(f"k={k} exceeds the int32 accumulator bound")
    codes = _signed_codes(w).astype(np.int32)
    cx = xq.data.astype(np.int32)
    tsum = codes.sum(axis=0)
    out = np.empty((xq.shape[0], w.shape[1]), dtype=np.float32)
    s, x_min = np.float64(np.float32(xq.scale)), np.float64(np.float32(xq.x_min))
    for j0 in range(0, w.shape[1], tile_n):
        acc = cx @ codes[:, j0:j0 + tile_n]
        alpha = w.alpha[j0:j0 + tile_n].astype(np.float64)
        out[:, j0:j0 + tile_n] = (s * acc + x_min * tsum[j0:j0 + tile_n]) * alpha
    return out


def dense_gemm_f32(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.asarray(x, np.float32) @ np.asarray(w, np.float32)


# -- benchmark -------------------------------------------------------------------


def _time_call(fn, reps: int) -> float:
    fn()
    start = time.perf_counter_ns()
    for _ in range(reps):
        fn()
    return (time.perf_counter_ns() - start) / reps


def bench(plan: PackedGemmPlan, reps: int = 10, seed: int = 0,
          kernels: tuple[str, ...] = ("dense_f32", "ternary_f32", "ternary_i8")) -> list[dict]:
    """Time each kernel on a deterministic workload; one row per kernel."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    from tervit.quantization import ternarize

    rng = np.random.default_rng(seed)
    x = rng.standard_normal((plan.m, plan.k)).astype(np.float32)
    W = rng.standard_normal((plan.k, plan.n)).astype(np.float32)
    t = ternarize(W)
    xq = quantize_activation(x)
    Wd = t.dequantize()
    calls = {
        "dense_f32": (lambda: dense_gemm_f32(x, Wd), 4 * plan.k * plan.n),
        "ternary_f32": (lambda: ternary_gemm_f32(x, t, plan.tile_n), t.nbytes),
        "ternary_i8": (lambda: ternary_gemm_i8(xq, t, plan.tile_n), t.nbytes),
    }
    rows = []
    for name in kernels:
        fn, wbytes = calls[name]
        ns = _time_call(fn, reps)
        flops = 2.0 * plan.m * plan.k * plan.n
        rows.append({
            "m": plan.m, "k": plan.k, "n": plan.n, "kernel": name, "reps": reps,
            "ns_per_call": round(ns, 1), "eff_gflops": round(flops / ns, 4),
            "weight_bytes": wbytes,
        })
    return rows


def model_shapes(config, batch_tokens: int | None = None) -> list[tuple[int, int, int]]:
    """The distinct (m, k, n) GEMMs of one forward pass of ``config``."""
    m = batch_tokens or config.num_tokens
    d, h = config.embed_dim, config.mlp_hidden
    shapes = [(config.num_patches, config.patch_dim, d), (m, d, d), (m, d, h), (m, h, d),
              (1, d, config.num_classes)]
    return list(dict.fromkeys(shapes))


def bench_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=BENCH_HEADER, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
