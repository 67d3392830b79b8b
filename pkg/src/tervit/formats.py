"""Checkpoint container and run-configuration files.

Both formats are documented byte for byte / key for key in FORMATS.md.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import json
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from tervit.exceptions import ConfigError, ContractError, FormatError
from tervit.model import ViTConfig, layer_ids
from tervit.quantization import Int8Weight, QuantizationPolicy, TernaryTensor, THRESHOLD_FACTOR
from tervit.training import AdamWState, TrainSchedule

MAGIC = b"TERVIT\x00\x01"
VERSION = 1
ALIGN = 64

DTYPE_F32, DTYPE_U8, DTYPE_PACKED2 = 0, 1, 2
DTYPE_NAMES = {DTYPE_F32: "f32", DTYPE_U8: "u8", DTYPE_PACKED2: "packed2"}

META_CONFIG = "meta.config"
META_DIGEST = "meta.digest"
OPTIM_PREFIX = "optim."


def config_digest(config: ViTConfig) -> bytes:
    blob = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).digest()


@dataclass
class Checkpoint:
    config: ViTConfig
    tensors: dict  # name -> np.ndarray (f32) | TernaryTensor | Int8Weight
    policy: QuantizationPolicy | None = None
    optimizer: AdamWState | None = None
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class TableEntry:
    name: str
    dtype: int
    shape: tuple[int, ...]
    offset: int
    length: int


def _align(n: int) -> int:
    return -(-n // ALIGN) * ALIGN


def _encode(value) -> tuple[int, tuple[int, ...], bytes]:
    if isinstance(value, TernaryTensor):
        return (DTYPE_PACKED2, tuple(value.shape),
                value.codes.tobytes() + value.alpha.astype("<f4").tobytes())
    if isinstance(value, Int8Weight):
        return (DTYPE_U8, tuple(value.shape),
                value.codes.astype(np.uint8).tobytes() + value.scale.astype("<f4").tobytes()
                + value.offset.astype("<f4").tobytes())
    if isinstance(value, (bytes, bytearray)):
        return DTYPE_U8, (len(value),), bytes(value)
    arr = np.asarray(value)
    if arr.dtype == np.uint8:
        return DTYPE_U8, arr.shape, arr.tobytes()
    if not np.issubdtype(arr.dtype, np.floating):
        raise ContractError(f"cannot serialize array of dtype {arr.dtype}")
    return DTYPE_F32, arr.shape, np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _decode(entry: TableEntry, blob: bytes):
    shape = entry.shape
    count = int(np.prod(shape)) if shape else 1
    if entry.dtype == DTYPE_F32:
        if len(blob) != 4 * count:
            raise FormatError(f"{entry.name}: f32 payload of {len(blob)} bytes for shape {shape}")
        return np.frombuffer(blob, dtype="<f4").astype(np.float32).reshape(shape)
    if entry.dtype == DTYPE_U8:
        if len(blob) == count:
            return np.frombuffer(blob, dtype=np.uint8).reshape(shape).copy()
        n = shape[-1]
        if len(shape) != 2 or len(blob) != count + 8 * n:
            raise FormatError(f"{entry.name}: u8 payload of {len(blob)} bytes for shape {shape}")
        codes = np.frombuffer(blob, dtype=np.uint8, count=count).reshape(shape).copy()
        scale = np.frombuffer(blob, dtype="<f4", count=n, offset=count).astype(np.float32)
        offset = np.frombuffer(blob, dtype="<f4", count=n, offset=count + 4 * n).astype(np.float32)
        return Int8Weight(shape=tuple(shape), codes=codes, scale=scale, offset=offset)
    if entry.dtype == DTYPE_PACKED2:
        if len(shape) != 2:
            raise FormatError(f"{entry.name}: packed2 tensors must be 2-D")
        nbytes = -(-count // 4)
        n = shape[1]
        if len(blob) != nbytes + 4 * n:
            raise FormatError(f"{entry.name}: packed2 payload of {len(blob)} bytes for {shape}")
        codes = np.frombuffer(blob, dtype=np.uint8, count=nbytes).copy()
        alpha = np.frombuffer(blob, dtype="<f4", count=n, offset=nbytes).astype(np.float32)
        t = TernaryTensor(tuple(shape), codes, alpha, THRESHOLD_FACTOR * alpha.astype(np.float64))
        t.unpack()  # rejects 0b11 codes
        return t
    raise FormatError(f"{entry.name}: unknown dtype code {entry.dtype}")


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    """Write ``checkpoint`` to ``path`` in the TERVIT container format."""
    meta = {"config": checkpoint.config.to_dict(),
            "policy": None if checkpoint.policy is None else checkpoint.policy.to_dict(),
            "extra": checkpoint.extra}
    items: list[tuple[str, object]] = [
        (META_DIGEST, config_digest(checkpoint.config)),
        (META_CONFIG, json.dumps(meta, sort_keys=True).encode()),
    ]
    items += list(checkpoint.tensors.items())
    opt = checkpoint.optimizer
    if opt is not None:
        items.append((OPTIM_PREFIX + "step", np.array([opt.step], dtype=np.float32)))
        items += [(f"{OPTIM_PREFIX}exp_avg.{k}", v) for k, v in opt.exp_avg.items()]
        items += [(f"{OPTIM_PREFIX}exp_avg_sq.{k}", v) for k, v in opt.exp_avg_sq.items()]

    encoded = [(name, *_encode(value)) for name, value in items]
    table = io.BytesIO()
    offset = 0
    for name, dtype, shape, blob in encoded:
        raw = name.encode("utf-8")
        table.write(struct.pack("<H", len(raw)) + raw)
        table.write(struct.pack("<BB", dtype, len(shape)))
        table.write(struct.pack(f"<{len(shape)}I", *shape))
        table.write(struct.pack("<QQ", offset, len(blob)))
        offset = _align(offset + len(blob))
    header = MAGIC + struct.pack("<II", VERSION, len(encoded)) + table.getvalue()
    out = bytearray(header)
    out += b"\x00" * (_align(len(out)) - len(out))
    payload_start = len(out)
    for name, dtype, shape, blob in encoded:
        out += blob
        out += b"\x00" * (_align(len(out) - payload_start) - (len(out) - payload_start))
    try:
        Path(path).write_bytes(bytes(out))
    except OSError as exc:
        raise OSError(f"failed to write checkpoint {path}: {exc}") from exc


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: unexpected end of file at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_table(buf: bytes, path="<buffer>") -> tuple[list[TableEntry], int]:
    r = _Reader(buf, path)
    magic = r.take(len(MAGIC))
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    entries = []
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        dtype, ndim = r.unpack("<BB")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        offset, length = r.unpack("<QQ")
        entries.append(TableEntry(name, dtype, tuple(shape), offset, length))
    payload_start = _align(r.pos)
    for e in entries:
        if payload_start + e.offset + e.length > len(buf):
            raise FormatError(f"{path}: unexpected end of file in payload of {e.name!r}")
    return entries, payload_start


def load_checkpoint(path, expected_config: ViTConfig | None = None) -> Checkpoint:
    """Read a checkpoint; a config mismatch fails before tensors are decoded."""
    path = Path(path)
    buf = path.read_bytes()
    entries, start = read_table(buf, path)
    by_name = {e.name: e for e in entries}
    for key in (META_DIGEST, META_CONFIG):
        if key not in by_name:
            raise FormatError(f"{path}: missing {key} entry")

    def blob(e: TableEntry) -> bytes:
        return buf[start + e.offset:start + e.offset + e.length]

    digest = blob(by_name[META_DIGEST])
    if expected_config is not None and digest != config_digest(expected_config):
        raise ConfigError(f"{path}: checkpoint config digest does not match the expected config",
                          key="config")
    meta = json.loads(blob(by_name[META_CONFIG]).decode())
    config = ViTConfig(**meta["config"])
    if config_digest(config) != digest:
        raise FormatError(f"{path}: stored config does not match its digest")
    policy = None if meta["policy"] is None else QuantizationPolicy.from_dict(meta["policy"])

    tensors: dict = {}
    opt = None
    for e in entries:
        if e.name in (META_DIGEST, META_CONFIG):
            continue
        value = _decode(e, blob(e))
        if e.name.startswith(OPTIM_PREFIX):
            opt = opt or AdamWState()
            rest = e.name[len(OPTIM_PREFIX):]
            if rest == "step":
                opt.step = int(value[0])
            elif rest.startswith("exp_avg_sq."):
                opt.exp_avg_sq[rest[len("exp_avg_sq."):]] = value
            elif rest.startswith("exp_avg."):
                opt.exp_avg[rest[len("exp_avg."):]] = value
        else:
            tensors[e.name] = value
    return Checkpoint(config, tensors, policy, opt, meta.get("extra", {}))


# -- configuration files --------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSource:
    kind: str = "synthetic"
    seed: int = 0
    num_samples: int = 200
    noise: float = 0.5
    images: str | None = None
    labels: str | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "idx"):
            raise ConfigError("data kind must be 'synthetic' or 'idx'", key="kind")
        if self.kind == "synthetic" and self.num_samples <= 0:
            raise ConfigError("num_samples must be positive", key="num_samples")
        if self.kind == "idx" and not (self.images and self.labels):
            raise ConfigError("idx data needs both 'images' and 'labels' paths", key="images")

    def load(self, config: ViTConfig, base_dir: Path | None = None):
        from tervit.data import load_idx, synthetic_blobs

        if self.kind == "synthetic":
            return synthetic_blobs(self.num_samples, config.num_classes, config.image_size,
                                   config.in_chans, seed=self.seed, noise=self.noise)
        base = base_dir or Path(".")
        return load_idx(base / self.images, base / self.labels, config.num_classes)


@dataclass
class RunConfig:
    model: ViTConfig
    policy: QuantizationPolicy
    schedule: TrainSchedule
    data: DatasetSource
    base_dir: Path | None = None


_MODEL_REQUIRED = ("image_size", "patch_size", "embed_dim", "depth", "num_heads", "mlp_ratio",
                   "num_classes")
_SECTIONS = ("model", "policy", "policy.overrides", "schedule", "data")


def _coerce(key: str, raw: str, kind):
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}", key=key) from None


def _section(cp, name: str, spec: dict, required=()) -> dict:
    if not cp.has_section(name):
        if required:
            raise ConfigError(f"missing section [{name}]", key=name)
        return {}
    out = {}
    for key, raw in cp.items(name):
        if key not in spec:
            raise ConfigError(f"unknown key {key!r} in [{name}]", key=key)
        out[key] = _coerce(key, raw, spec[key])
    for key in required:
        if key not in out:
            raise ConfigError(f"missing required key {key!r} in [{name}]", key=key)
    return out


_MODEL_SPEC = {"image_size": int, "patch_size": int, "in_chans": int, "embed_dim": int,
               "depth": int, "num_heads": int, "mlp_ratio": float, "num_classes": int,
               "attn_scale_per_head": bool}
_POLICY_SPEC = {"body_bits": int, "patch_embed_bits": int, "head_bits": int,
                "activation_bits": int, "granularity": str, "calibration": str}
_SCHEDULE_SPEC = {"phase_a_epochs": int, "phase_b_epochs": int, "lr": float,
                  "weight_decay": float, "beta1": float, "beta2": float, "eps": float,
                  "batch_size": int, "seed": int, "pretrain_epochs": int, "from_scratch": bool}
_DATA_SPEC = {"kind": str, "seed": int, "num_samples": int, "noise": float, "images": str,
              "labels": str}


def parse_config_text(text: str, base_dir: Path | None = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for name in cp.sections():
        if name not in _SECTIONS:
            raise ConfigError(f"unknown section [{name}]", key=name)
    try:
        model = ViTConfig(**_section(cp, "model", _MODEL_SPEC, _MODEL_REQUIRED))
        overrides = {k: _coerce(k, v, int) for k, v in cp.items("policy.overrides")} \
            if cp.has_section("policy.overrides") else {}
        policy = QuantizationPolicy(**_section(cp, "policy", _POLICY_SPEC), overrides=overrides)
        policy.validate(layer_ids(model))
        sched = _section(cp, "schedule", _SCHEDULE_SPEC)
        betas = (sched.pop("beta1", 0.9), sched.pop("beta2", 0.999))
        schedule = TrainSchedule(**sched, betas=betas)
        data = DatasetSource(**_section(cp, "data", _DATA_SPEC))
    except TypeError as exc:  # pragma: no cover - guarded by the key specs
        raise ConfigError(str(exc)) from None
    return RunConfig(model, policy, schedule, data, base_dir)


def parse_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, path.parent)


def serialize_config(run: RunConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["model"] = {f.name: str(getattr(run.model, f.name)) for f in fields(run.model)}
    pol = run.policy.to_dict()
    overrides = pol.pop("overrides")
    cp["policy"] = {k: str(v) for k, v in pol.items()}
    if overrides:
        cp["policy.overrides"] = {k: str(v) for k, v in overrides.items()}
    s = run.schedule
    sched = {f.name: getattr(s, f.name) for f in fields(s) if f.name != "betas"}
    sched["beta1"], sched["beta2"] = s.betas
    cp["schedule"] = {k: str(v) for k, v in sched.items()}
    cp["data"] = {f.name: str(getattr(run.data, f.name)) for f in fields(run.data)
                  if getattr(run.data, f.name) is not None}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
