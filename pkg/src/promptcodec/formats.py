"""Pinned on-disk formats: bitstream container, checkpoints, run config.

All multi-byte integers are little-endian.  Containers and checkpoints
carry a 32-bit model id (FNV-1a of the canonical architecture string) so
mismatched files are rejected before payloads are touched.
"""

import os
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from .backbone import ModelConfig, model_id

BITSTREAM_MAGIC = b"LPMC"
CHECKPOINT_MAGIC = b"LPMK"
FORMAT_VERSION = 1
LAMBDA_BARE = 0xFF
KIND_BACKBONE = 0
KIND_PROMPTSET = 1


class ConfigError(Exception):
    """Malformed or inconsistent run configuration."""


class ContainerError(Exception):
    """Malformed container or checkpoint bytes."""


class ModelIdError(ContainerError):
    """File was produced for a different architecture."""


def atomic_write(path, data):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


# -- bitstream container -------------------------------------------------------


@dataclass
class BitstreamContainer:
    """One compressed image: header plus the two entropy-coded payloads."""

    model_id: int
    lambda_id: int
    width: int
    height: int
    padded_width: int
    padded_height: int
    z_payload: bytes
    y_payload: bytes

    def serialize(self):
        head = struct.pack(
            "<4sBIBHHHHII",
            BITSTREAM_MAGIC,
            FORMAT_VERSION,
            self.model_id,
            self.lambda_id,
            self.width,
            self.height,
            self.padded_width,
            self.padded_height,
            len(self.z_payload),
            len(self.y_payload),
        )
        return head + self.z_payload + self.y_payload

    @staticmethod
    def header_size():
        return struct.calcsize("<4sBIBHHHHII")

    @classmethod
    def parse(cls, data, expect_model_id=None):
        hs = cls.header_size()
        if len(data) < hs:
            raise ContainerError(f"container truncated: {len(data)} bytes < {hs}-byte header")
        magic, version, mid, lam, w, h, pw, ph, zlen, ylen = struct.unpack("<4sBIBHHHHII", data[:hs])
        if magic != BITSTREAM_MAGIC:
            raise ContainerError(f"bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise ContainerError(f"unsupported container version {version}")
        if expect_model_id is not None and mid != expect_model_id:
            raise ModelIdError(f"model id 0x{mid:08x} does not match 0x{expect_model_id:08x}")
        if len(data) != hs + zlen + ylen:
            raise ContainerError(f"payload length mismatch: have {len(data) - hs}, header says {zlen + ylen}")
        return cls(mid, lam, w, h, pw, ph, data[hs : hs + zlen], data[hs + zlen :])

    def payload_bits(self):
        return 8 * (len(self.z_payload) + len(self.y_payload))

    def bpp(self):
        return self.payload_bits() / (self.width * self.height)


# -- checkpoints --------------------------------------------------------------------


def save_checkpoint(path, kind, mid, items, lambda_id=LAMBDA_BARE):
    """Write a named-tensor table; float data is stored as little-endian f32."""
    chunks = [struct.pack("<4sBIBB", CHECKPOINT_MAGIC, FORMAT_VERSION, mid, kind, lambda_id)]
    items = list(items)
    chunks.append(struct.pack("<I", len(items)))
    for name, arr in items:
        arr = np.asarray(arr, dtype="<f4")
        encoded = name.encode()
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        chunks.append(arr.tobytes())
    atomic_write(path, b"".join(chunks))


def load_checkpoint(path, expect_model_id=None, expect_kind=None):
    with open(path, "rb") as f:
        data = f.read()
    hs = struct.calcsize("<4sBIBB")
    magic, version, mid, kind, lambda_id = struct.unpack("<4sBIBB", data[:hs])
    if magic != CHECKPOINT_MAGIC:
        raise ContainerError(f"bad checkpoint magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported checkpoint version {version}")
    if expect_model_id is not None and mid != expect_model_id:
        raise ModelIdError(f"checkpoint model id 0x{mid:08x} does not match 0x{expect_model_id:08x}")
    if expect_kind is not None and kind != expect_kind:
        raise ContainerError(f"checkpoint kind {kind} is not the expected {expect_kind}")
    pos = hs
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    items = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos) if ndim else ()
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape)
        pos += 4 * n
        items[name] = arr.copy()
    if pos != len(data):
        raise ContainerError("trailing bytes after checkpoint table")
    return kind, mid, lambda_id, items


def save_backbone(path, backbone):
    save_checkpoint(path, KIND_BACKBONE, model_id(backbone.config), backbone.params.state_items())


def load_backbone(path, backbone):
    _, _, _, items = load_checkpoint(path, expect_model_id=model_id(backbone.config),
                                     expect_kind=KIND_BACKBONE)
    backbone.params.load_state(items.items())


def save_promptset(path, promptset):
    items = list(promptset.params.state_items())
    items.append(("!meta.lambda_value", np.array([promptset.lambda_value], dtype="<f4")))
    save_checkpoint(path, KIND_PROMPTSET, model_id(promptset.config), items,
                    lambda_id=promptset.lambda_id)


def load_promptset(path, config):
    from .prompts import PromptSet

    _, _, lambda_id, items = load_checkpoint(path, expect_model_id=model_id(config),
                                             expect_kind=KIND_PROMPTSET)
    lam = float(items.pop("!meta.lambda_value")[0])
    ps = PromptSet(config, lambda_id, lam)
    ps.params.load_state(items.items())
    return ps


# -- run configuration -----------------------------------------------------------------


@dataclass
class TrainConfig:
    """Optimization schedule; the lambda list defines the rate family."""

    lambda0: float = 0.0067
    lambdas: tuple = (0.0018, 0.0035, 0.013, 0.025, 0.0483)
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    stage1_steps: int = 3000
    stage2_steps: int = 600
    stage2_lr: float = 1e-3
    crop: int = 64
    seed: int = 7
    precision: str = "f32"
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.lambda0 <= 0 or any(l <= 0 for l in self.lambdas):
            raise ConfigError("all lambda values must be positive")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: str = "data/toy"
    workdir: str = "runs/default"

    def model_id(self):
        return model_id(self.model)


_INT_TUPLE = lambda s: tuple(int(v) for v in s.split(","))
_FLOAT_TUPLE = lambda s: tuple(float(v) for v in s.split(","))

_MODEL_KEYS = {
    "stages": int,
    "widths": _INT_TUPLE,
    "depths": _INT_TUPLE,
    "window": int,
    "latent_channels": int,
    "hyper_channels": int,
    "hyper_depth": int,
    "pad_multiple": int,
}

_TRAIN_KEYS = {
    "lambda0": float,
    "lambdas": _FLOAT_TUPLE,
    "lr": float,
    "beta1": float,
    "beta2": float,
    "eps": float,
    "batch_size": int,
    "stage1_steps": int,
    "stage2_steps": int,
    "stage2_lr": float,
    "crop": int,
    "seed": int,
    "precision": str,
    "checkpoint_every": int,
}

_PATH_KEYS = {"dataset": str, "workdir": str}


def parse_run_config(text):
    """Parse the flat ``section.key = value`` format; unknown keys rejected."""
    model_kv, train_kv, path_kv = {}, {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            if key.startswith("model."):
                sub = key[len("model."):]
                model_kv[sub] = _MODEL_KEYS[sub](value)
            elif key.startswith("train."):
                sub = key[len("train."):]
                train_kv[sub] = _TRAIN_KEYS[sub](value)
            elif key.startswith("paths."):
                sub = key[len("paths."):]
                path_kv[sub] = _PATH_KEYS[sub](value)
            else:
                raise KeyError(key)
        except KeyError:
            raise ConfigError(f"line {lineno}: unknown key {key!r}") from None
        except ValueError as e:
            raise ConfigError(f"line {lineno}: bad value for {key}: {e}") from None
    try:
        model = ModelConfig(**model_kv)
        train = TrainConfig(**train_kv)
    except (ValueError, ConfigError) as e:
        raise ConfigError(str(e)) from None
    return RunConfig(model=model, train=train,
                     dataset=path_kv.get("dataset", "data/toy"),
                     workdir=path_kv.get("workdir", "runs/default"))


def load_run_config(path):
    try:
        with open(path) as f:
            return parse_run_config(f.read())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None


def serialize_run_config(cfg):
    """Canonical text form: sorted keys within fixed section order."""
    lines = []
    for name in sorted(_MODEL_KEYS):
        v = getattr(cfg.model, name)
        lines.append(f"model.{name} = {_fmt(v)}")
    for name in sorted(_TRAIN_KEYS):
        v = getattr(cfg.train, name)
        lines.append(f"train.{name} = {_fmt(v)}")
    lines.append(f"paths.dataset = {cfg.dataset}")
    lines.append(f"paths.workdir = {cfg.workdir}")
    return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)
