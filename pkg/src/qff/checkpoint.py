"""Binary model checkpoints.

Layout (all integers little-endian)::

    b"QFF1"
    u32 header length, header bytes (UTF-8 canonical ``key = value`` lines)
    u32 tensor count
    per tensor:
        u16 name length, name bytes (UTF-8)
        u8 ndim, u32 * ndim shape
        float32 little-endian payload (C order)

Parameters are stored as 32-bit floats whatever their in-memory precision;
the header records this as ``storage = float32``. Loading yields a float32
model, so a float32 model round-trips bit-exactly.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .encoding import EncodingConfig, Variant
from .mlp import FieldModel, MlpConfig, init_layers
from .encoding import FeatureBank

MAGIC = b"QFF1"


class CheckpointFormatError(ValueError):
    """The file is not a checkpoint (bad magic or header)."""


class CheckpointCorruptionError(ValueError):
    """The checkpoint is truncated or disagrees with its configuration."""


def model_header(model: FieldModel) -> str:
    e, m = model.enc_cfg, model.mlp_cfg
    items = [
        ("storage", "float32"),
        ("encoder.variant", e.variant.value),
        ("encoder.K", e.K),
        ("encoder.L", e.L),
        ("encoder.M", e.M),
        ("encoder.N", e.N),
        ("encoder.add_pe", "true" if e.add_pe else "false"),
        ("mlp.input_width", m.input_width),
        ("mlp.output_width", m.output_width),
        ("mlp.width", m.hidden_width),
        ("mlp.layers", m.num_layers),
        ("mlp.activation", m.activation),
        ("mlp.omega0", repr(float(m.omega0))),
        ("mlp.output_transform", m.output_transform),
    ]
    return "".join(f"{k} = {v}\n" for k, v in items)


def _configs_from_header(text: str) -> tuple[EncodingConfig, MlpConfig]:
    fields = {}
    for line in text.splitlines():
        if line.strip():
            key, _, value = line.partition(" = ")
            fields[key] = value
    try:
        if fields.get("storage") != "float32":
            raise CheckpointFormatError(f"unsupported storage {fields.get('storage')!r}")
        enc = EncodingConfig(
            int(fields["encoder.K"]),
            int(fields["encoder.L"]),
            int(fields["encoder.M"]),
            int(fields["encoder.N"]),
            Variant(fields["encoder.variant"]),
            fields["encoder.add_pe"] == "true",
        )
        mlp = MlpConfig(
            int(fields["mlp.input_width"]),
            int(fields["mlp.output_width"]),
            int(fields["mlp.width"]),
            int(fields["mlp.layers"]),
            fields["mlp.activation"],
            float(fields["mlp.omega0"]),
            fields["mlp.output_transform"],
        )
    except (KeyError, ValueError) as exc:
        if isinstance(exc, CheckpointFormatError):
            raise
        raise CheckpointFormatError(f"bad checkpoint header: {exc}") from None
    return enc, mlp


def encode_checkpoint(model: FieldModel) -> bytes:
    buf = io.BytesIO()
    header = model_header(model).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    named = model.named_params()
    buf.write(struct.pack("<I", len(named)))
    for name, p in named:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", p.values.ndim))
        buf.write(struct.pack(f"<{p.values.ndim}I", *p.values.shape))
        buf.write(np.ascontiguousarray(p.values, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(path, model: FieldModel) -> None:
    Path(path).write_bytes(encode_checkpoint(model))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointCorruptionError(f"checkpoint truncated while reading {what}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(data: bytes, model: FieldModel | None = None) -> FieldModel:
    """Rebuild a model from checkpoint bytes, or load them into ``model``."""
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointFormatError("bad magic: not a QFF1 checkpoint")
    (hlen,) = r.unpack("<I", "header length")
    try:
        header = r.take(hlen, "header").decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointFormatError("checkpoint header is not UTF-8") from None
    enc, mlp = _configs_from_header(header)
    if model is None:
        layers = init_layers(mlp, np.random.default_rng(0), np.float32)
        bank = FeatureBank.zeros(enc, np.float32) if enc.quantized else None
        model = FieldModel(enc, mlp, bank, layers)
    targets = model.named_params()
    (count,) = r.unpack("<I", "tensor count")
    arrays = []
    for i in range(count):
        (nlen,) = r.unpack("<H", "tensor name length")
        name = r.take(nlen, "tensor name").decode("utf-8", errors="replace")
        (ndim,) = r.unpack("<B", f"rank of {name}")
        shape = r.unpack(f"<{ndim}I", f"shape of {name}")
        size = int(np.prod(shape, dtype=np.int64))
        payload = r.take(4 * size, f"payload of {name}")
        if i >= len(targets):
            raise CheckpointCorruptionError(f"tensor {name!r}: not present in the model")
        want_name, want = targets[i]
        if name != want_name or tuple(shape) != want.shape:
            raise CheckpointCorruptionError(
                f"tensor {name!r} {tuple(shape)} does not match model tensor {want_name!r} {want.shape}"
            )
        arrays.append(np.frombuffer(payload, dtype="<f4").reshape(shape))
    if count != len(targets):
        missing = targets[count][0]
        raise CheckpointCorruptionError(f"tensor {missing!r} missing from checkpoint")
    if r.pos != len(data):
        raise CheckpointCorruptionError(f"{len(data) - r.pos} trailing bytes after last tensor")
    for (_, p), arr in zip(targets, arrays):
        p.values[...] = arr
    return model


def load_checkpoint(path, model: FieldModel | None = None) -> FieldModel:
    return decode_checkpoint(Path(path).read_bytes(), model)
