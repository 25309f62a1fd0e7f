"""
Binary checkpoint format (little-endian)

    b"MSAD" | u32 version | u32 n + config text (sorted key=value lines)
    u32 tensor count, per tensor: u16 n + name | u8 frozen | u8 ndim | u32 dims | f64 payload
    u32 adam step | u32 moment count, per moment: u16 n + name | m payload | v payload

Moment shapes come from the parameter with the same name.
"""

import os
import struct
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from config import settings_from_lines
from errors import CorruptCheckpointError, UnsupportedVersionError, CheckpointShapeError, CheckpointError

MAGIC = b"MSAD"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config_lines: List[str]
    tensors: List[Tuple[str, bool, np.ndarray]]
    adam_step: int = 0
    moments: List[Tuple[str, np.ndarray, np.ndarray]] = field(default_factory=list)

    @classmethod
    def from_model(cls, model, settings, optimizer=None):
        tensors = [(name, not t.requires_grad, t.data.copy()) for name, t in model.params]
        step, moments = (0, []) if optimizer is None else optimizer.state()
        return cls(settings.to_lines(), tensors, step,
                   [(name, m.copy(), v.copy()) for name, m, v in moments])

    def settings(self):
        return settings_from_lines(self.config_lines)

    def tensor(self, name):
        for tensor_name, _, data in self.tensors:
            if tensor_name == name:
                return data
        raise KeyError(name)

    def to_bytes(self):
        out = bytearray(MAGIC)
        out += struct.pack("<I", FORMAT_VERSION)
        config = "\n".join(self.config_lines).encode("utf-8")
        out += struct.pack("<I", len(config)) + config
        out += struct.pack("<I", len(self.tensors))
        for name, frozen, data in self.tensors:
            out += _pack_name(name)
            out += struct.pack("<BB", int(frozen), data.ndim)
            out += struct.pack(f"<{data.ndim}I", *data.shape)
            out += np.ascontiguousarray(data, dtype="<f8").tobytes()
        out += struct.pack("<II", self.adam_step, len(self.moments))
        for name, m, v in self.moments:
            out += _pack_name(name)
            out += np.ascontiguousarray(m, dtype="<f8").tobytes()
            out += np.ascontiguousarray(v, dtype="<f8").tobytes()
        return bytes(out)

    @classmethod
    def from_bytes(cls, data):
        reader = _Reader(data)
        if reader.read(len(MAGIC)) != MAGIC:
            raise CorruptCheckpointError("bad magic bytes, not a lesionseg checkpoint")
        (version,) = reader.unpack("<I")
        if version != FORMAT_VERSION:
            raise UnsupportedVersionError(version, FORMAT_VERSION)
        (config_len,) = reader.unpack("<I")
        try:
            config_text = reader.read(config_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CorruptCheckpointError(f"config block is not UTF-8: {e}") from None
        config_lines = config_text.split("\n") if config_text else []

        (count,) = reader.unpack("<I")
        tensors, shapes = [], {}
        for _ in range(count):
            name = reader.name()
            frozen, ndim = reader.unpack("<BB")
            shape = reader.unpack(f"<{ndim}I")
            tensors.append((name, bool(frozen), reader.array(shape)))
            shapes[name] = shape

        step, n_moments = reader.unpack("<II")
        moments = []
        for _ in range(n_moments):
            name = reader.name()
            if name not in shapes:
                raise CorruptCheckpointError(f"moment for unknown tensor '{name}'")
            moments.append((name, reader.array(shapes[name]), reader.array(shapes[name])))
        if not reader.exhausted:
            raise CorruptCheckpointError(f"{reader.remaining} trailing bytes after the moment table")
        return cls(config_lines, tensors, step, moments)

    def save(self, path, verbose=False):
        """Atomic write: temp file in the same directory, then rename"""
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        tmp_path = path + ".tmp"
        try:
            with open(tmp_path, "wb") as f:
                f.write(self.to_bytes())
            os.replace(tmp_path, path)
        except OSError as e:
            raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e
        if verbose:
            print(f"[Checkpoint] Saved {len(self.tensors)} tensors to {path}")
        return path


def _pack_name(name):
    encoded = name.encode("utf-8")
    return struct.pack("<H", len(encoded)) + encoded


class _Reader:
    def __init__(self, data):
        self.data = memoryview(data)
        self.offset = 0

    @property
    def remaining(self):
        return len(self.data) - self.offset

    @property
    def exhausted(self):
        return self.remaining == 0

    def read(self, n):
        if n > self.remaining:
            raise CorruptCheckpointError(f"truncated checkpoint: wanted {n} bytes at offset {self.offset}")
        chunk = bytes(self.data[self.offset:self.offset + n])
        self.offset += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))

    def name(self):
        (length,) = self.unpack("<H")
        try:
            return self.read(length).decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptCheckpointError("tensor name is not UTF-8") from None

    def array(self, shape):
        n = int(np.prod(shape)) if shape else 1
        return np.frombuffer(self.read(8 * n), dtype="<f8").astype(np.float64).reshape(shape)


def load_checkpoint(path):
    if not os.path.isfile(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        return Checkpoint.from_bytes(f.read())


def save_checkpoint(checkpoint, path, verbose=False):
    return checkpoint.save(path, verbose=verbose)


def restore_model(checkpoint, model, optimizer=None):
    """Copy checkpoint tensors into `model` (and moments into `optimizer`), checking names and shapes"""
    stored = {name: data for name, _, data in checkpoint.tensors}
    expected = {name for name, _ in model.params}
    missing = sorted(expected - set(stored))
    extra = sorted(set(stored) - expected)
    if missing or extra:
        raise CheckpointShapeError(f"parameter tables differ (missing: {missing[:5]}, unexpected: {extra[:5]})")
    for name, tensor in model.params:
        data = stored[name]
        if data.shape != tensor.shape:
            raise CheckpointShapeError(f"'{name}': checkpoint shape {data.shape} != model shape {tensor.shape}")
        tensor.data[...] = data
    model.clear_cache()
    if optimizer is not None:
        optimizer.load_state(checkpoint.adam_step, checkpoint.moments)
    return model
