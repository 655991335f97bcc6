"""Versioned binary containers for datasets and model checkpoints.

Layout (all integers little-endian u32, reals little-endian float64):

    magic (8 bytes) | version | header length | header (sorted-key JSON)
    | payload | crc32 of everything before it

The CRC is checked before anything is parsed, so a flipped byte is reported
as a checksum failure rather than a misparse.
"""

import json
import logging
import os
import struct
import zlib
from collections import OrderedDict

import numpy as np

from pgca.core.errors import ChecksumError, StorageError, VersionMismatchError
from pgca.corpus.synth import Dataset, Utterance
from pgca.lab.optim import OptState
from pgca.model.config import ModelConfig
from pgca.model.network import ModelCheckpoint
from pgca.model.params import ParameterStore

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
_U32 = struct.Struct("<I")
_FLOAT = np.dtype("<f8")


def _pack_container(magic, header, payload):
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = magic + _U32.pack(FORMAT_VERSION) + _U32.pack(len(header_bytes)) + header_bytes + payload
    return body + _U32.pack(zlib.crc32(body))


def _unpack_container(magic, blob):
    minimum = len(magic) + 3 * _U32.size
    if len(blob) < minimum:
        raise StorageError(f"file truncated: {len(blob)} bytes, need at least {minimum}")
    body, (crc,) = blob[:-_U32.size], _U32.unpack(blob[-_U32.size :])
    if zlib.crc32(body) != crc:
        raise ChecksumError("checksum mismatch: file is corrupted or truncated")
    if body[: len(magic)] != magic:
        raise StorageError(f"bad magic {body[:len(magic)]!r}, expected {magic!r}")
    offset = len(magic)
    (version,) = _U32.unpack_from(body, offset)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, this build reads version {FORMAT_VERSION}")
    (header_len,) = _U32.unpack_from(body, offset + 4)
    start = offset + 8
    if start + header_len > len(body):
        raise StorageError("file truncated inside the header")
    header = json.loads(body[start : start + header_len].decode("utf-8"))
    return header, body[start + header_len :]


class _Reader:
    def __init__(self, payload):
        self.payload = payload
        self.offset = 0

    def _take(self, size):
        if self.offset + size > len(self.payload):
            raise StorageError("file truncated inside the payload")
        chunk = self.payload[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def u32(self):
        return _U32.unpack(self._take(_U32.size))[0]

    def text(self):
        return self._take(self.u32()).decode("utf-8")

    def floats(self, shape):
        count = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self._take(count * _FLOAT.itemsize), dtype=_FLOAT).astype(np.float64).reshape(shape)

    def tokens(self):
        count = self.u32()
        return tuple(int(t) for t in np.frombuffer(self._take(count * 4), dtype="<u4"))

    def done(self):
        if self.offset != len(self.payload):
            raise StorageError(f"{len(self.payload) - self.offset} unexpected trailing bytes")


def _text(value):
    raw = value.encode("utf-8")
    return _U32.pack(len(raw)) + raw


def _tokens(values):
    return _U32.pack(len(values)) + np.asarray(values, dtype="<u4").tobytes()


def _floats(array):
    return np.ascontiguousarray(array, dtype=_FLOAT).tobytes()


def _write_atomic(path, blob):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def _read(path):
    with open(path, "rb") as f:
        return f.read()


def encode_dataset(dataset):
    parts = []
    for u in dataset:
        parts.append(_text(u.id))
        parts.append(_U32.pack(u.audio.shape[0]) + _U32.pack(u.audio.shape[1]) + _floats(u.audio))
        parts.append(_tokens(u.target))
        parts.append(_U32.pack(len(u.aux)))
        for lang in sorted(u.aux):
            parts.append(_text(lang) + _tokens(u.aux[lang]))
    header = {"kind": "dataset", "split": dataset.split, "config_digest": dataset.config_digest, "count": len(dataset)}
    return _pack_container(DatasetStorage.MAGIC, header, b"".join(parts))


def decode_dataset(blob):
    header, payload = _unpack_container(DatasetStorage.MAGIC, blob)
    reader = _Reader(payload)
    utterances = []
    for _ in range(header["count"]):
        uid = reader.text()
        frames, features = reader.u32(), reader.u32()
        audio = reader.floats((frames, features))
        target = reader.tokens()
        aux = {}
        for _ in range(reader.u32()):
            lang = reader.text()
            aux[lang] = reader.tokens()
        utterances.append(Utterance(id=uid, audio=audio, target=target, aux=aux))
    reader.done()
    return Dataset(header["split"], header["config_digest"], utterances)


def encode_checkpoint(ckpt):
    arrays = ckpt.params.arrays()
    opt = ckpt.opt_state
    opt_names = list(opt.m) if opt is not None else []
    header = {
        "kind": "checkpoint",
        "config": ckpt.config.as_dict(),
        "stage": ckpt.stage,
        "step": ckpt.step,
        "frozen": list(ckpt.frozen),
        "meta": ckpt.meta,
        "tensors": [[name, list(a.shape)] for name, a in arrays.items()],
        "optimizer": None if opt is None else {"step": opt.step, "names": opt_names},
    }
    payload = [_floats(a) for a in arrays.values()]
    for name in opt_names:
        payload.append(_floats(opt.m[name]))
        payload.append(_floats(opt.v[name]))
    return _pack_container(CheckpointStorage.MAGIC, header, b"".join(payload))


def decode_checkpoint(blob):
    header, payload = _unpack_container(CheckpointStorage.MAGIC, blob)
    reader = _Reader(payload)
    arrays = OrderedDict((name, reader.floats(tuple(shape))) for name, shape in header["tensors"])
    shapes = {name: a.shape for name, a in arrays.items()}
    opt = None
    if header["optimizer"] is not None:
        opt = OptState(step=header["optimizer"]["step"])
        for name in header["optimizer"]["names"]:
            opt.m[name] = reader.floats(shapes[name])
            opt.v[name] = reader.floats(shapes[name])
    reader.done()
    params = ParameterStore.from_arrays(arrays)
    frozen = tuple(header["frozen"])
    params.set_trainable(frozen)
    return ModelCheckpoint(
        config=ModelConfig.from_dict(header["config"]),
        params=params,
        stage=header["stage"],
        frozen=frozen,
        opt_state=opt,
        step=header["step"],
        meta=header["meta"],
    )


class DatasetStorage:
    MAGIC = b"PGCADATA"

    def __init__(self, path):
        self.path = path

    def save(self, dataset):
        _write_atomic(self.path, encode_dataset(dataset))
        logger.info("wrote %d utterances to %s", len(dataset), self.path)
        return self.path

    def load(self):
        return decode_dataset(_read(self.path))


class CheckpointStorage:
    MAGIC = b"PGCACKPT"

    def __init__(self, path):
        self.path = path

    def save(self, ckpt):
        _write_atomic(self.path, encode_checkpoint(ckpt))
        logger.info("wrote stage-%d checkpoint (step %d) to %s", ckpt.stage, ckpt.step, self.path)
        return self.path

    def load(self):
        return decode_checkpoint(_read(self.path))


class StorageFactory:
    _registry = {
        "dataset": DatasetStorage,
        "checkpoint": CheckpointStorage,
    }

    @classmethod
    def create(cls, kind, path):
        storage_cls = cls._registry.get(kind)
        if storage_cls is None:
            raise ValueError(f"Unknown storage kind: {kind!r}")
        return storage_cls(path)


def save_dataset(dataset, path):
    return StorageFactory.create("dataset", path).save(dataset)


def load_dataset(path):
    return StorageFactory.create("dataset", path).load()


def save_checkpoint(ckpt, path):
    return StorageFactory.create("checkpoint", path).save(ckpt)


def load_checkpoint(path):
    return StorageFactory.create("checkpoint", path).load()
