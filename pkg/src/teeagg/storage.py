"""Untrusted, versioned blob storage.

Blobs are immutable once written: a second put to the same key is accepted
only when the bytes are identical (so a retried upload is harmless).  Model
checkpoints are addressed by (epoch, batch) and may only move forward.

Directory layout for :class:`DirectoryStore`: one file per blob directly under
the root, named by the percent-encoded canonical key string (see
:meth:`BlobKey.to_str`), holding exactly the crypto wire bytes.
"""
from __future__ import annotations

import enum
import os
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path
from urllib.parse import quote, unquote

from .crypto import EncryptedBlob


class StorageError(Exception):
    pass


class BlobNotFoundError(StorageError, KeyError):
    pass


class BlobConflictError(StorageError):
    pass


class Namespace(str, enum.Enum):
    DATA = "data"
    MODEL = "model"
    MASK = "mask"
    METRICS = "metrics"


@dataclass(frozen=True)
class BlobKey:
    namespace: Namespace
    ident: tuple[int, ...] = ()
    version: tuple[int, ...] = (0,)

    @classmethod
    def data(cls, owner: int, batch: int = 0) -> BlobKey:
        return cls(Namespace.DATA, (int(owner),), (int(batch),))

    @classmethod
    def model(cls, epoch: int, batch: int) -> BlobKey:
        return cls(Namespace.MODEL, (), (int(epoch), int(batch)))

    @classmethod
    def mask(cls, set_index: int, enclave_index: int) -> BlobKey:
        return cls(Namespace.MASK, (int(set_index), int(enclave_index)), (0,))

    @classmethod
    def metrics(cls, n: int) -> BlobKey:
        return cls(Namespace.METRICS, (), (int(n),))

    def sort_key(self):
        return (self.version, self.ident)

    def to_str(self) -> str:
        ident = ",".join(map(str, self.ident))
        version = ",".join(map(str, self.version))
        return f"{self.namespace.value}:{ident}@{version}"

    @classmethod
    def from_str(cls, s: str) -> BlobKey:
        ns, rest = s.split(":", 1)
        ident, version = rest.split("@", 1)

        def ints(part):
            return tuple(int(p) for p in part.split(",")) if part else ()

        return cls(Namespace(ns), ints(ident), ints(version))

    def __str__(self):
        return self.to_str()


class BlobStore:
    """Shared put/get semantics; subclasses supply raw byte storage."""

    def __init__(self):
        self._lock = threading.RLock()

    # backend hooks
    def _read(self, key: BlobKey) -> bytes | None:
        raise NotImplementedError

    def _write(self, key: BlobKey, data: bytes) -> None:
        raise NotImplementedError

    def _keys(self) -> list[BlobKey]:
        raise NotImplementedError

    def put(self, key: BlobKey, blob: EncryptedBlob | bytes) -> None:
        data = blob.to_bytes() if isinstance(blob, EncryptedBlob) else bytes(blob)
        with self._lock:
            existing = self._read(key)
            if existing is not None:
                if existing == data:
                    return
                raise BlobConflictError(f"{key} already holds different bytes")
            if key.namespace is Namespace.MODEL:
                models = self.list(Namespace.MODEL)
                if models and key.version < models[-1].version:
                    raise BlobConflictError(
                        f"model version {key.version} is behind latest {models[-1].version}"
                    )
            self._write(key, data)

    def get_bytes(self, key: BlobKey) -> bytes:
        with self._lock:
            data = self._read(key)
        if data is None:
            raise BlobNotFoundError(str(key))
        return data

    def get(self, key: BlobKey) -> EncryptedBlob:
        return EncryptedBlob.from_bytes(self.get_bytes(key))

    def __contains__(self, key: BlobKey) -> bool:
        with self._lock:
            return self._read(key) is not None

    def list(self, namespace: Namespace) -> list[BlobKey]:
        with self._lock:
            keys = [k for k in self._keys() if k.namespace is Namespace(namespace)]
        return sorted(keys, key=BlobKey.sort_key)

    def latest_model(self) -> tuple[BlobKey, EncryptedBlob]:
        models = self.list(Namespace.MODEL)
        if not models:
            raise BlobNotFoundError("no model version stored")
        return models[-1], self.get(models[-1])

    def scan(self, needle: bytes) -> list[BlobKey]:
        """Keys whose stored bytes contain ``needle`` anywhere."""
        with self._lock:
            return [k for k in self._keys() if needle in self._read(k)]

    def items(self):
        with self._lock:
            keys = sorted(self._keys(), key=lambda k: (k.namespace.value, k.sort_key()))
            return [(k, self._read(k)) for k in keys]

    def total_bytes(self) -> int:
        return sum(len(v) for _, v in self.items())


class MemoryStore(BlobStore):
    def __init__(self):
        super().__init__()
        self._blobs: dict[BlobKey, bytes] = {}

    def _read(self, key):
        return self._blobs.get(key)

    def _write(self, key, data):
        self._blobs[key] = data

    def _keys(self):
        return list(self._blobs)


class DirectoryStore(BlobStore):
    def __init__(self, root: str | os.PathLike):
        super().__init__()
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, key: BlobKey) -> Path:
        return self.root / quote(key.to_str(), safe="")

    def _read(self, key):
        try:
            return self._path(key).read_bytes()
        except FileNotFoundError:
            return None

    def _write(self, key, data):
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".tmp-")
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, self._path(key))

    def _keys(self):
        return [BlobKey.from_str(unquote(p.name)) for p in self.root.iterdir() if not p.name.startswith(".tmp-")]
