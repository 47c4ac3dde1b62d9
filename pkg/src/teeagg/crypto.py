"""Symmetric authenticated encryption for everything that leaves an enclave.

AES-256-GCM from ``cryptography`` does the work.  Keys and nonces are drawn
from a caller-supplied numpy ``Generator`` when one is given (reproducible
test transcripts) and from ``os.urandom`` otherwise.
"""
from __future__ import annotations

import os
import struct
import threading
from dataclasses import dataclass

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

KEY_BYTES = 32
NONCE_BYTES = 12
TAG_BYTES = 16
KEY_ID_BYTES = 8


class CryptoError(Exception):
    pass


class AuthenticationError(CryptoError):
    """Decryption refused: the blob was not produced under this key."""


class WrongKeyError(AuthenticationError):
    pass


class TamperedBlobError(AuthenticationError):
    pass


class BlobFormatError(CryptoError):
    pass


class KeyConflictError(CryptoError):
    pass


class NonceReuseError(CryptoError):
    pass


@dataclass(frozen=True)
class KeyTag:
    """Who a key belongs to: ``data/<i>``, ``model``, ``mask/<set>/<i>``, ``session/<a>/<b>``."""

    kind: str
    args: tuple = ()

    @classmethod
    def data_owner(cls, i: int) -> KeyTag:
        return cls("data", (int(i),))

    @classmethod
    def model_owner(cls) -> KeyTag:
        return cls("model")

    @classmethod
    def mask(cls, set_index: int, index: int) -> KeyTag:
        return cls("mask", (int(set_index), int(index)))

    @classmethod
    def session(cls, a: str, b: str) -> KeyTag:
        return cls("session", tuple(sorted((str(a), str(b)))))

    def __str__(self):
        return "/".join([self.kind, *map(str, self.args)])


def _random_bytes(n: int, rng: np.random.Generator | None) -> bytes:
    return os.urandom(n) if rng is None else rng.bytes(n)


@dataclass(frozen=True)
class SymmetricKey:
    key_id: str
    secret: bytes
    owner_tag: KeyTag

    def __post_init__(self):
        if len(self.secret) != KEY_BYTES:
            raise ValueError(f"key must be {KEY_BYTES} bytes")

    @property
    def secret_id(self) -> str:
        return str(self.owner_tag)

    def __repr__(self):
        return f"SymmetricKey({self.key_id!r})"


def keygen(owner_tag: KeyTag, rng: np.random.Generator | None = None) -> SymmetricKey:
    secret = _random_bytes(KEY_BYTES, rng)
    # fixed width so that sealed sizes depend on the payload alone
    key_id = _random_bytes(KEY_ID_BYTES, rng).hex()
    return SymmetricKey(key_id, secret, owner_tag)


@dataclass(frozen=True)
class EncryptedBlob:
    key_id: str
    nonce: bytes
    ciphertext: bytes
    auth_tag: bytes

    def to_bytes(self) -> bytes:
        kid = self.key_id.encode("utf-8")
        return struct.pack("<H", len(kid)) + kid + self.nonce + self.auth_tag + self.ciphertext

    @classmethod
    def from_bytes(cls, data: bytes) -> EncryptedBlob:
        data = bytes(data)
        if len(data) < 2:
            raise BlobFormatError("blob shorter than its length prefix")
        (klen,) = struct.unpack_from("<H", data)
        body = 2 + klen
        if len(data) < body + NONCE_BYTES + TAG_BYTES:
            raise BlobFormatError("truncated blob")
        try:
            key_id = data[2:body].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise BlobFormatError("key_id is not utf-8") from exc
        nonce = data[body : body + NONCE_BYTES]
        tag = data[body + NONCE_BYTES : body + NONCE_BYTES + TAG_BYTES]
        return cls(key_id, nonce, data[body + NONCE_BYTES + TAG_BYTES :], tag)

    def __len__(self):
        return 2 + len(self.key_id.encode("utf-8")) + NONCE_BYTES + TAG_BYTES + len(self.ciphertext)


def sealed_size(plaintext_len: int, key_id_len: int = 2 * KEY_ID_BYTES) -> int:
    """Wire size of a blob sealed by :func:`keygen`-issued keys."""
    return 2 + key_id_len + NONCE_BYTES + TAG_BYTES + plaintext_len


class NonceLog:
    """Records every (key_id, nonce) pair used and refuses repeats."""

    def __init__(self):
        self._seen: set[tuple[str, bytes]] = set()
        self._lock = threading.Lock()

    def record(self, key_id: str, nonce: bytes) -> None:
        with self._lock:
            if (key_id, nonce) in self._seen:
                raise NonceReuseError(f"nonce reused under key {key_id}")
            self._seen.add((key_id, nonce))

    def __len__(self):
        return len(self._seen)


def encrypt(
    key: SymmetricKey,
    plaintext: bytes,
    rng: np.random.Generator | None = None,
    nonce_log: NonceLog | None = None,
) -> EncryptedBlob:
    nonce = _random_bytes(NONCE_BYTES, rng)
    if nonce_log is not None:
        nonce_log.record(key.key_id, nonce)
    out = AESGCM(key.secret).encrypt(nonce, bytes(plaintext), key.key_id.encode("utf-8"))
    return EncryptedBlob(key.key_id, nonce, out[:-TAG_BYTES], out[-TAG_BYTES:])


def decrypt(key: SymmetricKey, blob: EncryptedBlob) -> bytes:
    if blob.key_id != key.key_id:
        raise WrongKeyError(f"blob sealed under {blob.key_id!r}, not {key.key_id!r}")
    try:
        return AESGCM(key.secret).decrypt(
            blob.nonce, blob.ciphertext + blob.auth_tag, key.key_id.encode("utf-8")
        )
    except (InvalidTag, ValueError) as exc:
        raise TamperedBlobError(f"authentication failed for blob under {key.key_id!r}") from exc


class KeyRegistry:
    """Insert-once key map, safe to share between threads."""

    def __init__(self):
        self._keys: dict[str, SymmetricKey] = {}
        self._lock = threading.Lock()

    def insert(self, key: SymmetricKey) -> None:
        with self._lock:
            if key.key_id in self._keys:
                raise KeyConflictError(f"key_id {key.key_id!r} already registered")
            self._keys[key.key_id] = key

    def get(self, key_id: str) -> SymmetricKey:
        with self._lock:
            return self._keys[key_id]

    def __contains__(self, key_id: str) -> bool:
        with self._lock:
            return key_id in self._keys

    def __len__(self):
        with self._lock:
            return len(self._keys)
