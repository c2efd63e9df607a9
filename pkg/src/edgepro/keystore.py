"""Authorization-key serialization and passphrase sealing.

Sealed file layout (``.epkey``, all integers little-endian)::

    magic   b"EPKY"
    u16     format version
    16 B    scrypt salt
    u8      log2(N)   u32 r   u32 p      scrypt cost parameters
    12 B    AES-GCM nonce
    ...     ciphertext followed by the 16-byte GCM tag

Everything before the ciphertext is authenticated as associated data, so a
tampered header fails just like a tampered payload.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.scrypt import Scrypt

from edgepro.lock import AuthorizationKey, LayerLock

MAGIC = b"EPKY"
VERSION = 1
SALT_LEN = 16
NONCE_LEN = 12
TAG_LEN = 16
DEFAULT_LOG2_N = 15
DEFAULT_R = 8
DEFAULT_P = 1
# Sanity bounds so a corrupted header cannot request absurd work or memory.
MAX_LOG2_N = 22
MAX_R = 32
MAX_P = 16

_HEADER = struct.Struct("<4sH16sBII12s")
KEY_MAGIC = b"EPK1"


class KeystoreError(Exception):
    pass


class AuthenticationError(KeystoreError):
    """Wrong passphrase or tampered file."""


class KeyFileFormatError(KeystoreError):
    """The file is not a sealed key this version understands."""


# -- canonical key encoding ---------------------------------------------------

def serialize_key(key: AuthorizationKey) -> bytes:
    """Deterministic bytes: layers and neurons sorted, values as f64 LE.

    Only the secret material is encoded (neurons, values, scales); sampling
    metadata such as the seed is not.
    """
    parts = [KEY_MAGIC, struct.pack("<I", len(key.layers))]
    for ll in sorted(key.layers, key=lambda l: l.layer):
        pairs = sorted(zip(ll.indices, ll.values))
        parts.append(struct.pack("<IdI", ll.layer, ll.scale, len(pairs)))
        for j, v in pairs:
            parts.append(struct.pack("<Id", j, v))
    return b"".join(parts)


def deserialize_key(data: bytes) -> AuthorizationKey:
    try:
        if data[:4] != KEY_MAGIC:
            raise KeyFileFormatError("not a serialized authorization key")
        off = 4
        (n_layers,) = struct.unpack_from("<I", data, off)
        off += 4
        layers = []
        for _ in range(n_layers):
            pos, scale, n = struct.unpack_from("<IdI", data, off)
            off += 16
            idx, vals = [], []
            for _ in range(n):
                j, v = struct.unpack_from("<Id", data, off)
                off += 12
                idx.append(j)
                vals.append(v)
            layers.append(LayerLock(pos, tuple(idx), tuple(vals), scale))
    except struct.error as exc:
        raise KeyFileFormatError(f"truncated key encoding: {exc}") from None
    if off != len(data):
        raise KeyFileFormatError(f"{len(data) - off} trailing bytes after key encoding")
    try:
        return AuthorizationKey(tuple(layers))
    except ValueError as exc:
        raise KeyFileFormatError(f"invalid key: {exc}") from None


# -- sealing ----------------------------------------------------------------

@dataclass(frozen=True)
class SealedKeyFile:
    version: int
    salt: bytes
    log2_n: int
    r: int
    p: int
    nonce: bytes
    ciphertext: bytes  # includes the trailing tag

    def header(self) -> bytes:
        return _HEADER.pack(MAGIC, self.version, self.salt, self.log2_n, self.r, self.p,
                            self.nonce)

    def to_bytes(self) -> bytes:
        return self.header() + self.ciphertext

    @classmethod
    def from_bytes(cls, data: bytes) -> "SealedKeyFile":
        if len(data) < _HEADER.size + TAG_LEN:
            raise KeyFileFormatError(f"sealed key file too short ({len(data)} bytes)")
        magic, version, salt, log2_n, r, p, nonce = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise KeyFileFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        if version != VERSION:
            raise KeyFileFormatError(f"unsupported key file version {version}")
        return cls(version, salt, log2_n, r, p, nonce, bytes(data[_HEADER.size:]))


def _derive(passphrase: str, salt: bytes, log2_n: int, r: int, p: int) -> bytes:
    if not (1 <= log2_n <= MAX_LOG2_N and 1 <= r <= MAX_R and 1 <= p <= MAX_P):
        raise AuthenticationError("key derivation parameters out of range")
    kdf = Scrypt(salt=salt, length=32, n=1 << log2_n, r=r, p=p)
    return kdf.derive(passphrase.encode("utf-8"))


def seal(plain: bytes, passphrase: str, log2_n=DEFAULT_LOG2_N, r=DEFAULT_R,
         p=DEFAULT_P) -> SealedKeyFile:
    """Encrypt ``plain`` under a key derived from ``passphrase``; fresh salt and nonce."""
    if not passphrase:
        raise ValueError("passphrase must be non-empty")
    if not (1 <= log2_n <= MAX_LOG2_N and 1 <= r <= MAX_R and 1 <= p <= MAX_P):
        raise ValueError("scrypt parameters out of range")
    salt, nonce = os.urandom(SALT_LEN), os.urandom(NONCE_LEN)
    shell = SealedKeyFile(VERSION, salt, log2_n, r, p, nonce, b"")
    key = _derive(passphrase, salt, log2_n, r, p)
    ct = AESGCM(key).encrypt(nonce, bytes(plain), shell.header())
    return SealedKeyFile(VERSION, salt, log2_n, r, p, nonce, ct)


def unseal(sealed: SealedKeyFile | bytes, passphrase: str) -> bytes:
    """Return the sealed bytes, or raise :class:`AuthenticationError`.

    The tag is verified before any plaintext is released.
    """
    if isinstance(sealed, (bytes, bytearray, memoryview)):
        sealed = SealedKeyFile.from_bytes(bytes(sealed))
    if not passphrase:
        raise ValueError("passphrase must be non-empty")
    key = _derive(passphrase, sealed.salt, sealed.log2_n, sealed.r, sealed.p)
    try:
        return AESGCM(key).decrypt(sealed.nonce, sealed.ciphertext, sealed.header())
    except InvalidTag:
        raise AuthenticationError("wrong passphrase or corrupted key file") from None


def save_key(key: AuthorizationKey, path, passphrase: str, **cost) -> Path:
    path = Path(path)
    if path.suffix != ".epkey":
        path = path.with_suffix(".epkey")
    blob = seal(serialize_key(key), passphrase, **cost).to_bytes()
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return path


def load_key(path, passphrase: str) -> AuthorizationKey:
    return deserialize_key(unseal(Path(path).read_bytes(), passphrase))
