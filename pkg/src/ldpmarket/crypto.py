"""Hashing, keyed MACs, nonce key derivation and authenticated encryption.

Primitives are pinned in :data:`SUITE`: SHA-256 for digests, HMAC-SHA256 for
provider envelopes and AES-256-GCM for response ciphertexts.
"""

from __future__ import annotations

import hashlib
import hmac
import secrets
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM


@dataclass(frozen=True)
class CryptoSuite:
    hash: str = "sha256"
    mac: str = "hmac-sha256"
    cipher: str = "aes-256-gcm"
    digest_size: int = 32
    nonce_size: int = 32
    key_size: int = 32
    iv_size: int = 12
    tag_size: int = 16
    min_psk_size: int = 16


SUITE = CryptoSuite()


class CryptoError(Exception):
    pass


class AuthenticationError(CryptoError):
    """Ciphertext failed its tag check (wrong key or tampered bytes)."""


class MalformedCiphertextError(CryptoError):
    """Ciphertext bytes cannot even be split into iv, tag and body."""


class _FixedBytes(bytes):
    size = 0

    def __new__(cls, value):
        value = bytes(value)
        if len(value) != cls.size:
            raise ValueError(f"{cls.__name__} must be {cls.size} bytes, got {len(value)}")
        return super().__new__(cls, value)

    @classmethod
    def from_hex(cls, text: str):
        return cls(bytes.fromhex(text))

    def __repr__(self):
        return f"{type(self).__name__}({self.hex()})"


class Digest(_FixedBytes):
    size = SUITE.digest_size


class Nonce(_FixedBytes):
    size = SUITE.nonce_size


class SymmetricKey(_FixedBytes):
    size = SUITE.key_size

    def __repr__(self):
        return "SymmetricKey(<redacted>)"


class PreSharedKey(bytes):
    def __new__(cls, value):
        value = bytes(value)
        if len(value) < SUITE.min_psk_size:
            raise ValueError(f"pre-shared key must be at least {SUITE.min_psk_size} bytes")
        return super().__new__(cls, value)

    def __repr__(self):
        return "PreSharedKey(<redacted>)"


def random_bytes(k: int, rng=None) -> bytes:
    """k random bytes from ``rng`` (anything with ``.bytes(k)``) or the OS CSPRNG."""
    if rng is None:
        return secrets.token_bytes(k)
    return bytes(rng.bytes(k))


def new_nonce(rng=None) -> Nonce:
    return Nonce(random_bytes(SUITE.nonce_size, rng))


def hash(data: bytes) -> Digest:  # noqa: A001 - mirrors the protocol's H()
    return Digest(hashlib.sha256(data).digest())


def derive_key(s1: Nonce, s2: Nonce) -> SymmetricKey:
    """Session key from the consumer and operator nonces: H(s1 || s2)."""
    for name, nonce in (("s1", s1), ("s2", s2)):
        if len(nonce) != SUITE.nonce_size:
            raise ValueError(f"{name} must be {SUITE.nonce_size} bytes, got {len(nonce)}")
    return SymmetricKey(hash(bytes(s1) + bytes(s2)))


@dataclass(frozen=True)
class Ciphertext:
    iv: bytes
    tag: bytes
    body: bytes

    def to_bytes(self) -> bytes:
        """Canonical wire form: iv || tag || body."""
        return self.iv + self.tag + self.body

    @classmethod
    def from_bytes(cls, data: bytes) -> "Ciphertext":
        head = SUITE.iv_size + SUITE.tag_size
        if len(data) < head:
            raise MalformedCiphertextError(f"ciphertext of {len(data)} bytes is shorter than {head}")
        return cls(
            iv=bytes(data[:SUITE.iv_size]),
            tag=bytes(data[SUITE.iv_size:head]),
            body=bytes(data[head:]),
        )


def encrypt(sk: SymmetricKey, plaintext: bytes, rng=None) -> Ciphertext:
    iv = random_bytes(SUITE.iv_size, rng)
    sealed = AESGCM(bytes(sk)).encrypt(iv, bytes(plaintext), None)
    return Ciphertext(iv=iv, tag=sealed[-SUITE.tag_size:], body=sealed[:-SUITE.tag_size])


def decrypt(sk: SymmetricKey, c: Ciphertext) -> bytes:
    if len(c.iv) != SUITE.iv_size or len(c.tag) != SUITE.tag_size:
        raise MalformedCiphertextError("iv or tag has the wrong length")
    if len(sk) != SUITE.key_size:
        raise MalformedCiphertextError(f"key must be {SUITE.key_size} bytes")
    try:
        return AESGCM(bytes(sk)).decrypt(c.iv, c.body + c.tag, None)
    except InvalidTag:
        raise AuthenticationError("ciphertext failed authentication") from None


def mac(psk: PreSharedKey, data: bytes) -> Digest:
    return Digest(hmac.new(bytes(psk), bytes(data), hashlib.sha256).digest())


def mac_verify(psk: PreSharedKey, data: bytes, tag: bytes) -> bool:
    return hmac.compare_digest(mac(psk, data), bytes(tag))
