"""Hash and signature primitives.

The chain uses exactly one hash function and one signature scheme, named
by the two constants below. Swapping either means editing this module only.
"""

import hashlib
import os

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import (
    Encoding,
    NoEncryption,
    PrivateFormat,
    PublicFormat,
)

HASH_ALGORITHM = "sha256"
SIGNATURE_SCHEME = "ed25519"

DIGEST_SIZE = 32
PUBLIC_KEY_SIZE = 32
SIGNATURE_SIZE = 64
SEED_SIZE = 32


class Digest(bytes):
    """A 32-byte hash value. Compares and hashes like plain bytes."""

    def __new__(cls, value):
        value = bytes(value)
        if len(value) != DIGEST_SIZE:
            raise ValueError(f"digest must be {DIGEST_SIZE} bytes, got {len(value)}")
        return super().__new__(cls, value)

    @classmethod
    def from_hex(cls, text):
        return cls(bytes.fromhex(text))

    def short(self):
        return self.hex()[:12]

    def __repr__(self):
        return f"Digest({self.hex()})"


ZERO_DIGEST = Digest(bytes(DIGEST_SIZE))


def chain_digest(data):
    return Digest(hashlib.new(HASH_ALGORITHM, data).digest())


class KeyPair:
    """A signing key together with its public half."""

    def __init__(self, private_key):
        self._sk = private_key
        self.public_key = private_key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)

    @classmethod
    def generate(cls):
        return cls.from_seed(os.urandom(SEED_SIZE))

    @classmethod
    def from_seed(cls, seed):
        if len(seed) != SEED_SIZE:
            raise ValueError(f"seed must be {SEED_SIZE} bytes")
        return cls(Ed25519PrivateKey.from_private_bytes(bytes(seed)))

    @classmethod
    def derive(cls, label):
        """Deterministic key for simulations and tests. Never use in production."""
        return cls.from_seed(hashlib.sha256(b"pchain-key:" + label.encode("utf-8")).digest())

    @property
    def seed(self):
        return self._sk.private_bytes(Encoding.Raw, PrivateFormat.Raw, NoEncryption())

    def sign(self, message):
        return self._sk.sign(bytes(message))

    def __repr__(self):
        return f"KeyPair(public_key={self.public_key.hex()[:16]}...)"


def verify(public_key, message, signature):
    if len(public_key) != PUBLIC_KEY_SIZE or len(signature) != SIGNATURE_SIZE:
        return False
    try:
        Ed25519PublicKey.from_public_bytes(bytes(public_key)).verify(bytes(signature), bytes(message))
    except (InvalidSignature, ValueError):
        return False
    return True
