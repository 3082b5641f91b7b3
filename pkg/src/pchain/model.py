"""Chain data types and their canonical byte encoding.

All types are frozen dataclasses. ``encode()`` gives the canonical bytes;
``Type.decode(data)`` is its exact inverse and rejects anything that is not
a canonical encoding (bad tag, overrun, trailing bytes, unknown enum value).
Signed types expose ``signing_payload()``: the canonical encoding of every
field that precedes the signature.
"""

import enum
from dataclasses import dataclass, field
from functools import cached_property

from .crypto import (
    DIGEST_SIZE,
    PUBLIC_KEY_SIZE,
    SIGNATURE_SIZE,
    Digest,
    chain_digest,
)
from .encoding import Reader, Writer
from .errors import DecodeError

TAG_TRANSACTION = 0x10
TAG_SIGNED_TRANSACTION = 0x11
TAG_PERMISSION = 0x20
TAG_CERTIFICATE = 0x30
TAG_HEADER = 0x40
TAG_BLOCK = 0x41

MAX_DESCRIPTION_BYTES = 512
EMPTY_SIGNATURE = bytes(SIGNATURE_SIZE)


class _Labelled(enum.IntEnum):
    @property
    def label(self):
        return self.name.lower().replace("_", "-")

    @classmethod
    def from_label(cls, text):
        for member in cls:
            if member.label == text:
                return member
        raise ValueError(f"unknown {cls.__name__.lower()}: {text!r}")

    @classmethod
    def read(cls, reader):
        raw = reader.u8()
        try:
            return cls(raw)
        except ValueError:
            raise DecodeError(f"bad {cls.__name__} value", value=raw) from None


class Role(_Labelled):
    CUSTOMER = 1
    INSTITUTION = 2
    BCS = 3
    UAS = 4
    REPORTING = 5


class Action(_Labelled):
    GRANT = 1
    REVOKE = 2


class Scope(_Labelled):
    SUBMIT_TRANSACTIONS = 1
    READ_CHAIN = 2


def _decode(cls, data):
    reader = Reader(data)
    try:
        value = cls.read(reader)
    except (ValueError, TypeError) as exc:
        raise DecodeError(f"invalid {cls.__name__}: {exc}") from exc
    reader.finish()
    return value


def _check_currency(code):
    if len(code) != 3 or not all("A" <= c <= "Z" for c in code):
        raise ValueError(f"currency must be 3 uppercase ASCII letters, got {code!r}")


@dataclass(frozen=True)
class FinancialTransaction:
    institution_id: Digest
    account_id: str
    amount: int
    currency: str
    occurred_at: int
    description: str
    external_ref: str

    def __post_init__(self):
        object.__setattr__(self, "institution_id", Digest(self.institution_id))
        _check_currency(self.currency)
        if len(self.description.encode("utf-8")) > MAX_DESCRIPTION_BYTES:
            raise ValueError("description longer than 512 bytes")

    def write(self, w):
        w.u8(TAG_TRANSACTION)
        w.fixed(self.institution_id, DIGEST_SIZE)
        w.text(self.account_id)
        w.i64(self.amount)
        w.fixed(self.currency.encode("ascii"), 3)
        w.u64(self.occurred_at)
        w.text(self.description)
        w.text(self.external_ref)

    def encode(self):
        w = Writer()
        self.write(w)
        return w.getvalue()

    @classmethod
    def read(cls, r):
        r.expect_tag(TAG_TRANSACTION)
        institution_id = Digest(r.fixed(DIGEST_SIZE))
        account_id = r.text()
        amount = r.i64()
        try:
            currency = r.fixed(3).decode("ascii")
        except UnicodeDecodeError:
            raise DecodeError("currency is not ASCII") from None
        return cls(
            institution_id=institution_id,
            account_id=account_id,
            amount=amount,
            currency=currency,
            occurred_at=r.u64(),
            description=r.text(),
            external_ref=r.text(),
        )

    @classmethod
    def decode(cls, data):
        return _decode(cls, data)


@dataclass(frozen=True)
class SignedTransaction:
    tx: FinancialTransaction
    institution_sig: bytes
    customer_sig: bytes
    bcs_timestamp: int
    bcs_sig: bytes = EMPTY_SIGNATURE

    def countersign_payload(self):
        w = Writer()
        self.tx.write(w)
        w.fixed(self.institution_sig, SIGNATURE_SIZE)
        w.fixed(self.customer_sig, SIGNATURE_SIZE)
        w.u64(self.bcs_timestamp)
        return w.getvalue()

    def write(self, w):
        w.u8(TAG_SIGNED_TRANSACTION)
        w.raw(self.countersign_payload())
        w.fixed(self.bcs_sig, SIGNATURE_SIZE)

    def encode(self):
        w = Writer()
        self.write(w)
        return w.getvalue()

    @classmethod
    def read(cls, r):
        r.expect_tag(TAG_SIGNED_TRANSACTION)
        return cls(
            tx=FinancialTransaction.read(r),
            institution_sig=r.fixed(SIGNATURE_SIZE),
            customer_sig=r.fixed(SIGNATURE_SIZE),
            bcs_timestamp=r.u64(),
            bcs_sig=r.fixed(SIGNATURE_SIZE),
        )

    @classmethod
    def decode(cls, data):
        return _decode(cls, data)


@dataclass(frozen=True)
class PermissionRecord:
    subject_fingerprint: Digest
    action: Action
    scope: Scope
    issued_by: Digest
    issued_at: int
    uas_sig: bytes = EMPTY_SIGNATURE

    def __post_init__(self):
        object.__setattr__(self, "subject_fingerprint", Digest(self.subject_fingerprint))
        object.__setattr__(self, "issued_by", Digest(self.issued_by))
        object.__setattr__(self, "action", Action(self.action))
        object.__setattr__(self, "scope", Scope(self.scope))

    def signing_payload(self):
        w = Writer()
        w.u8(TAG_PERMISSION)
        w.fixed(self.subject_fingerprint, DIGEST_SIZE)
        w.u8(self.action)
        w.u8(self.scope)
        w.fixed(self.issued_by, DIGEST_SIZE)
        w.u64(self.issued_at)
        return w.getvalue()

    def write(self, w):
        w.raw(self.signing_payload())
        w.fixed(self.uas_sig, SIGNATURE_SIZE)

    def encode(self):
        w = Writer()
        self.write(w)
        return w.getvalue()

    @classmethod
    def read(cls, r):
        r.expect_tag(TAG_PERMISSION)
        return cls(
            subject_fingerprint=Digest(r.fixed(DIGEST_SIZE)),
            action=Action.read(r),
            scope=Scope.read(r),
            issued_by=Digest(r.fixed(DIGEST_SIZE)),
            issued_at=r.u64(),
            uas_sig=r.fixed(SIGNATURE_SIZE),
        )

    @classmethod
    def decode(cls, data):
        return _decode(cls, data)


@dataclass(frozen=True)
class Certificate:
    subject_id: str
    role: Role
    public_key: bytes
    aux: dict = field(default_factory=dict)
    issued_at: int = 0
    expires_at: int = 1
    issuer_fingerprint: Digest = Digest(bytes(DIGEST_SIZE))
    issuer_sig: bytes = EMPTY_SIGNATURE

    def __post_init__(self):
        object.__setattr__(self, "role", Role(self.role))
        object.__setattr__(self, "issuer_fingerprint", Digest(self.issuer_fingerprint))
        object.__setattr__(self, "aux", dict(self.aux))
        if len(self.public_key) != PUBLIC_KEY_SIZE:
            raise ValueError("public key has the wrong length")
        if self.expires_at <= self.issued_at:
            raise ValueError("expires_at must be later than issued_at")

    def __hash__(self):
        return hash(self.encode())

    def signing_payload(self):
        w = Writer()
        w.u8(TAG_CERTIFICATE)
        w.text(self.subject_id)
        w.u8(self.role)
        w.fixed(self.public_key, PUBLIC_KEY_SIZE)
        w.str_map(self.aux)
        w.u64(self.issued_at)
        w.u64(self.expires_at)
        w.fixed(self.issuer_fingerprint, DIGEST_SIZE)
        return w.getvalue()

    @cached_property
    def fingerprint(self):
        return chain_digest(self.signing_payload())

    def valid_at(self, now):
        return self.issued_at <= now < self.expires_at

    def write(self, w):
        w.raw(self.signing_payload())
        w.fixed(self.issuer_sig, SIGNATURE_SIZE)

    def encode(self):
        w = Writer()
        self.write(w)
        return w.getvalue()

    @classmethod
    def read(cls, r):
        r.expect_tag(TAG_CERTIFICATE)
        return cls(
            subject_id=r.text(),
            role=Role.read(r),
            public_key=r.fixed(PUBLIC_KEY_SIZE),
            aux=r.str_map(),
            issued_at=r.u64(),
            expires_at=r.u64(),
            issuer_fingerprint=Digest(r.fixed(DIGEST_SIZE)),
            issuer_sig=r.fixed(SIGNATURE_SIZE),
        )

    @classmethod
    def decode(cls, data):
        return _decode(cls, data)


_ENTRY_TYPES = {
    TAG_SIGNED_TRANSACTION: SignedTransaction,
    TAG_PERMISSION: PermissionRecord,
    TAG_CERTIFICATE: Certificate,
}
ENTRY_CLASSES = tuple(_ENTRY_TYPES.values())


def read_entry(r):
    """Read one BlockEntry; the leading type tag selects the variant."""
    tag = r.peek_u8()
    cls = _ENTRY_TYPES.get(tag)
    if cls is None:
        raise DecodeError("bad entry tag", tag=tag)
    return cls.read(r)


def encode_entry(entry):
    if not isinstance(entry, ENTRY_CLASSES):
        raise TypeError(f"not a block entry: {type(entry).__name__}")
    return entry.encode()


def decode_entry(data):
    reader = Reader(data)
    try:
        entry = read_entry(reader)
    except (ValueError, TypeError) as exc:
        raise DecodeError(f"invalid entry: {exc}") from exc
    reader.finish()
    return entry


def encode_entries(entries):
    w = Writer()
    w.u32(len(entries))
    for entry in entries:
        w.raw(encode_entry(entry))
    return w.getvalue()


def entry_digest(entry):
    return chain_digest(encode_entry(entry))


@dataclass(frozen=True)
class BlockHeader:
    height: int
    prev_header_digest: Digest
    data_digest: Digest
    created_at: int
    creator_fingerprint: Digest
    creator_sig: bytes = EMPTY_SIGNATURE

    def __post_init__(self):
        for name in ("prev_header_digest", "data_digest", "creator_fingerprint"):
            object.__setattr__(self, name, Digest(getattr(self, name)))

    def signing_payload(self):
        w = Writer()
        w.u8(TAG_HEADER)
        w.u64(self.height)
        w.fixed(self.prev_header_digest, DIGEST_SIZE)
        w.fixed(self.data_digest, DIGEST_SIZE)
        w.u64(self.created_at)
        w.fixed(self.creator_fingerprint, DIGEST_SIZE)
        return w.getvalue()

    def write(self, w):
        w.raw(self.signing_payload())
        w.fixed(self.creator_sig, SIGNATURE_SIZE)

    def encode(self):
        w = Writer()
        self.write(w)
        return w.getvalue()

    def digest(self):
        return chain_digest(self.encode())

    @classmethod
    def read(cls, r):
        r.expect_tag(TAG_HEADER)
        return cls(
            height=r.u64(),
            prev_header_digest=Digest(r.fixed(DIGEST_SIZE)),
            data_digest=Digest(r.fixed(DIGEST_SIZE)),
            created_at=r.u64(),
            creator_fingerprint=Digest(r.fixed(DIGEST_SIZE)),
            creator_sig=r.fixed(SIGNATURE_SIZE),
        )

    @classmethod
    def decode(cls, data):
        return _decode(cls, data)


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    entries: tuple

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))

    @property
    def height(self):
        return self.header.height

    def transactions(self):
        return [e for e in self.entries if isinstance(e, SignedTransaction)]

    def write(self, w):
        w.u8(TAG_BLOCK)
        self.header.write(w)
        w.raw(encode_entries(self.entries))

    def encode(self):
        w = Writer()
        self.write(w)
        return w.getvalue()

    @classmethod
    def read(cls, r):
        r.expect_tag(TAG_BLOCK)
        header = BlockHeader.read(r)
        count = r.u32()
        if count > r.remaining:
            raise DecodeError("entry count overruns input", count=count)
        return cls(header=header, entries=tuple(read_entry(r) for _ in range(count)))

    @classmethod
    def decode(cls, data):
        return _decode(cls, data)


def canonical_encode(value):
    if isinstance(value, (list, tuple)):
        return encode_entries(value)
    return value.encode()


def canonical_decode(cls, data):
    return cls.decode(data)
