"""Block construction and block-level verification."""

from dataclasses import dataclass, replace

from .crypto import ZERO_DIGEST, chain_digest, verify
from .errors import (
    EmptyEntries,
    InvalidCertificate,
    NonMonotonicTimestamps,
    SignatureMismatch,
    WrongCreatorRole,
)
from .model import (
    EMPTY_SIGNATURE,
    Action,
    Block,
    BlockHeader,
    Certificate,
    PermissionRecord,
    Role,
    Scope,
    SignedTransaction,
    encode_entries,
)

BAD_LINK = "bad-link"
BAD_DATA_DIGEST = "bad-data-digest"
BAD_SIGNATURE = "bad-signature"
BAD_HEIGHT = "bad-height"
BAD_ORDER = "bad-order"
FAILURE_REASONS = (BAD_LINK, BAD_DATA_DIGEST, BAD_SIGNATURE, BAD_HEIGHT, BAD_ORDER)


@dataclass(frozen=True)
class VerifyResult:
    ok: bool
    reason: str = None

    def __bool__(self):
        return self.ok

    def __str__(self):
        return "ok" if self.ok else f"fail({self.reason})"


OK = VerifyResult(True)


def _fail(reason):
    return VerifyResult(False, reason)


def sign_certificate(cert, issuer_keypair, issuer_fingerprint):
    """Return ``cert`` with its issuer fields set and signed."""
    unsigned = replace(cert, issuer_fingerprint=issuer_fingerprint, issuer_sig=EMPTY_SIGNATURE)
    return replace(unsigned, issuer_sig=issuer_keypair.sign(unsigned.signing_payload()))


def certificate_signed_by(cert, issuer_public_key):
    return verify(issuer_public_key, cert.signing_payload(), cert.issuer_sig)


def is_self_signed(cert):
    return cert.issuer_fingerprint == ZERO_DIGEST and certificate_signed_by(cert, cert.public_key)


def data_digest(entries):
    return chain_digest(encode_entries(entries))


def _sign_header(height, prev_digest, entries, now, keypair, creator_fingerprint):
    unsigned = BlockHeader(
        height=height,
        prev_header_digest=prev_digest,
        data_digest=data_digest(entries),
        created_at=now,
        creator_fingerprint=creator_fingerprint,
    )
    return replace(unsigned, creator_sig=keypair.sign(unsigned.signing_payload()))


def make_genesis(customer_cert, uas_cert, bcs_grant, uas_keypair, now):
    """Build the height-0 block: customer root cert, UAS cert, BCS grant."""
    if uas_cert.role != Role.UAS or uas_cert.public_key != uas_keypair.public_key:
        raise InvalidCertificate("UAS certificate does not match the signing key")
    if not is_self_signed(uas_cert):
        raise SignatureMismatch("UAS certificate is not self-signed")
    if customer_cert.role != Role.CUSTOMER:
        raise InvalidCertificate("customer certificate has the wrong role")
    if customer_cert.issuer_fingerprint != uas_cert.fingerprint or not certificate_signed_by(
        customer_cert, uas_keypair.public_key
    ):
        raise SignatureMismatch("customer certificate was not issued by this UAS")
    for cert in (customer_cert, uas_cert):
        if not cert.valid_at(now):
            raise InvalidCertificate(f"{cert.role.label} certificate not valid at {now}")
    if (bcs_grant.action, bcs_grant.scope) != (Action.GRANT, Scope.SUBMIT_TRANSACTIONS):
        raise InvalidCertificate("genesis grant must give submit-transactions")
    if bcs_grant.issued_by != uas_cert.fingerprint or not verify(
        uas_keypair.public_key, bcs_grant.signing_payload(), bcs_grant.uas_sig
    ):
        raise SignatureMismatch("BCS grant is not signed by the UAS key")
    entries = (customer_cert, uas_cert, bcs_grant)
    header = _sign_header(0, ZERO_DIGEST, entries, now, uas_keypair, uas_cert.fingerprint)
    return Block(header=header, entries=entries)


def _timestamps_ordered(entries):
    last = None
    for entry in entries:
        if isinstance(entry, SignedTransaction):
            if last is not None and entry.bcs_timestamp < last:
                return False
            last = entry.bcs_timestamp
    return True


def seal_block(prev_header, entries, creator_keypair, creator_cert, now):
    entries = tuple(entries)
    if not entries:
        raise EmptyEntries("a block needs at least one entry")
    if creator_cert.role != Role.BCS:
        raise WrongCreatorRole(f"creator role is {creator_cert.role.label}, expected bcs")
    if creator_cert.public_key != creator_keypair.public_key:
        raise SignatureMismatch("creator key does not match its certificate")
    if not _timestamps_ordered(entries):
        raise NonMonotonicTimestamps("transaction timestamps decrease within the block")
    if now < prev_header.created_at:
        raise NonMonotonicTimestamps("block would predate its predecessor")
    header = _sign_header(
        prev_header.height + 1,
        prev_header.digest(),
        entries,
        now,
        creator_keypair,
        creator_cert.fingerprint,
    )
    return Block(header=header, entries=entries)


def _genesis_structure(block):
    entries = block.entries
    if len(entries) != 3:
        return None
    customer, uas, grant = entries
    if not (
        isinstance(customer, Certificate)
        and isinstance(uas, Certificate)
        and isinstance(grant, PermissionRecord)
    ):
        return None
    if customer.role != Role.CUSTOMER or uas.role != Role.UAS:
        return None
    if (grant.action, grant.scope) != (Action.GRANT, Scope.SUBMIT_TRANSACTIONS):
        return None
    return customer, uas, grant


def _verify_genesis(block, uas_fingerprint):
    header = block.header
    if header.height != 0:
        return _fail(BAD_HEIGHT)
    parts = _genesis_structure(block)
    if header.prev_header_digest != ZERO_DIGEST or parts is None:
        return _fail(BAD_LINK)
    if header.data_digest != data_digest(block.entries):
        return _fail(BAD_DATA_DIGEST)
    customer, uas, grant = parts
    if uas_fingerprint is not None and uas.fingerprint != uas_fingerprint:
        return _fail(BAD_SIGNATURE)
    if (
        not is_self_signed(uas)
        or customer.issuer_fingerprint != uas.fingerprint
        or not certificate_signed_by(customer, uas.public_key)
        or grant.issued_by != uas.fingerprint
        or not verify(uas.public_key, grant.signing_payload(), grant.uas_sig)
        or header.creator_fingerprint != uas.fingerprint
        or not verify(uas.public_key, header.signing_payload(), header.creator_sig)
    ):
        return _fail(BAD_SIGNATURE)
    return OK


def check_link(prev_header, block):
    """Structural checks only: height, link, data digest, ordering."""
    header = block.header
    if header.height != prev_header.height + 1:
        return _fail(BAD_HEIGHT)
    if header.prev_header_digest != prev_header.digest():
        return _fail(BAD_LINK)
    if not block.entries or header.data_digest != data_digest(block.entries):
        return _fail(BAD_DATA_DIGEST)
    if header.created_at < prev_header.created_at or not _timestamps_ordered(block.entries):
        return _fail(BAD_ORDER)
    return OK


def resolve_creator(block, certs=None):
    """Find the creator's certificate in ``certs`` or among the block's own announcements."""
    fp = block.header.creator_fingerprint
    if certs and fp in certs:
        return certs[fp]
    for entry in block.entries:
        if isinstance(entry, Certificate) and entry.fingerprint == fp:
            return entry
    return None


def verify_block(prev_header, block, certs=None, uas_fingerprint=None):
    """Check ``block`` against its predecessor, or the genesis rule when ``prev_header`` is None.

    ``certs`` maps fingerprints to known certificates and is used to resolve
    the creator's public key; a creator certificate announced inside the block
    itself is also accepted. Returns the first failing check, in the order
    height, link, data digest, signature, ordering.
    """
    if prev_header is None:
        return _verify_genesis(block, uas_fingerprint)
    header = block.header
    if header.height != prev_header.height + 1:
        return _fail(BAD_HEIGHT)
    if header.prev_header_digest != prev_header.digest():
        return _fail(BAD_LINK)
    if not block.entries or header.data_digest != data_digest(block.entries):
        return _fail(BAD_DATA_DIGEST)
    creator = resolve_creator(block, certs)
    if (
        creator is None
        or creator.role != Role.BCS
        or not verify(creator.public_key, header.signing_payload(), header.creator_sig)
    ):
        return _fail(BAD_SIGNATURE)
    if header.created_at < prev_header.created_at or not _timestamps_ordered(block.entries):
        return _fail(BAD_ORDER)
    return OK
