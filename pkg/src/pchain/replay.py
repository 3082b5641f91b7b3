"""Fold a chain into its derived state: certificates, permissions, seen refs.

``ChainState.apply`` verifies a block against everything before it (header
link and signature, plus every entry signature) and then folds it in. A
failure raises ``ChainFault`` carrying the height and reason, and leaves the
state untouched.
"""

import copy
import logging

from .crypto import verify
from .ledger import (
    BAD_SIGNATURE,
    certificate_signed_by,
    verify_block,
)
from .model import (
    Action,
    Certificate,
    PermissionRecord,
    Role,
    Scope,
    entry_digest,
)

logger = logging.getLogger(__name__)

# Reasons beyond the block-level set, used for chain-level findings.
BAD_ENCODING = "bad-encoding"
BAD_ENTRY = "bad-entry"


class ChainFault(Exception):
    def __init__(self, height, reason, message=""):
        super().__init__(message or f"height {height}: {reason}")
        self.height = height
        self.reason = reason


class ChainState:
    def __init__(self):
        self.length = 0
        self.head = None
        self.head_digest = None
        self.uas_cert = None
        self.customer_cert = None
        self.certs = {}
        self.permissions = {}
        self.seen_refs = set()
        self.entry_digests = set()
        self.log = []

    def copy(self):
        other = copy.copy(self)
        other.certs = dict(self.certs)
        other.permissions = {fp: set(s) for fp, s in self.permissions.items()}
        other.seen_refs = set(self.seen_refs)
        other.entry_digests = set(self.entry_digests)
        other.log = list(self.log)
        return other

    @property
    def customer_fingerprint(self):
        return self.customer_cert.fingerprint if self.customer_cert else None

    def allows(self, fingerprint, scope):
        return scope in self.permissions.get(fingerprint, ())

    def permission_set(self):
        return PermissionSet(
            {fp: frozenset(scopes) for fp, scopes in self.permissions.items() if scopes},
            self.length - 1,
            tuple(self.log),
        )

    def applied(self, block, verify_entries=True):
        """Return a new state with ``block`` verified and folded in; ``self`` is unchanged."""
        height = self.length
        if block.header.height != height:
            raise ChainFault(height, "bad-height")
        trial = self.copy()
        trial._apply(block, verify_entries)
        return trial

    def apply(self, block, verify_entries=True):
        """In-place variant of ``applied``."""
        self.__dict__.update(self.applied(block, verify_entries).__dict__)
        return self

    def _apply(self, block, verify_entries):
        height = self.length
        if self.head is None:
            result = verify_block(None, block)
            if not result:
                raise ChainFault(height, result.reason)
            customer, uas, _ = block.entries
            self.customer_cert = customer
            self.uas_cert = uas
            self.certs[customer.fingerprint] = customer
            self.certs[uas.fingerprint] = uas
            self._apply_permission(block.entries[2], height)
        else:
            result = verify_block(self.head, block, self.certs)
            if not result:
                raise ChainFault(height, result.reason)
            if not self.allows(block.header.creator_fingerprint, Scope.SUBMIT_TRANSACTIONS):
                raise ChainFault(height, BAD_SIGNATURE, "block creator holds no grant")
            self._apply_entries(block, height, verify_entries)
        for entry in block.entries:
            self.entry_digests.add(entry_digest(entry))
        self.head = block.header
        self.head_digest = block.header.digest()
        self.length = height + 1

    def _apply_entries(self, block, height, verify_entries):
        creator = None
        permitted_before = {fp for fp, s in self.permissions.items() if Scope.SUBMIT_TRANSACTIONS in s}
        txs = []
        for entry in block.entries:
            if isinstance(entry, Certificate):
                if verify_entries and not self._issued_by_uas(entry):
                    raise ChainFault(height, BAD_SIGNATURE, "certificate not issued by the UAS")
                self.certs.setdefault(entry.fingerprint, entry)
            elif isinstance(entry, PermissionRecord):
                if verify_entries and not (
                    entry.issued_by == self.uas_cert.fingerprint
                    and verify(self.uas_cert.public_key, entry.signing_payload(), entry.uas_sig)
                ):
                    raise ChainFault(height, BAD_SIGNATURE, "permission record not signed by the UAS")
                self._apply_permission(entry, height)
            else:
                if creator is None:
                    creator = self.certs.get(block.header.creator_fingerprint)
                if verify_entries:
                    self._check_transaction(entry, creator, height)
                key = (entry.tx.institution_id, entry.tx.external_ref)
                if key in self.seen_refs:
                    raise ChainFault(height, BAD_ENTRY, "duplicate external_ref")
                self.seen_refs.add(key)
                txs.append(entry)
        for stx in txs:
            inst = stx.tx.institution_id
            if inst not in permitted_before or not self.allows(inst, Scope.SUBMIT_TRANSACTIONS):
                raise ChainFault(height, BAD_ENTRY, "transaction from an institution without submit rights")

    def _issued_by_uas(self, cert):
        return cert.issuer_fingerprint == self.uas_cert.fingerprint and certificate_signed_by(
            cert, self.uas_cert.public_key
        )

    def _check_transaction(self, stx, creator, height):
        inst = self.certs.get(stx.tx.institution_id)
        if inst is None or inst.role != Role.INSTITUTION:
            raise ChainFault(height, BAD_ENTRY, "transaction from an unannounced institution")
        payload = stx.tx.encode()
        if not verify(inst.public_key, payload, stx.institution_sig):
            raise ChainFault(height, BAD_SIGNATURE, "institution signature")
        if not verify(self.customer_cert.public_key, payload, stx.customer_sig):
            raise ChainFault(height, BAD_SIGNATURE, "customer signature")
        if creator is None or not verify(creator.public_key, stx.countersign_payload(), stx.bcs_sig):
            raise ChainFault(height, BAD_SIGNATURE, "BCS countersignature")

    def _apply_permission(self, record, height):
        fp = record.subject_fingerprint
        if record.action == Action.GRANT:
            self.permissions.setdefault(fp, set()).add(record.scope)
            return
        if fp not in self.certs and fp not in self.permissions:
            self.log.append(f"height {height}: revoke of unknown fingerprint {fp.short()} ignored")
            return
        scopes = self.permissions.get(fp, set())
        if record.scope not in scopes:
            self.log.append(f"height {height}: revoke of ungranted {record.scope.label} for {fp.short()}")
        scopes.discard(record.scope)


class PermissionSet:
    """Effective scopes per certificate fingerprint as of ``height``."""

    def __init__(self, grants, height, log=()):
        self.grants = dict(grants)
        self.height = height
        self.log = tuple(log)

    def allows(self, fingerprint, scope):
        return scope in self.grants.get(fingerprint, ())

    def as_labels(self):
        return {fp.hex(): sorted(s.label for s in scopes) for fp, scopes in self.grants.items()}

    def __eq__(self, other):
        return isinstance(other, PermissionSet) and (self.grants, self.height) == (other.grants, other.height)

    def __repr__(self):
        return f"PermissionSet(height={self.height}, grants={self.as_labels()})"


def replay(blocks, verify_entries=True):
    """Fold an iterable of blocks from genesis; raises ChainFault on the first bad block."""
    state = ChainState()
    for block in blocks:
        state.apply(block, verify_entries)
    return state
