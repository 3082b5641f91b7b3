"""User Account Service: certificate authority and on-chain permission writer.

The UAS keeps no database. Its state is its keypair and certificate; every
permission it has ever written lives on the customers' chains and is
recovered by replaying them.
"""

import logging
from dataclasses import replace

from .crypto import ZERO_DIGEST, Digest
from .errors import BrokenChain, ClockSkew, DecodeError, InvalidCertificate, InvalidValidity
from .ledger import certificate_signed_by, make_genesis, sign_certificate
from .model import Action, Block, Certificate, PermissionRecord, Role, Scope
from .replay import ChainFault, ChainState

logger = logging.getLogger(__name__)

YEAR = 365 * 86400
DEFAULT_VALIDITY = 10 * YEAR


def effective_permissions(blocks, height=None):
    """Replay ``blocks`` (from genesis) and return the PermissionSet at ``height``.

    Blocks may be ``Block`` objects or their canonical bytes. Raises
    BrokenChain at the first block that fails verification.
    """
    state = ChainState()
    for h, block in enumerate(blocks):
        if height is not None and h > height:
            break
        try:
            if isinstance(block, (bytes, bytearray)):
                block = Block.decode(block)
            state.apply(block)
        except DecodeError as exc:
            raise BrokenChain(f"block {h} does not decode", height=h, reason="bad-encoding") from exc
        except ChainFault as exc:
            raise BrokenChain(f"block {h}: {exc}", height=exc.height, reason=exc.reason) from exc
    return state.permission_set()


class UserAccountService:
    def __init__(self, keypair, certificate, gateway=None):
        if certificate.role != Role.UAS or certificate.public_key != keypair.public_key:
            raise InvalidCertificate("UAS certificate does not match its key")
        self.keypair = keypair
        self.certificate = certificate
        self.gateway = gateway

    @classmethod
    def bootstrap(cls, keypair, now, name="UAS", validity=DEFAULT_VALIDITY, gateway=None):
        """Create a UAS with a fresh self-signed certificate."""
        cert = Certificate(
            subject_id=name,
            role=Role.UAS,
            public_key=keypair.public_key,
            issued_at=now,
            expires_at=now + validity,
        )
        return cls(keypair, sign_certificate(cert, keypair, ZERO_DIGEST), gateway)

    @property
    def fingerprint(self):
        return self.certificate.fingerprint

    def issue_certificate(self, subject_id, role, public_key, validity, now, aux=None):
        if validity <= 0:
            raise InvalidValidity("validity window must be non-empty", validity=validity)
        if now < self.certificate.issued_at:
            raise ClockSkew("clock is earlier than the UAS certificate", now=now)
        cert = Certificate(
            subject_id=subject_id,
            role=Role(role),
            public_key=bytes(public_key),
            aux=aux or {},
            issued_at=now,
            expires_at=now + validity,
        )
        return sign_certificate(cert, self.keypair, self.fingerprint)

    def issue_institution_certificate(self, name, public_key, api_token_ref, validity, now):
        aux = {"api_token_ref": api_token_ref} if api_token_ref else {}
        return self.issue_certificate(name, Role.INSTITUTION, public_key, validity, now, aux)

    def issued(self, cert):
        return cert.issuer_fingerprint == self.fingerprint and certificate_signed_by(
            cert, self.keypair.public_key
        )

    def sign_record(self, subject_fingerprint, action, scope, now):
        record = PermissionRecord(
            subject_fingerprint=Digest(subject_fingerprint),
            action=action,
            scope=scope,
            issued_by=self.fingerprint,
            issued_at=now,
        )
        return replace(record, uas_sig=self.keypair.sign(record.signing_payload()))

    def init_customer(self, display_name, customer_key, bcs_cert, now, validity=DEFAULT_VALIDITY):
        """Issue the customer's root certificate and the genesis block of their chain."""
        if now < self.certificate.issued_at:
            raise ClockSkew("clock is earlier than the UAS certificate", now=now)
        if bcs_cert.role != Role.BCS:
            raise InvalidCertificate("block creator certificate has the wrong role")
        if not bcs_cert.valid_at(now):
            raise InvalidCertificate("block creator certificate is not valid now", now=now)
        if not self.issued(bcs_cert):
            raise InvalidCertificate("block creator certificate was not issued by this UAS")
        public_key = getattr(customer_key, "public_key", customer_key)
        customer_cert = self.issue_certificate(display_name, Role.CUSTOMER, public_key, validity, now)
        grant = self.sign_record(bcs_cert.fingerprint, Action.GRANT, Scope.SUBMIT_TRANSACTIONS, now)
        genesis = make_genesis(customer_cert, self.certificate, grant, self.keypair, now)
        return customer_cert, genesis

    def _chain_state(self, chain_id):
        state = ChainState()
        for h in range(self.gateway.length(chain_id)):
            try:
                state.apply(Block.decode(self.gateway.read_bytes(chain_id, h)))
            except DecodeError as exc:
                raise BrokenChain(f"block {h} does not decode", height=h, reason="bad-encoding") from exc
            except ChainFault as exc:
                raise BrokenChain(str(exc), height=exc.height, reason=exc.reason) from exc
        return state

    def grant(self, chain_id, institution_cert, scope, now):
        """Announce ``institution_cert`` on the chain and grant it ``scope``.

        Both entries go through the BCMS to the block creator and land in the
        next sealed block.
        """
        if not self.issued(institution_cert):
            raise InvalidCertificate("certificate was not issued by this UAS")
        record = self.sign_record(institution_cert.fingerprint, Action.GRANT, Scope(scope), now)
        self.gateway.submit_entry(chain_id, institution_cert, now=now)
        self.gateway.submit_entry(chain_id, record, now=now)
        return record

    def revoke(self, chain_id, fingerprint, scope, now):
        record, _ = self.revoke_flagged(chain_id, fingerprint, scope, now)
        return record

    def revoke_flagged(self, chain_id, fingerprint, scope, now):
        """Revoke and report whether the fingerprint was unknown to the chain.

        An unknown fingerprint is still recorded on-chain; replay treats the
        record as a flagged no-op.
        """
        fingerprint = Digest(fingerprint)
        state = self._chain_state(chain_id)
        unknown = fingerprint not in state.certs and fingerprint not in state.permissions
        if unknown:
            logger.warning("revoking unknown fingerprint %s on chain %s", fingerprint.short(), Digest(chain_id).short())
        record = self.sign_record(fingerprint, Action.REVOKE, Scope(scope), now)
        self.gateway.submit_entry(chain_id, record, now=now)
        return record, unknown

    def permissions(self, chain_id, height=None):
        n = self.gateway.length(chain_id)
        last = n - 1 if height is None else min(height, n - 1)
        return effective_permissions(
            (self.gateway.read_bytes(chain_id, h) for h in range(last + 1)),
        )
