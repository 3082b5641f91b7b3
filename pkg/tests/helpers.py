"""A small in-process world for tests: one UAS, one BCS, one gateway, one customer."""

import random

from pchain.bcs import BlockCreationService, MaxCount
from pchain.crypto import KeyPair, verify
from pchain.gateway import ChainRegistration, Gateway
from pchain.model import Certificate, FinancialTransaction, PermissionRecord, Role, Scope, SignedTransaction
from pchain.reporting import ReportingService
from pchain.uas import UserAccountService

T0 = 1_704_067_200  # 2024-01-01T00:00:00Z
YEAR = 365 * 86400


class World:
    def __init__(self, backend="mem:", policy=None, journal_dir=None, label="w", gateway=None, t0=T0):
        self.t0 = t0
        self.now = t0
        self.label = label
        self.gateway = gateway or Gateway(durable=False)
        self.uas = UserAccountService.bootstrap(KeyPair.derive(f"{label}:uas"), t0, gateway=self.gateway)
        self.bcs_key = KeyPair.derive(f"{label}:bcs")
        self.bcs_cert = self.uas.issue_certificate("bcs", Role.BCS, self.bcs_key.public_key, 10 * YEAR, t0)
        self.bcs = BlockCreationService(
            self.bcs_key, self.bcs_cert, self.gateway, policy or MaxCount(10_000), journal_dir
        )
        self.gateway.connect_bcs(self.bcs_cert.fingerprint, self.bcs)
        self.customer = KeyPair.derive(f"{label}:customer")
        self.customer_cert, genesis = self.uas.init_customer("alice", self.customer, self.bcs_cert, t0)
        reg = ChainRegistration(self.customer_cert.fingerprint, backend, self.bcs_cert.fingerprint)
        self.chain = self.gateway.register_chain(reg, genesis)
        self.reporting = ReportingService(self.gateway, clock=lambda: self.now)
        self.institutions = {}  # name -> (keypair, cert)

    # ---------------------------------------------------------- set-up

    def institution(self, name, grant=True, flush=True):
        key = KeyPair.derive(f"{self.label}:inst:{name}")
        cert = self.uas.issue_institution_certificate(name, key.public_key, f"ref:{name}", 10 * YEAR, self.now)
        self.institutions[name] = (key, cert)
        if grant:
            self.uas.grant(self.chain, cert, Scope.SUBMIT_TRANSACTIONS, self.now)
            if flush:
                self.flush()
        return cert

    def revoke(self, name, flush=True):
        self.uas.revoke(self.chain, self.fp(name), Scope.SUBMIT_TRANSACTIONS, self.now)
        if flush:
            self.flush()

    def fp(self, name):
        return self.institutions[name][1].fingerprint

    # ---------------------------------------------------- transactions

    def tx(self, name, ref, amount=100, currency="USD", occurred_at=None, description="test"):
        return FinancialTransaction(
            institution_id=self.fp(name),
            account_id=f"acct-{name}",
            amount=amount,
            currency=currency,
            occurred_at=self.now if occurred_at is None else occurred_at,
            description=description,
            external_ref=ref,
        )

    def sigs(self, name, tx):
        payload = tx.encode()
        return self.institutions[name][0].sign(payload), self.customer.sign(payload)

    def submit(self, name, tx, now=None):
        inst_sig, cust_sig = self.sigs(name, tx)
        return self.gateway.submit_transaction(self.chain, tx, inst_sig, cust_sig, now=self.now if now is None else now)

    def submit_many(self, name, count, prefix="r", rng=None, step=60):
        receipts = []
        for i in range(count):
            self.now += step
            amount = rng.randint(-50_000, 50_000) if rng else 100 + i
            receipts.append(self.submit(name, self.tx(name, f"{prefix}{i}", amount=amount)))
        return receipts

    def flush(self, now=None):
        return self.bcs.flush_all(self.chain, now=self.now if now is None else now)

    # ------------------------------------------------------------ reads

    def blocks(self):
        return [self.gateway.read(self.chain, h) for h in range(self.gateway.length(self.chain))]

    def raw_blocks(self):
        return [self.gateway.read_bytes(self.chain, h) for h in range(self.gateway.length(self.chain))]

    def head_digest(self):
        return self.gateway.head(self.chain).digest()

    def refs(self):
        return sorted(
            e.tx.external_ref for b in self.blocks() for e in b.entries if isinstance(e, SignedTransaction)
        )


def signature_sweep(blocks):
    """Independent full re-verification of every signature on a chain.

    Returns a list of (height, position, what) failures; empty means clean.
    Certificates are resolved from the chain itself as they are announced.
    """
    failures = []
    certs = {}
    genesis = blocks[0]
    customer, uas = genesis.entries[0], genesis.entries[1]
    for cert in (customer, uas):
        certs[cert.fingerprint] = cert
    for block in blocks:
        for entry in block.entries:
            if isinstance(entry, Certificate):
                certs.setdefault(entry.fingerprint, entry)
        creator = certs.get(block.header.creator_fingerprint)
        if creator is None or not verify(creator.public_key, block.header.signing_payload(), block.header.creator_sig):
            failures.append((block.height, None, "header"))
        for pos, entry in enumerate(block.entries):
            if isinstance(entry, Certificate):
                if not verify(uas.public_key, entry.signing_payload(), entry.issuer_sig):
                    failures.append((block.height, pos, "certificate"))
            elif isinstance(entry, PermissionRecord):
                if not verify(uas.public_key, entry.signing_payload(), entry.uas_sig):
                    failures.append((block.height, pos, "record"))
            else:
                inst = certs.get(entry.tx.institution_id)
                payload = entry.tx.encode()
                if inst is None or not verify(inst.public_key, payload, entry.institution_sig):
                    failures.append((block.height, pos, "institution"))
                if not verify(customer.public_key, payload, entry.customer_sig):
                    failures.append((block.height, pos, "customer"))
                if creator is None or not verify(creator.public_key, entry.countersign_payload(), entry.bcs_sig):
                    failures.append((block.height, pos, "bcs"))
    return failures


def random_world(seed, n_tx, policy=None, backend="mem:", currencies=("USD", "EUR"), n_inst=3):
    """A chain with ``n_tx`` random transactions from ``n_inst`` institutions."""
    rng = random.Random(seed)
    w = World(backend=backend, policy=policy or MaxCount(25), label=f"rw{seed}")
    names = [f"inst{i}" for i in range(n_inst)]
    for name in names:
        w.institution(name)
    words = ["coffee", "rent", "salary", "fuel", "refund", "Dividend", "fee, monthly", 'quote "x"', "line\nbreak"]
    submitted = []
    for i in range(n_tx):
        w.now += rng.randint(600, 3 * 86400)
        name = rng.choice(names)
        tx = w.tx(
            name,
            f"{name}-{i}",
            amount=rng.randint(-200_000, 200_000),
            currency=rng.choice(currencies),
            occurred_at=w.now - rng.randint(0, 3600),
            description=f"{rng.choice(words)} {i}",
        )
        w.submit(name, tx)
        submitted.append(tx)
    w.flush()
    return w, submitted
