"""Block Creation Service.

Validates and countersigns incoming transactions, keeps one pending queue
per customer chain, and seals a block whenever the chain's flush policy
fires. The BCS stores no blocks: it reads the chain through the BCMS to
learn permissions and already-recorded references, and publishes sealed
blocks back through the BCMS.
"""

import base64
import calendar
import logging
import threading
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

from .crypto import Digest, verify
from .errors import (
    BadCustomerSignature,
    BadInstitutionSignature,
    BrokenChain,
    ChainError,
    DecodeError,
    DuplicateExternalRef,
    EmptyQueue,
    InvalidCertificate,
    NotPermitted,
    PublishFailed,
    SignatureMismatch,
    TransportError,
)
from .ledger import certificate_signed_by, seal_block
from .model import (
    Action,
    Block,
    Certificate,
    PermissionRecord,
    Role,
    Scope,
    SignedTransaction,
    decode_entry,
    encode_entry,
    entry_digest,
)
from .replay import ChainFault, ChainState

logger = logging.getLogger(__name__)

PERIODS = ("day", "month", "quarter")


def next_period_start(ts, period):
    """First period boundary strictly after UTC timestamp ``ts``."""
    dt = datetime.fromtimestamp(ts, tz=timezone.utc)
    if period == "day":
        start = datetime(dt.year, dt.month, dt.day, tzinfo=timezone.utc)
        return calendar.timegm(start.timetuple()) + 86400
    if period == "month":
        year, month = (dt.year + 1, 1) if dt.month == 12 else (dt.year, dt.month + 1)
    elif period == "quarter":
        first = ((dt.month - 1) // 3) * 3 + 1 + 3
        year, month = (dt.year + 1, first - 12) if first > 12 else (dt.year, first)
    else:
        raise ValueError(f"unknown period {period!r}")
    return calendar.timegm((year, month, 1, 0, 0, 0))


# ---------------------------------------------------------------- policies


@dataclass(frozen=True)
class MaxCount:
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("MaxCount needs n >= 1")

    def fires(self, queue, now):
        return len(queue) >= self.n

    def limit(self, queue, now):
        return min(self.n, len(queue))


@dataclass(frozen=True)
class MaxBytes:
    b: int

    def __post_init__(self):
        if self.b < 1:
            raise ValueError("MaxBytes needs b >= 1")

    def fires(self, queue, now):
        return queue.size >= self.b

    def limit(self, queue, now):
        total = 0
        for i, item in enumerate(queue.items):
            total += item.size
            if total > self.b:
                # an oversized first entry still goes out, alone
                return max(i, 1)
        return len(queue)


@dataclass(frozen=True)
class PeriodEnd:
    period: str

    def __post_init__(self):
        if self.period not in PERIODS:
            raise ValueError(f"period must be one of {PERIODS}")

    def boundary(self, queue):
        return next_period_start(queue.oldest_stamp, self.period)

    def fires(self, queue, now):
        return len(queue) > 0 and now >= self.boundary(queue)

    def limit(self, queue, now):
        if not self.fires(queue, now):
            return len(queue)
        cut = self.boundary(queue)
        return max(1, sum(1 for item in queue.items if item.stamp < cut))


@dataclass(frozen=True)
class Composite:
    members: tuple

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        if not self.members:
            raise ValueError("Composite needs at least one member")

    def fires(self, queue, now):
        return any(m.fires(queue, now) for m in self.members)

    def limit(self, queue, now):
        return min(m.limit(queue, now) for m in self.members)


DEFAULT_POLICY = Composite((MaxCount(16), MaxBytes(1 << 20)))


def policy_from_config(max_count=None, max_bytes=None, period=None):
    members = []
    if max_count is not None:
        members.append(MaxCount(int(max_count)))
    if max_bytes is not None:
        members.append(MaxBytes(int(max_bytes)))
    if period:
        members.append(PeriodEnd(period))
    if not members:
        return DEFAULT_POLICY
    return members[0] if len(members) == 1 else Composite(tuple(members))


def policy_to_config(policy):
    members = policy.members if isinstance(policy, Composite) else (policy,)
    out = {}
    for m in members:
        if isinstance(m, MaxCount):
            out["max_count"] = m.n
        elif isinstance(m, MaxBytes):
            out["max_bytes"] = m.b
        elif isinstance(m, PeriodEnd):
            out["period"] = m.period
    return out


def should_flush(queue, policy, now):
    return len(queue) > 0 and policy.fires(queue, now)


# ------------------------------------------------------------------- queue


@dataclass
class QueueItem:
    entry: object
    stamp: int
    size: int
    digest: Digest

    @classmethod
    def of(cls, entry, stamp):
        data = encode_entry(entry)
        return cls(entry, stamp, len(data), entry_digest(entry))


@dataclass
class PendingQueue:
    chain_id: Digest
    items: list = field(default_factory=list)
    size: int = 0
    refs: set = field(default_factory=set)

    def __len__(self):
        return len(self.items)

    @property
    def oldest_stamp(self):
        return self.items[0].stamp if self.items else None

    @property
    def last_stamp(self):
        return self.items[-1].stamp if self.items else None

    def digests(self):
        return {item.digest for item in self.items}

    def append(self, item):
        self.items.append(item)
        self.size += item.size
        if isinstance(item.entry, SignedTransaction):
            self.refs.add((item.entry.tx.institution_id, item.entry.tx.external_ref))
        return len(self.items)

    def remove(self, digests):
        digests = set(digests)
        kept = [item for item in self.items if item.digest not in digests]
        self.items = kept
        self.size = sum(item.size for item in kept)
        self.refs = {
            (i.entry.tx.institution_id, i.entry.tx.external_ref)
            for i in kept
            if isinstance(i.entry, SignedTransaction)
        }


@dataclass(frozen=True)
class Receipt:
    accepted: bool
    position: int = None
    sealed: tuple = ()

    def to_dict(self):
        return {"accepted": self.accepted, "position": self.position, "sealed": list(self.sealed)}


def validate_and_enqueue(queue, state, tx, institution_sig, customer_sig, keypair, now):
    """Check a dual-signed transaction against the chain head, countersign it, queue it.

    ``state`` is the ChainState at the head. Returns the 1-based queue position.
    """
    inst = state.certs.get(tx.institution_id)
    if inst is None or inst.role != Role.INSTITUTION:
        raise NotPermitted("institution certificate is not announced on this chain")
    payload = tx.encode()
    if not verify(inst.public_key, payload, institution_sig):
        raise BadInstitutionSignature("institution signature does not verify")
    if not verify(state.customer_cert.public_key, payload, customer_sig):
        raise BadCustomerSignature("customer signature does not verify")
    if not inst.valid_at(now) or not state.allows(tx.institution_id, Scope.SUBMIT_TRANSACTIONS):
        raise NotPermitted("institution may not submit transactions at the chain head")
    key = (tx.institution_id, tx.external_ref)
    if key in state.seen_refs or key in queue.refs:
        raise DuplicateExternalRef(f"external_ref {tx.external_ref!r} already recorded", external_ref=tx.external_ref)
    # stamps never run backwards inside a queue
    stamp = max(now, queue.last_stamp or 0)
    unsigned = SignedTransaction(tx, bytes(institution_sig), bytes(customer_sig), stamp)
    signed = replace(unsigned, bcs_sig=keypair.sign(unsigned.countersign_payload()))
    return queue.append(QueueItem.of(signed, stamp))


def build_block(queue, state, policy, keypair, certificate, now):
    """Seal the next block from the head of ``queue``.

    Returns ``(block, consumed_digests, purged_entries)``; ``block`` is None
    when every selected entry was purged. The queue itself is not modified.
    """
    if not queue:
        raise EmptyQueue("nothing to flush")
    batch = queue.items[: max(1, policy.limit(queue, now))]
    final = {fp: set(s) for fp, s in state.permissions.items()}
    for item in batch:
        entry = item.entry
        if isinstance(entry, PermissionRecord):
            scopes = final.setdefault(entry.subject_fingerprint, set())
            if entry.action == Action.GRANT:
                scopes.add(entry.scope)
            else:
                scopes.discard(entry.scope)
    kept, purged = [], []
    for item in batch:
        entry = item.entry
        if isinstance(entry, SignedTransaction):
            inst = entry.tx.institution_id
            if Scope.SUBMIT_TRANSACTIONS not in final.get(inst, ()) or not state.allows(
                inst, Scope.SUBMIT_TRANSACTIONS
            ):
                purged.append(entry)
                continue
        kept.append(entry)
    for entry in purged:
        logger.info(
            "purged %s from %s: institution revoked before sealing",
            entry.tx.external_ref,
            entry.tx.institution_id.short(),
        )
    consumed = [item.digest for item in batch]
    if not kept:
        return None, consumed, purged
    created_at = max(now, state.head.created_at)
    block = seal_block(state.head, kept, keypair, certificate, created_at)
    return block, consumed, purged


# ----------------------------------------------------------------- journal


class QueueJournal:
    """Append-only log of queue mutations: ``E <entry> <stamp>`` and ``D <digest>``."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def enqueued(self, item):
        line = f"E {base64.b64encode(encode_entry(item.entry)).decode()} {item.stamp}\n"
        self._write(line)

    def dropped(self, digests):
        self._write("".join(f"D {d.hex()}\n" for d in digests))

    def _write(self, text):
        with open(self.path, "a", encoding="ascii") as fh:
            fh.write(text)
            fh.flush()

    def load(self):
        items = {}
        if not self.path.exists():
            return []
        for lineno, line in enumerate(self.path.read_text(encoding="ascii").splitlines(), 1):
            parts = line.split()
            if not parts:
                continue
            try:
                if parts[0] == "E":
                    item = QueueItem.of(decode_entry(base64.b64decode(parts[1])), int(parts[2]))
                    items[item.digest] = item
                elif parts[0] == "D":
                    items.pop(Digest.from_hex(parts[1]), None)
                else:
                    raise ValueError(parts[0])
            except (ValueError, IndexError, DecodeError):
                logger.warning("skipping malformed journal line %d in %s", lineno, self.path)
        return list(items.values())


# ----------------------------------------------------------------- service


class _ChainWork:
    def __init__(self, chain_id):
        self.chain_id = chain_id
        self.queue = PendingQueue(chain_id)
        self.state = ChainState()
        self.pending = None  # (block, consumed digests) sealed but not acknowledged
        self.lock = threading.RLock()
        self.journal = None


class BlockCreationService:
    def __init__(self, keypair, certificate, gateway=None, policy=DEFAULT_POLICY, journal_dir=None, clock=None):
        if certificate.role != Role.BCS or certificate.public_key != keypair.public_key:
            raise InvalidCertificate("BCS certificate does not match its key")
        self.keypair = keypair
        self.certificate = certificate
        self.gateway = gateway
        self.default_policy = policy
        self.policies = {}
        self.journal_dir = Path(journal_dir) if journal_dir else None
        self.clock = clock
        self._chains = {}
        self._lock = threading.Lock()

    @property
    def fingerprint(self):
        return self.certificate.fingerprint

    def _now(self, now):
        if now is not None:
            return int(now)
        if self.clock is None:
            raise ValueError("no clock configured and no time given")
        return int(self.clock())

    def policy_for(self, chain_id):
        return self.policies.get(Digest(chain_id), self.default_policy)

    def set_policy(self, chain_id, policy):
        self.policies[Digest(chain_id)] = policy

    def _work(self, chain_id):
        chain_id = Digest(chain_id)
        with self._lock:
            work = self._chains.get(chain_id)
            if work is None:
                work = _ChainWork(chain_id)
                if self.journal_dir is not None:
                    work.journal = QueueJournal(self.journal_dir / f"{chain_id.hex()}.journal")
                    for item in work.journal.load():
                        work.queue.append(item)
                self._chains[chain_id] = work
            return work

    def _sync(self, work):
        """Catch up with blocks stored since we last looked; drop queued entries already on chain."""
        n = self.gateway.length(work.chain_id)
        while work.state.length < n:
            h = work.state.length
            try:
                block = Block.decode(self.gateway.read_bytes(work.chain_id, h))
                work.state.apply(block)
            except DecodeError as exc:
                raise BrokenChain(f"block {h} does not decode", height=h, reason="bad-encoding") from exc
            except ChainFault as exc:
                raise BrokenChain(str(exc), height=exc.height, reason=exc.reason) from exc
        stale = []
        for item in work.queue.items:
            entry = item.entry
            if item.digest in work.state.entry_digests:
                stale.append(item.digest)
            elif isinstance(entry, SignedTransaction) and (
                entry.tx.institution_id,
                entry.tx.external_ref,
            ) in work.state.seen_refs:
                stale.append(item.digest)
            elif isinstance(entry, Certificate) and entry.fingerprint in work.state.certs:
                stale.append(item.digest)
        if stale:
            logger.info("dropping %d queued entries already on chain %s", len(stale), work.chain_id.short())
            self._drop(work, stale)
        return work.state

    def _drop(self, work, digests):
        work.queue.remove(digests)
        if work.journal:
            work.journal.dropped(digests)

    def _enqueue_item(self, work, item):
        position = work.queue.append(item)
        if work.journal:
            work.journal.enqueued(item)
        return position

    def _announce_self(self, work, now):
        if self.fingerprint in work.state.certs:
            return
        if any(isinstance(i.entry, Certificate) and i.entry.fingerprint == self.fingerprint for i in work.queue.items):
            return
        self._enqueue_item(work, QueueItem.of(self.certificate, max(now, work.queue.last_stamp or 0)))

    def submit(self, chain_id, tx, institution_sig, customer_sig, now=None):
        now = self._now(now)
        work = self._work(chain_id)
        with work.lock:
            state = self._sync(work)
            self._announce_self(work, now)
            tentative = PendingQueue(work.chain_id, list(work.queue.items), work.queue.size, set(work.queue.refs))
            position = validate_and_enqueue(tentative, state, tx, institution_sig, customer_sig, self.keypair, now)
            self._enqueue_item(work, tentative.items[-1])
            return Receipt(True, position, self._auto_flush(work, now))

    def submit_entry(self, chain_id, entry, now=None):
        """Queue a UAS-issued PermissionRecord or certificate announcement."""
        now = self._now(now)
        work = self._work(chain_id)
        with work.lock:
            state = self._sync(work)
            uas = state.uas_cert
            if isinstance(entry, PermissionRecord):
                if entry.issued_by != uas.fingerprint or not verify(
                    uas.public_key, entry.signing_payload(), entry.uas_sig
                ):
                    raise SignatureMismatch("permission record is not signed by the chain's UAS")
            elif isinstance(entry, Certificate):
                if entry.issuer_fingerprint != uas.fingerprint or not certificate_signed_by(entry, uas.public_key):
                    raise InvalidCertificate("certificate is not issued by the chain's UAS")
                if entry.fingerprint in state.certs:
                    return Receipt(True, None)
            else:
                raise TypeError("submit_entry takes permission records and certificates")
            item = QueueItem.of(entry, max(now, work.queue.last_stamp or 0))
            if item.digest in state.entry_digests:
                return Receipt(True, None)
            for i, queued in enumerate(work.queue.items, 1):
                if queued.digest == item.digest:
                    return Receipt(True, i)
            self._announce_self(work, now)
            position = self._enqueue_item(work, item)
            return Receipt(True, position, self._auto_flush(work, now))

    def _auto_flush(self, work, now):
        sealed = []
        policy = self.policy_for(work.chain_id)
        while should_flush(work.queue, policy, now):
            try:
                block = self._flush_locked(work, now, policy)
            except PublishFailed as exc:
                logger.error("automatic flush of %s failed, queue kept: %s", work.chain_id.short(), exc)
                break
            if block is not None:
                sealed.append(block.height)
        return tuple(sealed)

    def flush(self, chain_id, now=None):
        """Seal one block from the queue and publish it; returns the block (or None if all purged)."""
        now = self._now(now)
        work = self._work(chain_id)
        with work.lock:
            return self._flush_locked(work, now, self.policy_for(work.chain_id))

    def flush_all(self, chain_id, now=None):
        """Flush until the queue is empty; returns the published blocks."""
        now = self._now(now)
        work = self._work(chain_id)
        blocks = []
        with work.lock:
            self._sync(work)
            while work.queue or work.pending:
                block = self._flush_locked(work, now, self.policy_for(work.chain_id))
                if block is not None:
                    blocks.append(block)
        return blocks

    def _flush_locked(self, work, now, policy):
        state = self._sync(work)
        if work.pending is not None:
            block, consumed = work.pending
            if state.head_digest == block.header.digest():
                # the BCMS stored it but the acknowledgement was lost
                work.pending = None
                self._drop(work, consumed)
                return block
            if block.header.prev_header_digest != state.head_digest:
                work.pending = None
        if work.pending is None:
            block, consumed, purged = build_block(work.queue, state, policy, self.keypair, self.certificate, now)
            if block is None:
                self._drop(work, consumed)
                return None
            work.pending = (block, consumed)
        block, consumed = work.pending
        try:
            self.gateway.append_block(work.chain_id, block, self.fingerprint)
        except TransportError as exc:
            raise PublishFailed(f"BCMS did not acknowledge block {block.height}", height=block.height) from exc
        except ChainError:
            work.pending = None
            raise
        except OSError as exc:
            raise PublishFailed(f"BCMS did not acknowledge block {block.height}", height=block.height) from exc
        work.pending = None
        work.state.apply(block)
        self._drop(work, consumed)
        return block

    def tick(self, now=None):
        """Clock tick: flush every chain whose policy fires at ``now``."""
        now = self._now(now)
        sealed = {}
        with self._lock:
            works = list(self._chains.values())
        for work in works:
            with work.lock:
                if work.queue:
                    heights = self._auto_flush(work, now)
                    if heights:
                        sealed[work.chain_id] = heights
        return sealed

    def queue_status(self, chain_id):
        work = self._work(chain_id)
        with work.lock:
            return {
                "depth": len(work.queue),
                "size": work.queue.size,
                "oldest": work.queue.oldest_stamp,
            }

    def queued_entries(self, chain_id):
        work = self._work(chain_id)
        with work.lock:
            return [item.entry for item in work.queue.items]

    def forget(self, chain_id):
        """Drop all in-memory work for a chain, as a restart would."""
        with self._lock:
            self._chains.pop(Digest(chain_id), None)
