import random
from dataclasses import replace

import pandas as pd
import pytest

from pchain.bcs import (
    DEFAULT_POLICY,
    BlockCreationService,
    Composite,
    MaxBytes,
    MaxCount,
    PendingQueue,
    PeriodEnd,
    QueueItem,
    next_period_start,
    policy_from_config,
    policy_to_config,
)
from pchain.crypto import ZERO_DIGEST, KeyPair, verify
from pchain.errors import (
    BadCustomerSignature,
    BadInstitutionSignature,
    EmptyQueue,
    InvalidCertificate,
    NotPermitted,
    PublishFailed,
    SignatureMismatch,
    TransportError,
)
from pchain.model import Certificate, Role, Scope

from helpers import T0, World

# ------------------------------------------------------------ boundaries

_FREQ = {"day": "D", "month": "M", "quarter": "Q"}


def _oracle_boundary(ts, period):
    # pandas periods as an independent calendar
    p = pd.Timestamp(ts, unit="s", tz="UTC").tz_localize(None).to_period(_FREQ[period])
    return int((p + 1).start_time.timestamp())


@pytest.mark.parametrize("period", ["day", "month", "quarter"])
def test_period_boundaries_match_calendar_oracle(period):
    rng = random.Random(period)
    samples = [rng.randrange(0, 4_102_444_800) for _ in range(500)]
    samples += [1_709_251_199, 1_709_251_200, 1_704_067_199, 1_704_067_200, 951_782_400]  # leap-year edges
    for ts in samples:
        assert next_period_start(ts, period) == _oracle_boundary(ts, period), ts


def test_unknown_period():
    with pytest.raises(ValueError):
        next_period_start(0, "week")
    with pytest.raises(ValueError):
        PeriodEnd("week")


# --------------------------------------------------------------- policies

def _queue(sizes, stamps=None):
    q = PendingQueue(ZERO_DIGEST)
    stamps = stamps or [T0] * len(sizes)
    for size, stamp in zip(sizes, stamps):
        q.items.append(QueueItem(None, stamp, size, ZERO_DIGEST))
        q.size += size
    return q


class TestPolicies:
    def test_max_count(self):
        p = MaxCount(3)
        assert not p.fires(_queue([1, 1]), T0)
        assert p.fires(_queue([1, 1, 1, 1]), T0)
        assert p.limit(_queue([1] * 5), T0) == 3

    def test_max_bytes_prefix(self):
        p = MaxBytes(100)
        assert p.limit(_queue([40, 40, 40]), T0) == 2
        assert p.limit(_queue([100, 1]), T0) == 1
        assert p.limit(_queue([30, 30]), T0) == 2
        assert not p.fires(_queue([30, 30]), T0)
        assert p.fires(_queue([60, 60]), T0)

    def test_max_bytes_oversized_alone(self):
        assert MaxBytes(100).limit(_queue([500, 10]), T0) == 1

    def test_period_end(self):
        jan31 = T0 + 30 * 86400
        feb1 = T0 + 31 * 86400
        p = PeriodEnd("month")
        q = _queue([1, 1, 1], [T0, jan31, feb1 + 5])
        assert not p.fires(q, feb1 - 1)
        assert p.fires(q, feb1)
        assert p.limit(q, feb1 + 10) == 2

    def test_composite_any_and_min(self):
        p = Composite((MaxCount(5), MaxBytes(100)))
        assert p.fires(_queue([60, 60]), T0)
        assert p.limit(_queue([10] * 8), T0) == 5
        assert p.limit(_queue([60] * 8), T0) == 1

    def test_config_round_trip(self):
        p = policy_from_config(max_count=4, max_bytes=1000, period="day")
        assert policy_to_config(p) == {"max_count": 4, "max_bytes": 1000, "period": "day"}
        assert policy_from_config() == DEFAULT_POLICY
        assert policy_from_config(max_count=2) == MaxCount(2)

    def test_invalid(self):
        for bad in (lambda: MaxCount(0), lambda: MaxBytes(0), lambda: Composite(())):
            with pytest.raises(ValueError):
                bad()


# ---------------------------------------------------------------- service

@pytest.fixture
def world():
    w = World(label="bcs")
    w.institution("bank")
    return w


def test_rejects_mismatched_identity(world):
    with pytest.raises(InvalidCertificate):
        BlockCreationService(KeyPair.derive("x"), world.bcs_cert)


def test_receipt_positions(world):
    r1 = world.submit("bank", world.tx("bank", "a"))
    r2 = world.submit("bank", world.tx("bank", "b"))
    assert (r1.accepted, r1.position, r2.position) == (True, 1, 2)
    assert world.bcs.queue_status(world.chain)["depth"] == 2


def test_countersignature_and_stamp(world):
    world.now = T0 + 500
    world.submit("bank", world.tx("bank", "a"))
    block = world.flush()[0]
    stx = block.entries[0]
    assert stx.bcs_timestamp == T0 + 500
    assert verify(world.bcs_cert.public_key, stx.countersign_payload(), stx.bcs_sig)


def test_stamps_never_run_backwards(world):
    world.submit("bank", world.tx("bank", "a"), now=T0 + 100)
    world.submit("bank", world.tx("bank", "b"), now=T0 + 50)
    block = world.flush(now=T0 + 200)[0]
    stamps = [e.bcs_timestamp for e in block.entries]
    assert stamps == sorted(stamps)


def test_enqueue_errors(world):
    tx = world.tx("bank", "a")
    inst_sig, cust_sig = world.sigs("bank", tx)
    other = KeyPair.derive("x").sign(tx.encode())
    with pytest.raises(BadInstitutionSignature):
        world.gateway.submit_transaction(world.chain, tx, other, cust_sig, now=T0)
    with pytest.raises(BadCustomerSignature):
        world.gateway.submit_transaction(world.chain, tx, inst_sig, other, now=T0)
    stranger = replace(tx, institution_id=world.uas.fingerprint)
    with pytest.raises(NotPermitted):
        world.gateway.submit_transaction(world.chain, stranger, inst_sig, cust_sig, now=T0)


def test_expired_institution_not_permitted(world):
    world.now = T0 + 11 * 365 * 86400
    with pytest.raises(NotPermitted):
        world.submit("bank", world.tx("bank", "late"))


def test_revoked_before_flush_is_purged(world):
    world.submit_many("bank", 3)
    world.revoke("bank", flush=False)
    blocks = world.flush()
    assert all(not b.transactions() for b in blocks)
    assert world.refs() == []
    with pytest.raises(NotPermitted):
        world.submit("bank", world.tx("bank", "after"))


def test_flush_empty(world):
    with pytest.raises(EmptyQueue):
        world.bcs.flush(world.chain, now=T0)


def test_submit_entry_requires_uas_signature(world):
    rec = world.uas.sign_record(world.fp("bank"), 2, Scope.SUBMIT_TRANSACTIONS, T0)
    forged = replace(rec, uas_sig=KeyPair.derive("m").sign(rec.signing_payload()))
    with pytest.raises(SignatureMismatch):
        world.bcs.submit_entry(world.chain, forged, now=T0)
    key = KeyPair.derive("self-made")
    rogue = Certificate("rogue", Role.INSTITUTION, key.public_key, issued_at=T0, expires_at=T0 + 9)
    with pytest.raises(InvalidCertificate):
        world.bcs.submit_entry(world.chain, rogue, now=T0)


def test_bcs_announces_itself_first():
    w = World(label="announce")
    w.institution("bank")
    first = w.blocks()[1]
    assert first.entries[0] == w.bcs_cert


def test_auto_flush_on_policy():
    w = World(label="auto", policy=MaxCount(3))
    w.institution("bank")
    receipts = w.submit_many("bank", 7)
    assert [bool(r.sealed) for r in receipts] == [False, False, True, False, False, True, False]
    assert w.bcs.queue_status(w.chain)["depth"] == 1


def test_tick_seals_at_period_end():
    w = World(label="tick", policy=PeriodEnd("month"))
    w.institution("bank")
    feb1 = T0 + 31 * 86400
    w.submit("bank", w.tx("bank", "a"), now=T0 + 10)
    assert w.bcs.tick(now=feb1 - 1) == {}
    assert w.bcs.tick(now=feb1) == {w.chain: (2,)}


def test_journal_restores_queue(tmp_path):
    w = World(label="journal", journal_dir=tmp_path)
    w.institution("bank")
    w.submit_many("bank", 4)
    restarted = BlockCreationService(w.bcs_key, w.bcs_cert, w.gateway, journal_dir=tmp_path)
    w.gateway.connect_bcs(w.bcs_cert.fingerprint, restarted)
    assert restarted.queue_status(w.chain)["depth"] == 4
    restarted.flush_all(w.chain, now=w.now)
    assert len(w.refs()) == 4
    again = BlockCreationService(w.bcs_key, w.bcs_cert, w.gateway, journal_dir=tmp_path)
    assert again.queue_status(w.chain)["depth"] == 0


class _DropAck:
    """Stores the block, then loses the acknowledgement once."""

    def __init__(self, inner):
        self.inner = inner
        self.armed = True

    def __getattr__(self, name):
        return getattr(self.inner, name)

    def append_block(self, chain, block, presenter):
        n = self.inner.append_block(chain, block, presenter)
        if self.armed:
            self.armed = False
            raise TransportError("connection reset")
        return n


def test_lost_ack_does_not_duplicate(world):
    world.bcs.gateway = _DropAck(world.gateway)
    world.submit_many("bank", 3)
    with pytest.raises(PublishFailed):
        world.bcs.flush(world.chain, now=world.now)
    # the retry recognises its own block on the chain
    blocks = world.flush()
    assert len(blocks) == 1
    assert world.refs() == ["r0", "r1", "r2"]
    assert world.bcs.queue_status(world.chain)["depth"] == 0


def test_sync_prunes_entries_already_on_chain(world):
    world.submit_many("bank", 2)
    block = world.flush()[0]
    # replay the same entry into a fresh service's queue: it must be pruned
    fresh = BlockCreationService(world.bcs_key, world.bcs_cert, world.gateway)
    fresh._work(world.chain).queue.append(QueueItem.of(block.entries[0], world.now))
    assert fresh.flush_all(world.chain, now=world.now) == []

