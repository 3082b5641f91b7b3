import json
import random
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pchain.crypto import HASH_ALGORITHM, SIGNATURE_SCHEME, ZERO_DIGEST, Digest, KeyPair, chain_digest, verify
from pchain.encoding import Reader, Writer
from pchain.errors import DecodeError
from pchain.ledger import make_genesis, seal_block, sign_certificate
from pchain.model import (
    Action,
    Block,
    BlockHeader,
    Certificate,
    FinancialTransaction,
    PermissionRecord,
    Role,
    Scope,
    SignedTransaction,
    canonical_decode,
    canonical_encode,
    decode_entry,
)

GOLDEN = json.loads((Path(__file__).parent / "golden" / "vectors.json").read_text())


def _key(byte):
    return KeyPair.from_seed(bytes([byte]) * 32)


def _golden_chain():
    """Rebuild the golden two-block chain with the package's own code."""
    t0, year = GOLDEN["t0"], 365 * 86400
    uas, customer, bcs, inst = _key(1), _key(2), _key(3), _key(4)
    uas_cert = sign_certificate(Certificate("uas", Role.UAS, uas.public_key, {}, t0, t0 + year), uas, ZERO_DIGEST)
    ufp = uas_cert.fingerprint

    def issue(name, role, key, aux=None):
        return sign_certificate(Certificate(name, role, key.public_key, aux or {}, t0, t0 + year, ufp), uas, ufp)

    def record(subject, at):
        r = PermissionRecord(subject, Action.GRANT, Scope.SUBMIT_TRANSACTIONS, ufp, at)
        return PermissionRecord(subject, Action.GRANT, Scope.SUBMIT_TRANSACTIONS, ufp, at, uas.sign(r.signing_payload()))

    cust_cert = issue("alice", Role.CUSTOMER, customer)
    bcs_cert = issue("bcs", Role.BCS, bcs)
    inst_cert = issue("bank", Role.INSTITUTION, inst, {"api_token_ref": "vault:bank"})
    genesis = make_genesis(cust_cert, uas_cert, record(bcs_cert.fingerprint, t0), uas, t0)
    tx = FinancialTransaction(inst_cert.fingerprint, "chk-001", -12345, "EUR", t0 + 50, "Café ☕", "bank-1")
    unsigned = SignedTransaction(tx, inst.sign(tx.encode()), customer.sign(tx.encode()), t0 + 60)
    stx = SignedTransaction(tx, unsigned.institution_sig, unsigned.customer_sig, t0 + 60,
                            bcs.sign(unsigned.countersign_payload()))
    block1 = seal_block(genesis.header, [bcs_cert, inst_cert, record(inst_cert.fingerprint, t0 + 10), stx],
                        bcs, bcs_cert, t0 + 100)
    return uas_cert, cust_cert, bcs_cert, inst_cert, genesis, block1


class TestGoldenVectors:
    def test_sha256_known_answer(self):
        assert HASH_ALGORITHM == "sha256"
        assert chain_digest(b"").hex() == GOLDEN["sha256_empty"]
        assert GOLDEN["sha256_empty"] == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"

    def test_signature_scheme_named_once(self):
        assert SIGNATURE_SCHEME == "ed25519"

    def test_zero_transaction_bytes(self):
        tx = FinancialTransaction(ZERO_DIGEST, "", 0, "XXX", 0, "", "")
        assert tx.encode().hex() == GOLDEN["zero_tx"]
        assert chain_digest(tx.encode()).hex() == GOLDEN["zero_tx_digest"]

    def test_fingerprints(self):
        uas_cert, cust_cert, bcs_cert, inst_cert, _, _ = _golden_chain()
        assert uas_cert.fingerprint.hex() == GOLDEN["uas_fingerprint"]
        assert cust_cert.fingerprint.hex() == GOLDEN["customer_fingerprint"]
        assert bcs_cert.fingerprint.hex() == GOLDEN["bcs_fingerprint"]
        assert inst_cert.fingerprint.hex() == GOLDEN["institution_fingerprint"]

    def test_genesis_and_block_bytes(self):
        *_, genesis, block1 = _golden_chain()
        assert genesis.encode().hex() == GOLDEN["genesis"]
        assert block1.encode().hex() == GOLDEN["block1"]
        assert genesis.header.digest().hex() == GOLDEN["genesis_digest"]
        assert block1.header.digest().hex() == GOLDEN["block1_digest"]

    def test_golden_bytes_decode(self):
        for key in ("genesis", "block1"):
            data = bytes.fromhex(GOLDEN[key])
            assert Block.decode(data).encode() == data


def test_avalanche():
    # one flipped input bit changes about half of the 256 digest bits
    rng = random.Random(3)
    total, trials = 0, 300
    for _ in range(trials):
        data = bytearray(rng.randbytes(64))
        a = chain_digest(bytes(data))
        data[rng.randrange(64)] ^= 1 << rng.randrange(8)
        b = chain_digest(bytes(data))
        total += bin(int.from_bytes(a, "big") ^ int.from_bytes(b, "big")).count("1")
    assert abs(total / trials - 128) < 4


class TestPrimitives:
    def test_integers_are_big_endian(self):
        w = Writer()
        w.u8(1)
        w.u32(0x01020304)
        w.u64(5)
        w.i64(-2)
        assert w.getvalue().hex() == "01" "01020304" "0000000000000005" "fffffffffffffffe"

    def test_map_sorted_by_key_bytes(self):
        w = Writer()
        w.str_map({"b": "2", "a": "1", "é": "3"})
        assert Reader(w.getvalue()).str_map() == {"a": "1", "b": "2", "é": "3"}
        raw = w.getvalue()
        # keys appear in byte order a, b, é
        assert raw.index(b"a") < raw.index(b"b") < raw.index("é".encode())

    def test_unsorted_map_rejected(self):
        w = Writer()
        w.u32(2)
        for k in ("b", "a"):
            w.text(k)
            w.text("v")
        with pytest.raises(DecodeError):
            Reader(w.getvalue()).str_map()

    def test_overrun_rejected(self):
        with pytest.raises(DecodeError):
            Reader(b"\x00\x00\x00\x05ab").text()

    @pytest.mark.parametrize("bad", [-1, 1 << 64])
    def test_u64_range(self, bad):
        with pytest.raises((ValueError, OverflowError)):
            Writer().u64(bad)

    def test_digest_length_checked(self):
        with pytest.raises(ValueError):
            Digest(b"short")


class TestRejections:
    def test_trailing_bytes(self):
        tx = FinancialTransaction(ZERO_DIGEST, "a", 1, "USD", 0, "", "r")
        with pytest.raises(DecodeError):
            FinancialTransaction.decode(tx.encode() + b"\x00")

    def test_wrong_tag(self):
        data = bytearray(bytes.fromhex(GOLDEN["zero_tx"]))
        data[0] = 0x12
        with pytest.raises(DecodeError):
            FinancialTransaction.decode(bytes(data))

    def test_truncation_everywhere(self):
        data = bytes.fromhex(GOLDEN["block1"])
        for cut in range(0, len(data), 7):
            with pytest.raises(DecodeError):
                Block.decode(data[:cut])

    def test_unknown_enum(self):
        rec = PermissionRecord(ZERO_DIGEST, Action.GRANT, Scope.READ_CHAIN, ZERO_DIGEST, 0)
        data = bytearray(rec.encode())
        data[33] = 9  # action byte
        with pytest.raises(DecodeError):
            PermissionRecord.decode(bytes(data))

    def test_bad_entry_tag(self):
        with pytest.raises(DecodeError):
            decode_entry(b"\x99")

    def test_currency_validated(self):
        with pytest.raises(ValueError):
            FinancialTransaction(ZERO_DIGEST, "a", 1, "usd", 0, "", "r")

    def test_description_limit(self):
        FinancialTransaction(ZERO_DIGEST, "a", 1, "USD", 0, "x" * 512, "r")
        with pytest.raises(ValueError):
            FinancialTransaction(ZERO_DIGEST, "a", 1, "USD", 0, "é" * 257, "r")


# ------------------------------------------------------------ round trips

digests = st.binary(min_size=32, max_size=32).map(Digest)
sigs = st.binary(min_size=64, max_size=64)
texts = st.text(max_size=40)
u64 = st.integers(0, 2**64 - 1)

transactions = st.builds(
    FinancialTransaction,
    institution_id=digests,
    account_id=texts,
    amount=st.integers(-(2**63), 2**63 - 1),
    currency=st.text("ABCDEFGHIJKLMNOPQRSTUVWXYZ", min_size=3, max_size=3),
    occurred_at=u64,
    description=st.text(max_size=100),
    external_ref=texts,
)
signed = st.builds(SignedTransaction, tx=transactions, institution_sig=sigs, customer_sig=sigs,
                   bcs_timestamp=u64, bcs_sig=sigs)
records = st.builds(PermissionRecord, subject_fingerprint=digests, action=st.sampled_from(Action),
                    scope=st.sampled_from(Scope), issued_by=digests, issued_at=u64, uas_sig=sigs)


@st.composite
def certificates(draw):
    issued = draw(st.integers(0, 2**63))
    return Certificate(
        subject_id=draw(texts),
        role=draw(st.sampled_from(Role)),
        public_key=draw(st.binary(min_size=32, max_size=32)),
        aux=draw(st.dictionaries(texts, texts, max_size=4)),
        issued_at=issued,
        expires_at=draw(st.integers(issued + 1, 2**64 - 1)),
        issuer_fingerprint=draw(digests),
        issuer_sig=draw(sigs),
    )


entries = st.one_of(signed, records, certificates())
blocks = st.builds(
    Block,
    header=st.builds(BlockHeader, height=u64, prev_header_digest=digests, data_digest=digests,
                     created_at=u64, creator_fingerprint=digests, creator_sig=sigs),
    entries=st.lists(entries, max_size=5),
)


@settings(max_examples=150, deadline=None)
@given(st.one_of(transactions, signed, records, certificates()))
def test_round_trip_values(value):
    data = canonical_encode(value)
    back = canonical_decode(type(value), data)
    assert back == value
    assert canonical_encode(back) == data


@settings(max_examples=60, deadline=None)
@given(blocks)
def test_round_trip_blocks(block):
    data = block.encode()
    assert Block.decode(data) == block
    assert Block.decode(data).encode() == data


@settings(max_examples=60, deadline=None)
@given(st.binary(max_size=300))
def test_decode_never_crashes(data):
    for cls in (Block, FinancialTransaction, SignedTransaction, Certificate, PermissionRecord):
        try:
            cls.decode(data)
        except DecodeError:
            pass


def test_keypair_derivation_is_stable():
    a, b = KeyPair.derive("x"), KeyPair.derive("x")
    assert a.public_key == b.public_key
    assert a.sign(b"m") == b.sign(b"m")
    assert verify(a.public_key, b"m", a.sign(b"m"))
    assert not verify(a.public_key, b"n", a.sign(b"m"))
    assert not verify(a.public_key, b"m", b"\x00" * 10)
