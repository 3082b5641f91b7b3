"""Reporting Service: read-only integrity checks, queries, aggregation, export.

The service holds no signing key. Every query re-establishes chain
integrity first and refuses to answer over a tampered chain.
"""

import csv
import io
import json
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from datetime import datetime, timezone

from .crypto import ZERO_DIGEST, Digest, chain_digest
from .errors import DecodeError, OutOfRange, TamperedChain
from .model import Block, SignedTransaction
from .replay import BAD_ENCODING, ChainFault, ChainState

CSV_COLUMNS = (
    "height",
    "position",
    "occurred_at",
    "bcs_timestamp",
    "institution",
    "account",
    "amount",
    "currency",
    "description",
    "external_ref",
)
SUMMARY_COLUMNS = ("section", "key", "currency", "count", "total")
BUCKETS = ("day", "month")
FORMATS = ("json-lines", "csv")


@dataclass(frozen=True)
class IntegrityReport:
    ok: bool
    length: int
    head_digest: Digest = None
    first_bad_height: int = None
    reason: str = None
    checked_at: int = 0

    def to_dict(self):
        return {
            "ok": self.ok,
            "length": self.length,
            "head_digest": self.head_digest.hex() if self.head_digest else None,
            "first_bad_height": self.first_bad_height,
            "reason": self.reason,
            "checked_at": self.checked_at,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            ok=d["ok"],
            length=d["length"],
            head_digest=Digest.from_hex(d["head_digest"]) if d.get("head_digest") else None,
            first_bad_height=d.get("first_bad_height"),
            reason=d.get("reason"),
            checked_at=d.get("checked_at", 0),
        )


@dataclass(frozen=True)
class QueryFilter:
    """All bounds inclusive. Dates are UTC seconds on ``occurred_at``."""

    date_from: int = None
    date_to: int = None
    institution: Digest = None
    min_amount: int = None
    max_amount: int = None
    text: str = None

    def __post_init__(self):
        if self.institution is not None:
            object.__setattr__(self, "institution", Digest(self.institution))
        if None not in (self.date_from, self.date_to) and self.date_from > self.date_to:
            raise ValueError("date range bounds out of order")
        if None not in (self.min_amount, self.max_amount) and self.min_amount > self.max_amount:
            raise ValueError("amount range bounds out of order")

    def matches(self, tx):
        if self.date_from is not None and tx.occurred_at < self.date_from:
            return False
        if self.date_to is not None and tx.occurred_at > self.date_to:
            return False
        if self.institution is not None and tx.institution_id != self.institution:
            return False
        if self.min_amount is not None and tx.amount < self.min_amount:
            return False
        if self.max_amount is not None and tx.amount > self.max_amount:
            return False
        if self.text is not None and self.text not in tx.description:
            return False
        return True


@dataclass(frozen=True)
class QueryRow:
    height: int
    position: int
    stx: SignedTransaction

    def as_record(self):
        tx = self.stx.tx
        return {
            "height": self.height,
            "position": self.position,
            "occurred_at": tx.occurred_at,
            "bcs_timestamp": self.stx.bcs_timestamp,
            "institution": tx.institution_id.hex(),
            "account": tx.account_id,
            "amount": tx.amount,
            "currency": tx.currency,
            "description": tx.description,
            "external_ref": tx.external_ref,
        }


@dataclass
class SummaryReport:
    bucketing: str
    institution_totals: dict = field(default_factory=dict)  # inst hex -> currency -> total
    institution_counts: dict = field(default_factory=dict)  # inst hex -> count
    bucket_totals: dict = field(default_factory=dict)  # bucket -> currency -> total
    bucket_counts: dict = field(default_factory=dict)  # bucket -> count
    balances: dict = field(default_factory=dict)  # currency -> [running balance]
    totals: dict = field(default_factory=dict)  # currency -> grand total
    count: int = 0

    def rows(self):
        out = []
        for inst in sorted(self.institution_totals):
            for cur in sorted(self.institution_totals[inst]):
                out.append(("institution", inst, cur, None, self.institution_totals[inst][cur]))
            out.append(("institution", inst, "", self.institution_counts[inst], None))
        for bucket in sorted(self.bucket_totals):
            for cur in sorted(self.bucket_totals[bucket]):
                out.append(("bucket", bucket, cur, None, self.bucket_totals[bucket][cur]))
            out.append(("bucket", bucket, "", self.bucket_counts[bucket], None))
        for cur in sorted(self.balances):
            for i, bal in enumerate(self.balances[cur]):
                out.append(("balance", str(i), cur, None, bal))
        for cur in sorted(self.totals):
            out.append(("total", "", cur, None, self.totals[cur]))
        out.append(("total", "", "", self.count, None))
        return [dict(zip(SUMMARY_COLUMNS, r)) for r in out]

    def to_dict(self):
        return {
            "bucketing": self.bucketing,
            "institution_totals": self.institution_totals,
            "institution_counts": self.institution_counts,
            "bucket_totals": self.bucket_totals,
            "bucket_counts": self.bucket_counts,
            "balances": self.balances,
            "totals": self.totals,
            "count": self.count,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def bucket_key(ts, bucketing):
    dt = datetime.fromtimestamp(ts, tz=timezone.utc)
    if bucketing == "day":
        return dt.strftime("%Y-%m-%d")
    if bucketing == "month":
        return dt.strftime("%Y-%m")
    raise ValueError(f"bucketing must be one of {BUCKETS}")


def summarize_rows(rows, bucketing="month"):
    """Exact integer aggregation over query rows, in chain order."""
    bucket_key(0, bucketing)
    report = SummaryReport(bucketing)
    for row in rows:
        tx = row.stx.tx
        inst = tx.institution_id.hex()
        cur = tx.currency
        per_inst = report.institution_totals.setdefault(inst, {})
        per_inst[cur] = per_inst.get(cur, 0) + tx.amount
        report.institution_counts[inst] = report.institution_counts.get(inst, 0) + 1
        key = bucket_key(tx.occurred_at, bucketing)
        per_bucket = report.bucket_totals.setdefault(key, {})
        per_bucket[cur] = per_bucket.get(cur, 0) + tx.amount
        report.bucket_counts[key] = report.bucket_counts.get(key, 0) + 1
        report.totals[cur] = report.totals.get(cur, 0) + tx.amount
        report.balances.setdefault(cur, []).append(report.totals[cur])
        report.count += 1
    return report


def _write(records, columns, fmt):
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\r\n")
        writer.writerow(columns)
        for rec in records:
            writer.writerow(["" if rec[c] is None else rec[c] for c in columns])
        return buf.getvalue().encode("utf-8")
    if fmt == "json-lines":
        lines = (json.dumps({c: rec[c] for c in columns}, ensure_ascii=False, separators=(",", ":")) for rec in records)
        return "".join(line + "\n" for line in lines).encode("utf-8")
    raise ValueError(f"format must be one of {FORMATS}")


def export(result, fmt="csv"):
    """Serialize a SummaryReport or a list of QueryRows, deterministically."""
    if isinstance(result, SummaryReport):
        return _write(result.rows(), SUMMARY_COLUMNS, fmt)
    return _write([row.as_record() for row in result], CSV_COLUMNS, fmt)


class ReportingService:
    def __init__(self, gateway, certificate=None, clock=None, cache_size=4096):
        self.gateway = gateway
        self.certificate = certificate
        self.clock = clock or time.time
        self._cache = OrderedDict()  # running digest of a verified prefix -> (state, block)
        self._cache_size = cache_size
        self._cache_lock = threading.Lock()

    @property
    def fingerprint(self):
        return self.certificate.fingerprint if self.certificate else None

    def _cached(self, key):
        with self._cache_lock:
            hit = self._cache.get(key)
            if hit is not None:
                self._cache.move_to_end(key)
            return hit

    def _remember(self, key, value):
        with self._cache_lock:
            self._cache[key] = value
            while len(self._cache) > self._cache_size:
                self._cache.popitem(last=False)

    def _walk(self, chain_id, now=None):
        """Verify the whole chain; returns (IntegrityReport, verified blocks)."""
        chain_id = Digest(chain_id)
        checked_at = int(now if now is not None else self.clock())
        length = self.gateway.length(chain_id)
        state = ChainState()
        running = ZERO_DIGEST
        blocks = []
        for h in range(length):
            try:
                raw = self.gateway.read_bytes(chain_id, h)
            except OutOfRange:
                # chain shrank under us
                return IntegrityReport(False, length, None, h, BAD_ENCODING, checked_at), blocks
            running = chain_digest(running + chain_digest(raw))
            hit = self._cached(running)
            if hit is not None:
                state, block = hit
                blocks.append(block)
                continue
            try:
                block = Block.decode(raw)
            except DecodeError:
                return IntegrityReport(False, length, None, h, BAD_ENCODING, checked_at), blocks
            try:
                state = state.applied(block)
            except ChainFault as exc:
                return IntegrityReport(False, length, None, exc.height, exc.reason, checked_at), blocks
            if h == 0 and state.customer_fingerprint != chain_id:
                return IntegrityReport(False, length, None, 0, "bad-link", checked_at), blocks
            self._remember(running, (state, block))
            blocks.append(block)
        head = state.head_digest if length else None
        return IntegrityReport(True, length, head, None, None, checked_at), blocks

    def verify_chain(self, chain_id, now=None):
        report, _ = self._walk(chain_id, now)
        return report

    def _verified(self, chain_id):
        report, blocks = self._walk(chain_id)
        if not report.ok:
            raise TamperedChain(
                f"chain failed verification at height {report.first_bad_height}: {report.reason}",
                report=report.to_dict(),
            )
        return blocks

    def query(self, chain_id, filt=None):
        filt = filt or QueryFilter()
        rows = []
        for block in self._verified(chain_id):
            for pos, entry in enumerate(block.entries):
                if isinstance(entry, SignedTransaction) and filt.matches(entry.tx):
                    rows.append(QueryRow(block.height, pos, entry))
        return rows

    def summarize(self, chain_id, bucketing="month"):
        return summarize_rows(self.query(chain_id), bucketing)

    def export(self, result, fmt="csv"):
        return export(result, fmt)
