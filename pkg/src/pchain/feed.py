"""Deterministic mock financial institutions.

Each institution emits an endless transaction stream that is a pure
function of (kind, seed): transaction ``n`` falls in the n-th time slot
after ``start`` (slot width = one day / rate) at a seeded offset, so
occurred_at strictly increases with ``n`` and any ``since`` cursor maps to
a unique resume point.

Amount parameters per kind, in minor units:

    kind         min     max       share negative
    bank         500     250000    0.55
    credit-card  100     50000     0.95
    investment   1000    500000    0.30
"""

import random
import threading
from dataclasses import dataclass

from .crypto import KeyPair
from .errors import BadRequest, UnknownFingerprint
from .model import FinancialTransaction

DEFAULT_START = 1704067200  # 2024-01-01T00:00:00Z

KIND_PARAMS = {
    "bank": {"min_amount": 500, "max_amount": 250_000, "negative_share": 0.55},
    "credit-card": {"min_amount": 100, "max_amount": 50_000, "negative_share": 0.95},
    "investment": {"min_amount": 1000, "max_amount": 500_000, "negative_share": 0.30},
}

_DESCRIPTIONS = {
    "bank": ("Payroll deposit", "ATM withdrawal", "Rent payment", "Transfer", "Utility bill", "Check #{n}"),
    "credit-card": ("Grocery store", "Coffee shop", "Streaming subscription", "Fuel", "Online order", "Refund"),
    "investment": ("Dividend", "Buy ETF", "Sell shares", "Interest", "Management fee", "Rebalance"),
}


@dataclass
class InstitutionProfile:
    name: str
    kind: str
    seed: int
    rate: int = 4
    currency: str = "USD"
    start: int = DEFAULT_START
    keypair: KeyPair = None
    certificate: object = None

    def __post_init__(self):
        if self.kind not in KIND_PARAMS:
            raise ValueError(f"kind must be one of {sorted(KIND_PARAMS)}")
        if not 1 <= self.rate <= 86400:
            raise ValueError("rate must be between 1 and 86400 per day")
        if self.keypair is None:
            self.keypair = KeyPair.derive(f"institution:{self.kind}:{self.seed}")

    @property
    def spacing(self):
        return 86400 // self.rate

    @property
    def params(self):
        return KIND_PARAMS[self.kind]


def _rng(profile, n, salt=""):
    return random.Random(f"{profile.kind}:{profile.seed}:{n}{salt}")


def occurred_at(profile, n):
    return profile.start + n * profile.spacing + _rng(profile, n, ":t").randrange(profile.spacing)


def first_index_after(profile, since):
    if since < profile.start:
        return 0
    n = (since - profile.start) // profile.spacing
    return n if occurred_at(profile, n) > since else n + 1


def transaction(profile, n):
    """The n-th transaction of the stream (unsigned)."""
    if profile.certificate is None:
        raise ValueError(f"institution {profile.name} has no certificate yet")
    rng = _rng(profile, n)
    p = profile.params
    magnitude = rng.randint(p["min_amount"], p["max_amount"])
    amount = -magnitude if rng.random() < p["negative_share"] else magnitude
    description = rng.choice(_DESCRIPTIONS[profile.kind]).format(n=n)
    return FinancialTransaction(
        institution_id=profile.certificate.fingerprint,
        account_id=f"{profile.kind}-{profile.seed % 10000:04d}",
        amount=amount,
        currency=profile.currency,
        occurred_at=occurred_at(profile, n),
        description=description,
        external_ref=f"{profile.kind}-{profile.seed}-{n}",
    )


def next_batch(profile, since, count):
    """``count`` signed transactions with occurred_at > ``since``, oldest first."""
    if count < 0:
        raise ValueError("count must be >= 0")
    start = first_index_after(profile, since)
    out = []
    for n in range(start, start + count):
        tx = transaction(profile, n)
        out.append((tx, profile.keypair.sign(tx.encode())))
    return out


class FeedService:
    """In-process institution API over a set of profiles keyed by institution id."""

    def __init__(self, profiles):
        self.profiles = dict(profiles)
        self._lock = threading.Lock()

    def _profile(self, institution_id):
        try:
            return self.profiles[institution_id]
        except KeyError:
            raise UnknownFingerprint(f"no institution {institution_id!r}") from None

    def ids(self):
        return sorted(self.profiles)

    def info(self, institution_id):
        p = self._profile(institution_id)
        return {
            "id": institution_id,
            "name": p.name,
            "kind": p.kind,
            "seed": p.seed,
            "rate": p.rate,
            "public_key": p.keypair.public_key,
            "certificate": p.certificate,
        }

    def install_certificate(self, institution_id, certificate):
        p = self._profile(institution_id)
        if certificate.public_key != p.keypair.public_key:
            raise BadRequest("certificate does not carry this institution's key")
        with self._lock:
            p.certificate = certificate

    def transactions(self, institution_id, since, limit):
        if limit < 0:
            raise BadRequest("limit must be >= 0")
        p = self._profile(institution_id)
        if p.certificate is None:
            raise BadRequest("institution has not been enrolled")
        return next_batch(p, since, limit)


def serve(profiles, host="127.0.0.1", port=0):
    """Start the institution API over HTTP; returns the running server."""
    from .api import feed_router
    from .transport import serve as serve_router

    return serve_router(feed_router(FeedService(profiles)), host, port)
