"""HTTP routes for each service, and clients exposing the same Python surface.

A client can stand in for the in-process service object anywhere: the
gateway talks to a ``BcsClient`` exactly as it would to a
``BlockCreationService``, and so on.
"""

from .bcs import Receipt
from .crypto import Digest
from .errors import BadRequest
from .gateway import ChainRegistration
from .model import (
    Block,
    BlockHeader,
    Certificate,
    FinancialTransaction,
    PermissionRecord,
    Role,
    Scope,
    SignedTransaction,
    decode_entry,
    encode_entry,
)
from .replay import PermissionSet
from .reporting import IntegrityReport, QueryFilter, QueryRow, SummaryReport, export
from .store import MigrationReport
from .transport import JsonClient, Router, b64d, b64e


def _fp(text):
    try:
        return Digest.from_hex(text)
    except (ValueError, TypeError):
        raise BadRequest("fingerprint must be 64 hex characters") from None


def _int(value, name, default=None):
    if value is None or value == "":
        if default is not None:
            return default
        raise BadRequest(f"missing integer parameter {name!r}")
    try:
        return int(value)
    except (TypeError, ValueError):
        raise BadRequest(f"parameter {name!r} must be an integer") from None


def _opt_int(value, name):
    return None if value in (None, "") else _int(value, name)


def _now(payload):
    return _opt_int(payload.get("now"), "now")


def _cert(text):
    return Certificate.decode(b64d(text))


def _receipt(r):
    return r.to_dict()


def _perm_dict(ps):
    return {"height": ps.height, "grants": ps.as_labels(), "log": list(ps.log)}


def _perm_from(d):
    grants = {Digest.from_hex(k): frozenset(Scope.from_label(s) for s in v) for k, v in d["grants"].items()}
    return PermissionSet(grants, d["height"], d.get("log", ()))


# ------------------------------------------------------------------ gateway


def gateway_router(gw):
    r = Router("bcms")

    @r.route("GET", "/chains")
    def chains(payload, query):
        return {"chains": [fp.hex() for fp in gw.chains()]}

    @r.route("POST", "/chains")
    def register(payload, query):
        reg = ChainRegistration.decode(b64d(payload.get("registration")))
        genesis = Block.decode(b64d(payload.get("genesis")))
        return {"chain": gw.register_chain(reg, genesis).hex()}

    @r.route("POST", "/chains/{fp}/tx")
    def submit(payload, query, fp):
        tx = FinancialTransaction.decode(b64d(payload.get("tx")))
        receipt = gw.submit_transaction(
            _fp(fp), tx, b64d(payload.get("institution_sig")), b64d(payload.get("customer_sig")), now=_now(payload)
        )
        return _receipt(receipt)

    @r.route("POST", "/chains/{fp}/records")
    def submit_entry(payload, query, fp):
        entry = decode_entry(b64d(payload.get("entry")))
        return _receipt(gw.submit_entry(_fp(fp), entry, now=_now(payload)))

    @r.route("POST", "/chains/{fp}/blocks")
    def append(payload, query, fp):
        block = Block.decode(b64d(payload.get("block")))
        return {"length": gw.append_block(_fp(fp), block, _fp(payload.get("presenter", "")))}

    @r.route("GET", "/chains/{fp}/blocks/{height}")
    def read(payload, query, fp, height):
        return {"block": b64e(gw.read_bytes(_fp(fp), _int(height, "height")))}

    @r.route("GET", "/chains/{fp}/head")
    def head(payload, query, fp):
        header = gw.head(_fp(fp))
        return {"header": b64e(header.encode()), "digest": header.digest().hex(), "length": header.height + 1}

    @r.route("GET", "/chains/{fp}/length")
    def length(payload, query, fp):
        return {"length": gw.length(_fp(fp))}

    @r.route("GET", "/chains/{fp}/registration")
    def registration(payload, query, fp):
        return {"registration": b64e(gw.registration(_fp(fp)).encode())}

    @r.route("POST", "/chains/{fp}/backend")
    def switch(payload, query, fp):
        descriptor = payload.get("descriptor")
        if not isinstance(descriptor, str):
            raise BadRequest("descriptor must be a string")
        return gw.switch_backend(_fp(fp), descriptor).to_dict()

    return r


class GatewayClient:
    def __init__(self, url, timeout=30):
        self.http = JsonClient(url, timeout)

    def chains(self):
        return [Digest.from_hex(h) for h in self.http.get("/chains")["chains"]]

    def register_chain(self, registration, genesis):
        body = {"registration": b64e(registration.encode()), "genesis": b64e(genesis.encode())}
        return Digest.from_hex(self.http.post("/chains", body)["chain"])

    def submit_transaction(self, chain_id, tx, institution_sig, customer_sig, now=None):
        body = {
            "tx": b64e(tx.encode()),
            "institution_sig": b64e(institution_sig),
            "customer_sig": b64e(customer_sig),
            "now": now,
        }
        return _receipt_from(self.http.post(f"/chains/{Digest(chain_id).hex()}/tx", body))

    def submit_entry(self, chain_id, entry, now=None):
        body = {"entry": b64e(encode_entry(entry)), "now": now}
        return _receipt_from(self.http.post(f"/chains/{Digest(chain_id).hex()}/records", body))

    def append_block(self, chain_id, block, presenter):
        body = {"block": b64e(block.encode()), "presenter": Digest(presenter).hex()}
        return self.http.post(f"/chains/{Digest(chain_id).hex()}/blocks", body)["length"]

    def read_bytes(self, chain_id, height):
        return b64d(self.http.get(f"/chains/{Digest(chain_id).hex()}/blocks/{int(height)}")["block"])

    def read(self, chain_id, height):
        return Block.decode(self.read_bytes(chain_id, height))

    def head(self, chain_id):
        return BlockHeader.decode(b64d(self.http.get(f"/chains/{Digest(chain_id).hex()}/head")["header"]))

    def length(self, chain_id):
        return self.http.get(f"/chains/{Digest(chain_id).hex()}/length")["length"]

    def registration(self, chain_id):
        data = self.http.get(f"/chains/{Digest(chain_id).hex()}/registration")["registration"]
        return ChainRegistration.decode(b64d(data))

    def switch_backend(self, chain_id, descriptor):
        d = self.http.post(f"/chains/{Digest(chain_id).hex()}/backend", {"descriptor": descriptor})
        return MigrationReport(d["blocks_moved"], Digest.from_hex(d["head_digest"]) if d["head_digest"] else None)


def _receipt_from(d):
    return Receipt(d["accepted"], d.get("position"), tuple(d.get("sealed") or ()))


# ---------------------------------------------------------------------- bcs


def bcs_router(bcs):
    r = Router("bcs")

    @r.route("GET", "/identity")
    def identity(payload, query):
        return {"certificate": b64e(bcs.certificate.encode())}

    @r.route("POST", "/queues/{fp}/tx")
    def submit(payload, query, fp):
        tx = FinancialTransaction.decode(b64d(payload.get("tx")))
        receipt = bcs.submit(
            _fp(fp), tx, b64d(payload.get("institution_sig")), b64d(payload.get("customer_sig")), now=_now(payload)
        )
        return _receipt(receipt)

    @r.route("POST", "/queues/{fp}/records")
    def submit_entry(payload, query, fp):
        entry = decode_entry(b64d(payload.get("entry")))
        return _receipt(bcs.submit_entry(_fp(fp), entry, now=_now(payload)))

    @r.route("GET", "/queues/{fp}")
    def status(payload, query, fp):
        return bcs.queue_status(_fp(fp))

    @r.route("POST", "/queues/{fp}/flush")
    def flush(payload, query, fp):
        if payload.get("all"):
            blocks = bcs.flush_all(_fp(fp), now=_now(payload))
        else:
            block = bcs.flush(_fp(fp), now=_now(payload))
            blocks = [block] if block is not None else []
        return {"blocks": [b64e(b.encode()) for b in blocks]}

    @r.route("POST", "/tick")
    def tick(payload, query):
        sealed = bcs.tick(now=_now(payload))
        return {"sealed": {fp.hex(): list(h) for fp, h in sealed.items()}}

    return r


class BcsClient:
    def __init__(self, url, timeout=30):
        self.http = JsonClient(url, timeout)
        self._cert = None

    @property
    def certificate(self):
        if self._cert is None:
            self._cert = _cert(self.http.get("/identity")["certificate"])
        return self._cert

    @property
    def fingerprint(self):
        return self.certificate.fingerprint

    def submit(self, chain_id, tx, institution_sig, customer_sig, now=None):
        body = {
            "tx": b64e(tx.encode()),
            "institution_sig": b64e(institution_sig),
            "customer_sig": b64e(customer_sig),
            "now": now,
        }
        return _receipt_from(self.http.post(f"/queues/{Digest(chain_id).hex()}/tx", body))

    def submit_entry(self, chain_id, entry, now=None):
        body = {"entry": b64e(encode_entry(entry)), "now": now}
        return _receipt_from(self.http.post(f"/queues/{Digest(chain_id).hex()}/records", body))

    def queue_status(self, chain_id):
        return self.http.get(f"/queues/{Digest(chain_id).hex()}")

    def flush(self, chain_id, now=None):
        blocks = self.http.post(f"/queues/{Digest(chain_id).hex()}/flush", {"now": now})["blocks"]
        return Block.decode(b64d(blocks[0])) if blocks else None

    def flush_all(self, chain_id, now=None):
        blocks = self.http.post(f"/queues/{Digest(chain_id).hex()}/flush", {"now": now, "all": True})["blocks"]
        return [Block.decode(b64d(b)) for b in blocks]

    def tick(self, now=None):
        sealed = self.http.post("/tick", {"now": now})["sealed"]
        return {Digest.from_hex(k): tuple(v) for k, v in sealed.items()}


# ---------------------------------------------------------------------- uas


def uas_router(uas):
    r = Router("uas")

    @r.route("GET", "/identity")
    def identity(payload, query):
        return {"certificate": b64e(uas.certificate.encode())}

    @r.route("POST", "/certs/institution")
    def institution(payload, query):
        cert = uas.issue_institution_certificate(
            payload.get("name", ""),
            b64d(payload.get("public_key")),
            payload.get("api_token_ref", ""),
            _int(payload.get("validity"), "validity"),
            _int(payload.get("now"), "now"),
        )
        return {"certificate": b64e(cert.encode())}

    @r.route("POST", "/certs/service")
    def service(payload, query):
        role = Role.from_label(payload.get("role", ""))
        if role not in (Role.BCS, Role.REPORTING):
            raise BadRequest("only service certificates are issued here")
        cert = uas.issue_certificate(
            payload.get("name", ""),
            role,
            b64d(payload.get("public_key")),
            _int(payload.get("validity"), "validity"),
            _int(payload.get("now"), "now"),
        )
        return {"certificate": b64e(cert.encode())}

    @r.route("POST", "/customers")
    def customers(payload, query):
        kwargs = {}
        if payload.get("validity") is not None:
            kwargs["validity"] = _int(payload.get("validity"), "validity")
        cert, genesis = uas.init_customer(
            payload.get("name", ""),
            b64d(payload.get("public_key")),
            _cert(payload.get("bcs_certificate")),
            _int(payload.get("now"), "now"),
            **kwargs,
        )
        return {"certificate": b64e(cert.encode()), "genesis": b64e(genesis.encode())}

    @r.route("POST", "/chains/{fp}/grants")
    def grant(payload, query, fp):
        record = uas.grant(
            _fp(fp),
            _cert(payload.get("certificate")),
            Scope.from_label(payload.get("scope", "submit-transactions")),
            _int(payload.get("now"), "now"),
        )
        return {"record": b64e(record.encode())}

    @r.route("POST", "/chains/{fp}/revocations")
    def revoke(payload, query, fp):
        record, unknown = uas.revoke_flagged(
            _fp(fp),
            _fp(payload.get("fingerprint", "")),
            Scope.from_label(payload.get("scope", "submit-transactions")),
            _int(payload.get("now"), "now"),
        )
        return {"record": b64e(record.encode()), "flagged": "UnknownFingerprint" if unknown else None}

    @r.route("GET", "/chains/{fp}/permissions")
    def permissions(payload, query, fp):
        return _perm_dict(uas.permissions(_fp(fp), _opt_int(query.get("height"), "height")))

    return r


class UasClient:
    def __init__(self, url, timeout=30):
        self.http = JsonClient(url, timeout)
        self._cert = None

    @property
    def certificate(self):
        if self._cert is None:
            self._cert = _cert(self.http.get("/identity")["certificate"])
        return self._cert

    @property
    def fingerprint(self):
        return self.certificate.fingerprint

    def issue_institution_certificate(self, name, public_key, api_token_ref, validity, now):
        body = {
            "name": name,
            "public_key": b64e(public_key),
            "api_token_ref": api_token_ref,
            "validity": validity,
            "now": now,
        }
        return _cert(self.http.post("/certs/institution", body)["certificate"])

    def issue_certificate(self, subject_id, role, public_key, validity, now):
        body = {
            "name": subject_id,
            "role": Role(role).label,
            "public_key": b64e(public_key),
            "validity": validity,
            "now": now,
        }
        return _cert(self.http.post("/certs/service", body)["certificate"])

    def init_customer(self, display_name, customer_key, bcs_cert, now, validity=None):
        body = {
            "name": display_name,
            "public_key": b64e(getattr(customer_key, "public_key", customer_key)),
            "bcs_certificate": b64e(bcs_cert.encode()),
            "now": now,
            "validity": validity,
        }
        d = self.http.post("/customers", body)
        return _cert(d["certificate"]), Block.decode(b64d(d["genesis"]))

    def grant(self, chain_id, institution_cert, scope, now):
        body = {"certificate": b64e(institution_cert.encode()), "scope": Scope(scope).label, "now": now}
        return PermissionRecord.decode(b64d(self.http.post(f"/chains/{Digest(chain_id).hex()}/grants", body)["record"]))

    def revoke_flagged(self, chain_id, fingerprint, scope, now):
        body = {"fingerprint": Digest(fingerprint).hex(), "scope": Scope(scope).label, "now": now}
        d = self.http.post(f"/chains/{Digest(chain_id).hex()}/revocations", body)
        return PermissionRecord.decode(b64d(d["record"])), bool(d.get("flagged"))

    def revoke(self, chain_id, fingerprint, scope, now):
        return self.revoke_flagged(chain_id, fingerprint, scope, now)[0]

    def permissions(self, chain_id, height=None):
        return _perm_from(self.http.get(f"/chains/{Digest(chain_id).hex()}/permissions", height=height))


# ---------------------------------------------------------------- reporting


def _filter_from_query(query):
    inst = query.get("institution")
    text = query.get("q")
    try:
        return QueryFilter(
            date_from=_opt_int(query.get("from"), "from"),
            date_to=_opt_int(query.get("to"), "to"),
            institution=_fp(inst) if inst else None,
            min_amount=_opt_int(query.get("min"), "min"),
            max_amount=_opt_int(query.get("max"), "max"),
            text=text if text else None,
        )
    except ValueError as exc:
        raise BadRequest(str(exc)) from None


def _filter_to_query(f):
    f = f or QueryFilter()
    return {
        "from": f.date_from,
        "to": f.date_to,
        "institution": f.institution.hex() if f.institution else None,
        "min": f.min_amount,
        "max": f.max_amount,
        "q": f.text,
    }


def reporting_router(rep):
    r = Router("reporting")

    @r.route("GET", "/identity")
    def identity(payload, query):
        cert = rep.certificate
        return {"certificate": b64e(cert.encode()) if cert else None}

    @r.route("GET", "/chains/{fp}/verify")
    def verify(payload, query, fp):
        return rep.verify_chain(_fp(fp)).to_dict()

    @r.route("GET", "/chains/{fp}/tx")
    def tx(payload, query, fp):
        rows = rep.query(_fp(fp), _filter_from_query(query))
        return {"rows": [{"height": x.height, "position": x.position, "stx": b64e(x.stx.encode())} for x in rows]}

    @r.route("GET", "/chains/{fp}/summary")
    def summary(payload, query, fp):
        return rep.summarize(_fp(fp), query.get("bucket") or "month").to_dict()

    @r.route("GET", "/chains/{fp}/export")
    def export_(payload, query, fp):
        fmt = query.get("format") or "csv"
        if query.get("kind", "tx") == "summary":
            result = rep.summarize(_fp(fp), query.get("bucket") or "month")
        else:
            result = rep.query(_fp(fp), _filter_from_query(query))
        return {"format": fmt, "content": export(result, fmt).decode("utf-8")}

    return r


class ReportingClient:
    def __init__(self, url, timeout=30):
        self.http = JsonClient(url, timeout)
        self._cert = None

    @property
    def certificate(self):
        if self._cert is None:
            data = self.http.get("/identity")["certificate"]
            self._cert = _cert(data) if data else None
        return self._cert

    @property
    def fingerprint(self):
        return self.certificate.fingerprint if self.certificate else None

    def verify_chain(self, chain_id, now=None):
        return IntegrityReport.from_dict(self.http.get(f"/chains/{Digest(chain_id).hex()}/verify"))

    def query(self, chain_id, filt=None):
        d = self.http.get(f"/chains/{Digest(chain_id).hex()}/tx", **_filter_to_query(filt))
        return [QueryRow(x["height"], x["position"], SignedTransaction.decode(b64d(x["stx"]))) for x in d["rows"]]

    def summarize(self, chain_id, bucketing="month"):
        return SummaryReport.from_dict(self.http.get(f"/chains/{Digest(chain_id).hex()}/summary", bucket=bucketing))

    def export(self, result, fmt="csv"):
        return export(result, fmt)

    def export_remote(self, chain_id, fmt="csv", kind="tx", bucketing="month", filt=None):
        query = {"format": fmt, "kind": kind, "bucket": bucketing, **_filter_to_query(filt)}
        return self.http.get(f"/chains/{Digest(chain_id).hex()}/export", **query)["content"].encode("utf-8")


# --------------------------------------------------------------------- feed


def feed_router(feed):
    r = Router("feed")

    @r.route("GET", "/institutions")
    def ids(payload, query):
        return {"institutions": feed.ids()}

    @r.route("GET", "/institutions/{iid}")
    def info(payload, query, iid):
        d = feed.info(iid)
        d["public_key"] = b64e(d["public_key"])
        d["certificate"] = b64e(d["certificate"].encode()) if d["certificate"] else None
        return d

    @r.route("PUT", "/institutions/{iid}/certificate")
    def install(payload, query, iid):
        feed.install_certificate(iid, _cert(payload.get("certificate")))
        return {"ok": True}

    @r.route("GET", "/institutions/{iid}/transactions")
    def transactions(payload, query, iid):
        batch = feed.transactions(iid, _int(query.get("since"), "since", 0), _int(query.get("limit"), "limit", 100))
        return {"transactions": [{"tx": b64e(tx.encode()), "institution_sig": b64e(sig)} for tx, sig in batch]}

    return r


class FeedClient:
    def __init__(self, url, timeout=30):
        self.http = JsonClient(url, timeout)

    def ids(self):
        return self.http.get("/institutions")["institutions"]

    def info(self, institution_id):
        d = self.http.get(f"/institutions/{institution_id}")
        d["public_key"] = b64d(d["public_key"])
        d["certificate"] = _cert(d["certificate"]) if d["certificate"] else None
        return d

    def install_certificate(self, institution_id, certificate):
        self.http.put(f"/institutions/{institution_id}/certificate", {"certificate": b64e(certificate.encode())})

    def transactions(self, institution_id, since, limit):
        d = self.http.get(f"/institutions/{institution_id}/transactions", since=since, limit=limit)
        return [(FinancialTransaction.decode(b64d(t["tx"])), b64d(t["institution_sig"])) for t in d["transactions"]]
