"""The customer's side of the system: one object per workspace.

Every method is a thin sequence of service calls; whether those services
run in this process or behind HTTP makes no difference here.
"""

import logging
from pathlib import Path

from .crypto import Digest
from .errors import AlreadyRegistered, ConfigError, DuplicateExternalRef, NotPermitted, UnknownFingerprint
from .gateway import ChainRegistration
from .model import Scope
from .reporting import QueryFilter, export
from .topology import CONFIG_NAME, INPROC, KeyStore, WorkspaceState, build_services, default_topology, serve_all

logger = logging.getLogger(__name__)

DEMO_SEED = 7
DEMO_PULL_LIMIT = 20


class CustomerApp:
    def __init__(self, topo, services=None):
        self.topo = topo
        self.keys = KeyStore(topo.home, topo.seed)
        self.state = WorkspaceState(topo.home, topo.start_time)
        self.services = services or build_services(topo, clock=lambda: self.state.clock)

    # ------------------------------------------------------------ helpers

    @property
    def now(self):
        return self.state.clock

    @property
    def chain_id(self):
        chain = self.state.data["chain"]
        if chain is None:
            raise ConfigError("workspace has no chain yet; run init first")
        return Digest.from_hex(chain)

    def _institution_cert(self, iid):
        if iid not in self.topo.institutions:
            raise ConfigError(f"no institution {iid!r} in the configuration", institution=iid)
        cert = self.keys.cert(f"inst-{iid}")
        if cert is None:
            raise UnknownFingerprint(f"institution {iid!r} has not been enrolled", institution=iid)
        return cert

    def institution_fingerprint(self, ref):
        """Accept a configured institution id or a hex fingerprint."""
        if ref in self.topo.institutions:
            return self._institution_cert(ref).fingerprint
        try:
            return Digest.from_hex(ref)
        except ValueError:
            raise ConfigError(f"{ref!r} is neither an institution id nor a fingerprint") from None

    # ----------------------------------------------------------- commands

    def init(self):
        if self.state.data["chain"] is not None:
            raise AlreadyRegistered("workspace already holds a chain", chain=self.state.data["chain"])
        s = self.services
        customer_key = self.keys.key("customer")
        cert, genesis = s.uas.init_customer(
            self.topo.customer, customer_key.public_key, s.bcs.certificate, self.now, validity=self.topo.validity
        )
        reporting = {s.reporting.fingerprint} if s.reporting.fingerprint else set()
        registration = ChainRegistration(cert.fingerprint, self.topo.backend_descriptor(), s.bcs.fingerprint, reporting)
        chain = s.gateway.register_chain(registration, genesis)
        self.keys.save_cert("customer", cert)
        self.state.data["chain"] = chain.hex()
        self.state.save()
        return chain

    def enroll(self, iid):
        if iid not in self.topo.institutions:
            raise ConfigError(f"no institution {iid!r} in the configuration", institution=iid)
        s = self.services
        info = s.feed.info(iid)
        cert = s.uas.issue_institution_certificate(
            info["name"], info["public_key"], f"feed:{iid}", self.topo.validity, self.now
        )
        s.feed.install_certificate(iid, cert)
        self.keys.save_cert(f"inst-{iid}", cert)
        s.uas.grant(self.chain_id, cert, Scope.SUBMIT_TRANSACTIONS, self.now)
        s.bcs.flush_all(self.chain_id, now=self.now)
        self.state.data["enrolled"][iid] = cert.fingerprint.hex()
        self.state.save()
        return cert

    def revoke(self, iid):
        cert = self._institution_cert(iid)
        record, unknown = self.services.uas.revoke_flagged(
            self.chain_id, cert.fingerprint, Scope.SUBMIT_TRANSACTIONS, self.now
        )
        self.services.bcs.flush_all(self.chain_id, now=self.now)
        self.state.data["enrolled"].pop(iid, None)
        self.state.save()
        return record, unknown

    def pull(self, since=None, limit=DEMO_PULL_LIMIT):
        """Fetch new transactions from every enrolled institution and submit them.

        Batches are merged in occurred_at order; the logical clock follows
        each transaction, so blocks get deterministic timestamps.
        """
        s = self.services
        customer_key = self.keys.key("customer", create=False)
        batch = []
        for iid in sorted(self.state.data["enrolled"]):
            cursor = since if since is not None else self.state.data["cursors"].get(iid, 0)
            for tx, sig in s.feed.transactions(iid, cursor, limit):
                batch.append((tx.occurred_at, iid, tx, sig))
        batch.sort(key=lambda item: (item[0], item[1]))
        summary = {"accepted": 0, "duplicates": 0, "rejected": 0, "sealed": []}
        for occurred_at, iid, tx, sig in batch:
            now = self.state.advance(occurred_at)
            try:
                receipt = s.gateway.submit_transaction(
                    self.chain_id, tx, sig, customer_key.sign(tx.encode()), now=now
                )
            except DuplicateExternalRef:
                summary["duplicates"] += 1
            except NotPermitted as exc:
                logger.warning("%s: %s", iid, exc)
                summary["rejected"] += 1
            else:
                summary["accepted"] += 1
                summary["sealed"].extend(receipt.sealed)
            cursors = self.state.data["cursors"]
            cursors[iid] = max(cursors.get(iid, 0), occurred_at)
        for heights in s.bcs.tick(now=self.now).values():
            summary["sealed"].extend(heights)
        self.state.save()
        return summary

    def flush(self):
        return self.services.bcs.flush_all(self.chain_id, now=self.now)

    def verify(self):
        return self.services.reporting.verify_chain(self.chain_id, now=self.now)

    def query(self, filt=None):
        return self.services.reporting.query(self.chain_id, filt or QueryFilter())

    def summarize(self, bucketing="month"):
        return self.services.reporting.summarize(self.chain_id, bucketing)

    def migrate(self, descriptor, allow_volatile=False):
        if descriptor.startswith("mem") and self.topo.endpoints["bcms"] == INPROC and not allow_volatile:
            # the gateway dies with this process and would take the only copy with it
            raise ConfigError("a memory backend does not outlive an in-process gateway; run the gateway with --serve")
        if descriptor.startswith("file:"):
            path = Path(descriptor[5:])
            descriptor = "file:" + str(path if path.is_absolute() else self.topo.home / path)
        return self.services.gateway.switch_backend(self.chain_id, descriptor)

    def head(self):
        return self.services.gateway.head(self.chain_id)

    def block_file(self, height):
        """Path of a stored block, for file-backed chains in this process."""
        backend = self.services.gateway.registration(self.chain_id).backend
        if not backend.startswith("file:"):
            raise ConfigError("chain is not stored in files", backend=backend)
        return Path(backend[5:]) / "blocks" / f"{height:08d}.blk"

    def close(self):
        self.services.close()


def flip_byte(path, offset=None):
    """Flip every bit of one byte of ``path``; returns the offset used."""
    data = bytearray(Path(path).read_bytes())
    offset = len(data) // 2 if offset is None else offset
    data[offset] ^= 0xFF
    Path(path).write_bytes(bytes(data))
    return offset


def run_demo(home, networked=False, tamper=False, pull_limit=DEMO_PULL_LIMIT, seed=DEMO_SEED):
    """Scripted scenario: init, enroll three institutions, pull, flush, verify, report.

    Returns a dict with the head digest, the integrity report and the paths
    of the exported files. With ``tamper`` a byte of block 1 is flipped on
    disk before verification and no report is written.
    """
    home = Path(home)
    if (home / "state.json").exists():
        raise ConfigError(f"{home} already holds a workspace; the demo needs a fresh one")
    home.mkdir(parents=True, exist_ok=True)
    topo = default_topology(home, customer="demo-customer", seed=seed)
    (home / CONFIG_NAME).write_text(topo.render(), encoding="utf-8")

    server = None
    if networked:
        server, urls = serve_all(topo)
        client_topo = default_topology(home, customer="demo-customer", seed=seed)
        client_topo.endpoints = dict(urls)
        app = CustomerApp(client_topo)
    else:
        app = CustomerApp(topo)
    try:
        app.init()
        for iid in sorted(topo.institutions):
            app.enroll(iid)
        pulled = app.pull(limit=pull_limit)
        app.flush()
        head = app.head().digest().hex()
        tampered_at = None
        if tamper:
            tampered_at = 1
            chain_dir = Path(topo.backend_descriptor()[5:])
            flip_byte(chain_dir / "blocks" / f"{tampered_at:08d}.blk")
        report = app.verify()
        result = {
            "chain": app.chain_id.hex(),
            "head": head,
            "pulled": pulled,
            "integrity": report,
            "tampered_at": tampered_at,
            "report": None,
            "summary": None,
        }
        if report.ok:
            rows = app.query()
            (home / "report.csv").write_bytes(export(rows, "csv"))
            (home / "summary.csv").write_bytes(export(app.summarize("month"), "csv"))
            result["report"] = home / "report.csv"
            result["summary"] = home / "summary.csv"
        return result
    finally:
        app.close()
        if server is not None:
            server.close()

