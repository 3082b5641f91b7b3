"""Workspace layout, configuration and service wiring.

A workspace ("home") holds one customer's view of the system::

    pchain.conf          flat key = value configuration
    keys/*.key           canonical key files, mode 0600
    certs/*.cert         certificates issued so far
    state.json           logical clock, chain id, feed cursors
    bcms/registry.journal, bcs/queues/, chain/   in-process service state

Each service is either built in-process from this workspace or reached
over HTTP at a configured URL. Either way the rest of the code sees the
same Python surface.
"""

import json
import os
import shlex
from dataclasses import dataclass, field
from pathlib import Path

from .api import (
    BcsClient,
    FeedClient,
    GatewayClient,
    ReportingClient,
    UasClient,
    bcs_router,
    feed_router,
    gateway_router,
    reporting_router,
    uas_router,
)
from .bcs import PERIODS, BlockCreationService, policy_from_config
from .crypto import SEED_SIZE, KeyPair
from .encoding import Reader, Writer
from .errors import ConfigError, DecodeError
from .feed import DEFAULT_START, KIND_PARAMS, FeedService, InstitutionProfile
from .gateway import Gateway
from .model import Certificate, Role
from .reporting import ReportingService
from .transport import serve
from .uas import DEFAULT_VALIDITY, UserAccountService

CONFIG_NAME = "pchain.conf"
SERVICES = ("bcms", "uas", "bcs", "reporting", "feeds")
INPROC = "inproc"
TAG_KEYFILE = 0x60

CONFIG_HELP = """\
configuration keys (pchain.conf, one "key = value" per line, # starts a comment):
  customer = NAME             display name on the customer certificate
  seed = INT                  derive every key from this seed (reproducible runs)
  backend = DESCRIPTOR        chain storage at init: file:PATH (relative to home) or mem:
  start_time = INT            initial logical clock, UTC seconds
  validity = INT              certificate validity window, seconds
  policy.max_count = INT      seal after this many queued entries
  policy.max_bytes = INT      seal before queued entries exceed this many bytes
  policy.period = day|month|quarter   seal at calendar period ends
  bcms|uas|bcs|reporting|feeds = inproc|http://HOST:PORT
  bind = HOST:PORT            first port used by --serve (0 picks free ports)
  institution.ID = kind=bank|credit-card|investment seed=INT [rate=INT] [currency=CCC] [name=TEXT]
"""

DEFAULT_INSTITUTIONS = {
    "bank": "kind=bank seed=101 rate=2 currency=USD name=First-Bank",
    "card": "kind=credit-card seed=202 rate=4 currency=USD name=Card-Co",
    "broker": "kind=investment seed=303 rate=1 currency=USD name=Broker-Inc",
}


# ----------------------------------------------------------------- config


@dataclass
class Topology:
    home: Path
    customer: str = "customer"
    seed: int = None
    backend: str = "file:chain"
    start_time: int = DEFAULT_START
    validity: int = DEFAULT_VALIDITY
    policy: dict = field(default_factory=lambda: {"max_count": 16, "max_bytes": 1 << 20})
    endpoints: dict = field(default_factory=lambda: dict.fromkeys(SERVICES, INPROC))
    institutions: dict = field(default_factory=dict)  # id -> {kind, seed, rate, currency, name}
    bind: str = "127.0.0.1:0"

    @property
    def in_process(self):
        return all(v == INPROC for v in self.endpoints.values())

    def backend_descriptor(self):
        if self.backend.startswith("file:"):
            path = Path(self.backend[5:])
            return "file:" + str(path if path.is_absolute() else self.home / path)
        return self.backend

    def flush_policy(self):
        return policy_from_config(**self.policy)

    def profiles(self):
        return {
            iid: InstitutionProfile(
                name=fields.get("name", iid),
                kind=fields["kind"],
                seed=fields["seed"],
                rate=fields.get("rate", 4),
                currency=fields.get("currency", "USD"),
                start=self.start_time,
            )
            for iid, fields in self.institutions.items()
        }

    def render(self):
        lines = [f"customer = {self.customer}"]
        if self.seed is not None:
            lines.append(f"seed = {self.seed}")
        lines += [f"backend = {self.backend}", f"start_time = {self.start_time}", f"validity = {self.validity}"]
        lines += [f"policy.{k} = {v}" for k, v in sorted(self.policy.items())]
        lines += [f"{name} = {self.endpoints[name]}" for name in SERVICES]
        lines.append(f"bind = {self.bind}")
        for iid, fields in sorted(self.institutions.items()):
            lines.append(f"institution.{iid} = " + " ".join(f"{k}={fields[k]}" for k in sorted(fields)))
        return "\n".join(lines) + "\n"


def _int(key, value):
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{key} must be an integer", key=key) from None


def _institution(iid, text):
    fields = {}
    try:
        parts = shlex.split(text)
    except ValueError as exc:
        raise ConfigError(f"institution.{iid}: {exc}", key=f"institution.{iid}") from None
    for part in parts:
        k, sep, v = part.partition("=")
        if not sep or k not in ("kind", "seed", "rate", "currency", "name"):
            raise ConfigError(f"institution.{iid}: bad field {part!r}", key=f"institution.{iid}")
        fields[k] = _int(f"institution.{iid}.{k}", v) if k in ("seed", "rate") else v
    if fields.get("kind") not in KIND_PARAMS:
        raise ConfigError(f"institution.{iid}: kind must be one of {sorted(KIND_PARAMS)}", key=f"institution.{iid}")
    if "seed" not in fields:
        raise ConfigError(f"institution.{iid}: seed is required", key=f"institution.{iid}")
    return fields


def parse_config(text, home):
    topo = Topology(Path(home))
    topo.policy = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected key = value", line=lineno)
        if key == "customer":
            topo.customer = value
        elif key in ("seed", "start_time", "validity"):
            setattr(topo, key, _int(key, value))
        elif key == "backend":
            if not (value.startswith("file:") or value.startswith("mem")):
                raise ConfigError("backend must be file:PATH or mem:", key=key)
            topo.backend = value
        elif key in ("policy.max_count", "policy.max_bytes"):
            n = _int(key, value)
            if n < 1:
                raise ConfigError(f"{key} must be >= 1", key=key)
            topo.policy[key[7:]] = n
        elif key == "policy.period":
            if value not in PERIODS:
                raise ConfigError(f"policy.period must be one of {PERIODS}", key=key)
            topo.policy["period"] = value
        elif key in SERVICES:
            if value != INPROC and not value.startswith(("http://", "https://")):
                raise ConfigError(f"{key} must be inproc or an http(s) URL", key=key)
            topo.endpoints[key] = value
        elif key == "bind":
            host, _, port = value.rpartition(":")
            _int(key, port)
            topo.bind = value
        elif key.startswith("institution."):
            iid = key[len("institution.") :]
            if not iid or "/" in iid:
                raise ConfigError(f"bad institution id {iid!r}", key=key)
            topo.institutions[iid] = _institution(iid, value)
        else:
            raise ConfigError(f"unknown configuration key {key!r}", key=key)
    if not topo.policy:
        topo.policy = {"max_count": 16, "max_bytes": 1 << 20}
    return topo


def load_topology(home, config=None):
    home = Path(home)
    path = Path(config) if config else home / CONFIG_NAME
    if not path.exists():
        raise ConfigError(f"no configuration at {path}; run init first", path=str(path))
    return parse_config(path.read_text(encoding="utf-8"), home)


def default_topology(home, customer="customer", seed=None, backend="file:chain"):
    topo = Topology(Path(home), customer=customer, seed=seed, backend=backend)
    topo.institutions = {iid: _institution(iid, text) for iid, text in DEFAULT_INSTITUTIONS.items()}
    return topo


# --------------------------------------------------------------- key store


def encode_keyfile(label, keypair):
    w = Writer()
    w.u8(TAG_KEYFILE)
    w.text(label)
    w.fixed(keypair.seed, SEED_SIZE)
    return w.getvalue()


def decode_keyfile(data):
    r = Reader(data)
    r.expect_tag(TAG_KEYFILE)
    label = r.text()
    seed = r.fixed(SEED_SIZE)
    r.finish()
    return label, KeyPair.from_seed(seed)


class KeyStore:
    """Directory of key files and certificates. Keys are not encrypted at rest."""

    def __init__(self, home, seed=None):
        self.home = Path(home)
        self.seed = seed

    def _key_path(self, label):
        return self.home / "keys" / f"{label}.key"

    def _cert_path(self, label):
        return self.home / "certs" / f"{label}.cert"

    def has_key(self, label):
        return self._key_path(label).exists()

    def key(self, label, create=True):
        path = self._key_path(label)
        if path.exists():
            try:
                stored, keypair = decode_keyfile(path.read_bytes())
            except DecodeError as exc:
                raise ConfigError(f"key file {path} is corrupt", path=str(path)) from exc
            if stored != label:
                raise ConfigError(f"key file {path} holds {stored!r}", path=str(path))
            return keypair
        if not create:
            raise ConfigError(f"no key for {label!r}; run init first", label=label)
        keypair = KeyPair.derive(f"{self.seed}:{label}") if self.seed is not None else KeyPair.generate()
        path.parent.mkdir(parents=True, exist_ok=True)
        os.chmod(path.parent, 0o700)
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o600)
        with os.fdopen(fd, "wb") as fh:
            fh.write(encode_keyfile(label, keypair))
        return keypair

    def cert(self, label):
        path = self._cert_path(label)
        if not path.exists():
            return None
        try:
            return Certificate.decode(path.read_bytes())
        except DecodeError as exc:
            raise ConfigError(f"certificate file {path} is corrupt", path=str(path)) from exc

    def save_cert(self, label, cert):
        path = self._cert_path(label)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_bytes(cert.encode())
        os.replace(tmp, path)


# -------------------------------------------------------------- workspace


class WorkspaceState:
    """Small JSON document: logical clock, chain id, per-institution cursors."""

    def __init__(self, home, start_time):
        self.path = Path(home) / "state.json"
        self.data = {"clock": start_time, "chain": None, "cursors": {}, "enrolled": {}}
        if self.path.exists():
            self.data.update(json.loads(self.path.read_text(encoding="utf-8")))

    def save(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, self.path)

    @property
    def clock(self):
        return self.data["clock"]

    def advance(self, t):
        self.data["clock"] = max(self.data["clock"], int(t))
        return self.data["clock"]


# ----------------------------------------------------------------- wiring


@dataclass
class Services:
    gateway: object
    uas: object
    bcs: object
    reporting: object
    feed: object
    servers: list = field(default_factory=list)

    def close(self):
        for server in self.servers:
            server.close()
        self.servers.clear()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _service_cert(uas, keys, label, role, keypair, now, validity):
    cert = keys.cert(label)
    if cert is None or cert.public_key != keypair.public_key or cert.issuer_fingerprint != uas.fingerprint:
        cert = uas.issue_certificate(label, role, keypair.public_key, validity, now)
        keys.save_cert(label, cert)
    return cert


def build_services(topo, clock=None):
    """Instantiate or connect every service named in ``topo``.

    In-process services keep their state under the workspace and get their
    identities (keys, certificates) created on first use.
    """
    home = topo.home
    keys = KeyStore(home, topo.seed)
    ep = topo.endpoints
    now = topo.start_time

    if ep["bcms"] == INPROC:
        gateway = Gateway(home / "bcms" / "registry.journal")
    else:
        gateway = GatewayClient(ep["bcms"])

    if ep["uas"] == INPROC:
        uas_key = keys.key("uas")
        uas_cert = keys.cert("uas")
        if uas_cert is None or uas_cert.public_key != uas_key.public_key:
            uas = UserAccountService.bootstrap(uas_key, now, "uas", topo.validity, gateway)
            keys.save_cert("uas", uas.certificate)
        else:
            uas = UserAccountService(uas_key, uas_cert, gateway)
    else:
        uas = UasClient(ep["uas"])

    if ep["bcs"] == INPROC:
        bcs_key = keys.key("bcs")
        bcs_cert = _service_cert(uas, keys, "bcs", Role.BCS, bcs_key, now, topo.validity)
        bcs = BlockCreationService(
            bcs_key,
            bcs_cert,
            gateway,
            policy=topo.flush_policy(),
            journal_dir=home / "bcs" / "queues",
            clock=clock,
        )
    else:
        bcs = BcsClient(ep["bcs"])

    if ep["bcms"] == INPROC:
        gateway.connect_bcs(bcs.fingerprint, bcs)

    if ep["reporting"] == INPROC:
        rep_key = keys.key("reporting")
        rep_cert = _service_cert(uas, keys, "reporting", Role.REPORTING, rep_key, now, topo.validity)
        reporting = ReportingService(gateway, rep_cert, clock=clock)
    else:
        reporting = ReportingClient(ep["reporting"])

    if ep["feeds"] == INPROC:
        profiles = topo.profiles()
        for iid, profile in profiles.items():
            profile.certificate = keys.cert(f"inst-{iid}")
        feed = FeedService(profiles)
    else:
        feed = FeedClient(ep["feeds"])

    return Services(gateway, uas, bcs, reporting, feed)


def serve_all(topo, clock=None):
    """Build the in-process services of ``topo`` and expose each over HTTP.

    Returns the Services with ``servers`` populated and a mapping of
    service name to URL, ready to paste into a client configuration.
    """
    services = build_services(topo, clock)
    host, _, port = topo.bind.rpartition(":")
    port = int(port)
    routers = {
        "bcms": gateway_router(services.gateway),
        "uas": uas_router(services.uas),
        "bcs": bcs_router(services.bcs),
        "reporting": reporting_router(services.reporting),
        "feeds": feed_router(services.feed),
    }
    urls = {}
    try:
        for i, name in enumerate(SERVICES):
            if topo.endpoints[name] != INPROC:
                continue
            server = serve(routers[name], host or "127.0.0.1", port + i if port else 0)
            services.servers.append(server)
            urls[name] = server.url
    except Exception:
        services.close()
        raise
    return services, urls
