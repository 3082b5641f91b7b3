"""Blockchain Management Service: the only door to a customer's chain.

The gateway keeps a registry (customer fingerprint -> backend, block
creator, reporting services) in an append-only journal, routes reads to
the chain's storage backend, forwards submissions to the registered block
creator, and accepts appends only from that block creator.
"""

import base64
import logging
import threading
from dataclasses import dataclass, replace
from pathlib import Path

from .crypto import DIGEST_SIZE, Digest
from .encoding import Reader, Writer
from .errors import (
    AlreadyRegistered,
    DecodeError,
    HeightGap,
    InvalidGenesis,
    LinkMismatch,
    NotAuthorized,
    OutOfRange,
    TransportError,
    UnknownChain,
)
from .ledger import verify_block
from .model import Block
from .replay import ChainFault, ChainState
from .store import migrate, open_backend

logger = logging.getLogger(__name__)

TAG_REGISTRATION = 0x50


@dataclass(frozen=True)
class ChainRegistration:
    customer_fingerprint: Digest
    backend: str
    bcs_fingerprint: Digest
    reporting_fingerprints: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "customer_fingerprint", Digest(self.customer_fingerprint))
        object.__setattr__(self, "bcs_fingerprint", Digest(self.bcs_fingerprint))
        object.__setattr__(self, "reporting_fingerprints", frozenset(Digest(f) for f in self.reporting_fingerprints))

    def encode(self):
        w = Writer()
        w.u8(TAG_REGISTRATION)
        w.fixed(self.customer_fingerprint, DIGEST_SIZE)
        w.text(self.backend)
        w.fixed(self.bcs_fingerprint, DIGEST_SIZE)
        fps = sorted(self.reporting_fingerprints)
        w.u32(len(fps))
        for fp in fps:
            w.fixed(fp, DIGEST_SIZE)
        return w.getvalue()

    @classmethod
    def decode(cls, data):
        r = Reader(data)
        r.expect_tag(TAG_REGISTRATION)
        customer = Digest(r.fixed(DIGEST_SIZE))
        backend = r.text()
        bcs = Digest(r.fixed(DIGEST_SIZE))
        count = r.u32()
        fps = [Digest(r.fixed(DIGEST_SIZE)) for _ in range(count)]
        r.finish()
        if fps != sorted(set(fps)):
            raise DecodeError("reporting fingerprints unsorted or duplicated")
        return cls(customer, backend, bcs, frozenset(fps))


class _Chain:
    def __init__(self, registration, backend):
        self.registration = registration
        self.backend = backend
        self.state = None
        self.write_lock = threading.Lock()


class Gateway:
    def __init__(self, registry_path=None, durable=True):
        self.registry_path = Path(registry_path) if registry_path else None
        self.durable = durable
        self._chains = {}
        self._bcs = {}
        self._lock = threading.Lock()
        if self.registry_path is not None and self.registry_path.exists():
            self._load_registry()

    # ---------------------------------------------------------- registry

    def _load_registry(self):
        latest = {}
        for lineno, line in enumerate(self.registry_path.read_text(encoding="ascii").splitlines(), 1):
            if not line.strip():
                continue
            try:
                reg = ChainRegistration.decode(base64.b64decode(line))
            except (ValueError, DecodeError):
                logger.warning("skipping malformed registry line %d", lineno)
                continue
            latest[reg.customer_fingerprint] = reg
        for fp, reg in latest.items():
            if reg.backend.startswith("mem"):
                logger.warning("chain %s was held in memory and is gone", fp.short())
                continue
            self._chains[fp] = _Chain(reg, open_backend(reg.backend, self.durable))

    def _journal(self, registration):
        if self.registry_path is None:
            return
        self.registry_path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.registry_path, "a", encoding="ascii") as fh:
            fh.write(base64.b64encode(registration.encode()).decode() + "\n")

    def connect_bcs(self, fingerprint, handle):
        """Tell the gateway how to reach the block creator with ``fingerprint``."""
        self._bcs[Digest(fingerprint)] = handle

    def chains(self):
        return sorted(self._chains)

    def _chain(self, chain_id):
        try:
            return self._chains[Digest(chain_id)]
        except (KeyError, ValueError):
            raise UnknownChain("no chain registered under this fingerprint", chain=bytes(chain_id).hex()) from None

    def registration(self, chain_id):
        return self._chain(chain_id).registration

    # ---------------------------------------------------------- operations

    def register_chain(self, registration, genesis):
        fp = registration.customer_fingerprint
        result = verify_block(None, genesis)
        if not result:
            raise InvalidGenesis(f"genesis does not verify: {result.reason}", reason=result.reason)
        if genesis.entries[0].fingerprint != fp:
            raise InvalidGenesis("genesis customer certificate does not match the registration")
        with self._lock:
            if fp in self._chains:
                raise AlreadyRegistered("chain already registered", chain=fp.hex())
            backend = open_backend(registration.backend, self.durable)
            if backend.length() == 0:
                backend.append(genesis)
            elif backend.get_bytes(0) != genesis.encode():
                raise InvalidGenesis("backend already holds a different chain")
            else:
                logger.info("adopting existing chain of length %d for %s", backend.length(), fp.short())
            self._journal(registration)
            self._chains[fp] = _Chain(registration, backend)
        return fp

    def _bcs_for(self, chain):
        handle = self._bcs.get(chain.registration.bcs_fingerprint)
        if handle is None:
            raise TransportError("registered block creator is not reachable")
        return handle

    def submit_transaction(self, chain_id, tx, institution_sig, customer_sig, now=None):
        chain = self._chain(chain_id)
        return self._bcs_for(chain).submit(chain.registration.customer_fingerprint, tx, institution_sig, customer_sig, now=now)

    def submit_entry(self, chain_id, entry, now=None):
        chain = self._chain(chain_id)
        return self._bcs_for(chain).submit_entry(chain.registration.customer_fingerprint, entry, now=now)

    def _replayed(self, chain):
        if chain.state is None:
            state = ChainState()
            backend = chain.backend
            for h in range(backend.length()):
                try:
                    state.apply(Block.decode(backend.get_bytes(h)))
                except (DecodeError, ChainFault) as exc:
                    raise LinkMismatch(f"stored chain fails verification at height {h}", height=h) from exc
            chain.state = state
        return chain.state

    def append_block(self, chain_id, block, presenter):
        chain = self._chain(chain_id)
        if Digest(presenter) != chain.registration.bcs_fingerprint:
            raise NotAuthorized("only the registered block creator may append", presenter=bytes(presenter).hex())
        with chain.write_lock:
            state = self._replayed(chain)
            if block.header.height != state.length:
                raise HeightGap(
                    f"block height {block.header.height} does not extend length {state.length}",
                    expected=state.length,
                    got=block.header.height,
                )
            try:
                new_state = state.applied(block)
            except ChainFault as exc:
                raise LinkMismatch(f"block rejected: {exc.reason}", reason=exc.reason) from exc
            length = chain.backend.append(block)
            chain.state = new_state
            return length

    def length(self, chain_id):
        return self._chain(chain_id).backend.length()

    def read_bytes(self, chain_id, height):
        backend = self._chain(chain_id).backend
        data = backend.get_bytes(height) if height >= 0 else None
        if data is None:
            raise OutOfRange(f"height {height} is outside the chain", height=height, length=backend.length())
        return data

    def read(self, chain_id, height):
        return Block.decode(self.read_bytes(chain_id, height))

    def head(self, chain_id):
        backend = self._chain(chain_id).backend
        n = backend.length()
        return Block.decode(backend.get_bytes(n - 1)).header

    def switch_backend(self, chain_id, descriptor):
        chain = self._chain(chain_id)
        with chain.write_lock:
            target = open_backend(descriptor, self.durable)
            report = migrate(chain.backend, target)
            registration = replace(chain.registration, backend=descriptor)
            self._journal(registration)
            # one attribute store each: readers see the old pair or the new one
            chain.backend = target
            chain.registration = registration
            return report
