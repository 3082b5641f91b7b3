"""Pluggable block storage.

A backend holds the canonical bytes of each block, indexed by height.
Appends are verified against the current head before anything is written,
so a store can only ever grow by a correctly linked block.

Backend descriptors are ``mem:`` and ``file:<path>``.
"""

import logging
import os
import re
import struct
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path

from .crypto import DIGEST_SIZE, Digest
from .errors import (
    CorruptLayout,
    DecodeError,
    DestinationNotEmpty,
    HeightGap,
    IoFailure,
    LinkMismatch,
    SourceCorrupt,
)
from .ledger import BAD_HEIGHT, check_link, verify_block
from .model import Block, Certificate

logger = logging.getLogger(__name__)

_BLOCK_NAME = re.compile(r"^(\d{8})\.blk$")


class StorageBackend(ABC):
    """Append-only block store. Subclasses provide raw byte storage."""

    descriptor = None

    def __init__(self):
        self._lock = threading.Lock()
        self._head = None

    @abstractmethod
    def length(self):
        ...

    @abstractmethod
    def get_bytes(self, height):
        """Exact stored bytes of block ``height``, or None when out of range."""

    @abstractmethod
    def _store(self, height, data, block):
        ...

    def get(self, height):
        data = self.get_bytes(height)
        return None if data is None else Block.decode(data)

    def head(self):
        n = self.length()
        if n == 0:
            return None
        if self._head is None or self._head.height != n - 1:
            self._head = Block.decode(self.get_bytes(n - 1)).header
        return self._head

    def append(self, block):
        """Verify ``block`` against the head and store it; returns the new length."""
        with self._lock:
            n = self.length()
            if block.header.height != n:
                raise HeightGap(
                    f"block height {block.header.height} does not extend length {n}",
                    expected=n,
                    got=block.header.height,
                )
            if n == 0:
                result = verify_block(None, block)
            else:
                try:
                    prev = self.head()
                except DecodeError as exc:
                    raise LinkMismatch("stored head is unreadable", reason=str(exc)) from exc
                result = check_link(prev, block)
            if not result:
                if result.reason == BAD_HEIGHT:
                    raise HeightGap("height check failed", reason=result.reason)
                raise LinkMismatch(f"block does not verify against head: {result.reason}", reason=result.reason)
            self._store(n, block.encode(), block)
            self._head = block.header
            return n + 1

    def blocks(self):
        for h in range(self.length()):
            yield self.get(h)

    def __repr__(self):
        return f"{type(self).__name__}({self.descriptor!r}, length={self.length()})"


class MemoryBackend(StorageBackend):
    descriptor = "mem:"

    def __init__(self):
        super().__init__()
        self._blocks = []

    def length(self):
        return len(self._blocks)

    def get_bytes(self, height):
        if 0 <= height < len(self._blocks):
            return self._blocks[height]
        return None

    def _store(self, height, data, block):
        self._blocks.append(data)

    # test hook: simulate a storage provider altering data at rest
    def overwrite(self, height, data):
        self._blocks[height] = bytes(data)
        self._head = None


def _atomic_write(path, data, durable=True):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        if durable:
            os.fsync(fh.fileno())
    os.replace(tmp, path)


class FileBackend(StorageBackend):
    """Directory layout: ``blocks/%08d.blk``, ``HEAD`` (u64 length), ``chain.meta``."""

    def __init__(self, path, durable=True):
        super().__init__()
        self.path = Path(path)
        self.descriptor = f"file:{self.path}"
        self.durable = durable
        self._blocks_dir = self.path / "blocks"
        self._head_file = self.path / "HEAD"
        self._meta_file = self.path / "chain.meta"
        try:
            self._length = self._open_layout()
        except OSError as exc:
            raise IoFailure(f"cannot open {self.path}: {exc}") from exc

    def _block_path(self, height):
        return self._blocks_dir / f"{height:08d}.blk"

    def _open_layout(self):
        self._blocks_dir.mkdir(parents=True, exist_ok=True)
        heights = []
        for entry in self._blocks_dir.iterdir():
            if entry.name.endswith(".tmp"):
                entry.unlink()
                continue
            m = _BLOCK_NAME.match(entry.name)
            if not m:
                raise CorruptLayout(f"unexpected file in blocks/: {entry.name}")
            heights.append(int(m.group(1)))
        heights.sort()
        if heights != list(range(len(heights))):
            raise CorruptLayout("block files are not contiguous from 00000000", heights=heights)
        count = len(heights)
        if not self._head_file.exists():
            if count:
                raise CorruptLayout("HEAD missing but blocks present")
            _atomic_write(self._head_file, struct.pack(">Q", 0), self.durable)
            return 0
        raw = self._head_file.read_bytes()
        if len(raw) != 8:
            raise CorruptLayout("HEAD is not 8 bytes")
        head = struct.unpack(">Q", raw)[0]
        if count == head + 1:
            # block file landed but HEAD never moved: an interrupted append
            logger.warning("rolling back uncommitted block %d in %s", head, self.path)
            self._block_path(head).unlink()
            count = head
        if count != head:
            raise CorruptLayout("HEAD does not match block count", head=head, files=count)
        if count and not self._meta_file.exists():
            raise CorruptLayout("chain.meta missing")
        return count

    def length(self):
        return self._length

    def get_bytes(self, height):
        if not 0 <= height < self._length:
            return None
        try:
            return self._block_path(height).read_bytes()
        except OSError as exc:
            raise IoFailure(f"cannot read block {height}: {exc}") from exc

    def _store(self, height, data, block):
        try:
            if height == 0:
                customer, uas = block.entries[0], block.entries[1]
                _atomic_write(self._meta_file, customer.fingerprint + uas.fingerprint, self.durable)
            _atomic_write(self._block_path(height), data, self.durable)
            _atomic_write(self._head_file, struct.pack(">Q", height + 1), self.durable)
        except OSError as exc:
            raise IoFailure(f"cannot write block {height}: {exc}") from exc
        self._length = height + 1

    def meta(self):
        """(customer fingerprint, UAS fingerprint), or None for an empty store."""
        if not self._meta_file.exists():
            return None
        raw = self._meta_file.read_bytes()
        if len(raw) != 2 * DIGEST_SIZE:
            raise CorruptLayout("chain.meta has the wrong size")
        return Digest(raw[:DIGEST_SIZE]), Digest(raw[DIGEST_SIZE:])


def open_backend(descriptor, durable=True):
    if descriptor == "mem:" or descriptor == "mem":
        return MemoryBackend()
    if descriptor.startswith("file:"):
        path = descriptor[len("file:") :]
        if not path:
            raise ValueError("file: descriptor needs a path")
        return FileBackend(path, durable=durable)
    raise ValueError(f"unknown backend descriptor: {descriptor!r}")


def append_verified(backend, block):
    return backend.append(block)


@dataclass(frozen=True)
class MigrationReport:
    blocks_moved: int
    head_digest: Digest = None

    def to_dict(self):
        return {
            "blocks_moved": self.blocks_moved,
            "head_digest": self.head_digest.hex() if self.head_digest else None,
        }


def verified_blocks(backend):
    """Decode and link-check every block; raises SourceCorrupt at the first bad height."""
    certs = {}
    prev = None
    out = []
    for height in range(backend.length()):
        try:
            block = Block.decode(backend.get_bytes(height))
        except DecodeError as exc:
            raise SourceCorrupt(f"block {height} does not decode", height=height, reason="bad-encoding") from exc
        if block.header.height != height:
            raise SourceCorrupt(f"block {height} has the wrong height", height=height, reason=BAD_HEIGHT)
        result = verify_block(prev, block, certs)
        if not result:
            raise SourceCorrupt(f"block {height}: {result.reason}", height=height, reason=result.reason)
        for entry in block.entries:
            if isinstance(entry, Certificate):
                certs.setdefault(entry.fingerprint, entry)
        prev = block.header
        out.append(block)
    return out


def migrate(src, dst):
    """Copy a verified chain from ``src`` into the empty ``dst``."""
    if dst.length() != 0:
        raise DestinationNotEmpty(f"{dst.descriptor} already holds {dst.length()} blocks")
    blocks = verified_blocks(src)
    for block in blocks:
        dst.append(block)
    head = dst.head()
    return MigrationReport(len(blocks), head.digest() if head else None)
