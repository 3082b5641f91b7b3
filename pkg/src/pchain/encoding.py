"""Deterministic tag-length-value primitives.

Layout rules:
  * integers are fixed width, big-endian (u8, u32, u64, signed i64)
  * variable byte strings and UTF-8 strings carry a u32 length prefix
  * fixed-size values (digests, keys, signatures) are written raw
  * maps are a u32 count followed by (key, value) string pairs sorted by
    the key's UTF-8 bytes; duplicate or unsorted keys are rejected on read

Every domain type starts with a one-byte type tag, so encodings of
different types never collide.
"""

import struct

from .errors import DecodeError

U32_MAX = 2**32 - 1
U64_MAX = 2**64 - 1
I64_MIN = -(2**63)
I64_MAX = 2**63 - 1


class Writer:
    def __init__(self):
        self._parts = []

    def u8(self, value):
        self._parts.append(struct.pack(">B", value))
        return self

    def u32(self, value):
        self._parts.append(struct.pack(">I", value))
        return self

    def u64(self, value):
        if not 0 <= value <= U64_MAX:
            raise ValueError(f"u64 out of range: {value}")
        self._parts.append(struct.pack(">Q", value))
        return self

    def i64(self, value):
        if not I64_MIN <= value <= I64_MAX:
            raise ValueError(f"i64 out of range: {value}")
        self._parts.append(struct.pack(">q", value))
        return self

    def fixed(self, data, size):
        if len(data) != size:
            raise ValueError(f"expected {size} bytes, got {len(data)}")
        self._parts.append(bytes(data))
        return self

    def blob(self, data):
        self.u32(len(data))
        self._parts.append(bytes(data))
        return self

    def text(self, value):
        return self.blob(value.encode("utf-8"))

    def str_map(self, mapping):
        items = sorted((k.encode("utf-8"), v.encode("utf-8")) for k, v in mapping.items())
        self.u32(len(items))
        for k, v in items:
            self.blob(k).blob(v)
        return self

    def raw(self, data):
        self._parts.append(bytes(data))
        return self

    def getvalue(self):
        return b"".join(self._parts)


class Reader:
    def __init__(self, data):
        self._data = memoryview(bytes(data))
        self._pos = 0

    @property
    def remaining(self):
        return len(self._data) - self._pos

    def _take(self, n):
        if n > self.remaining:
            raise DecodeError("length overrun", offset=self._pos, wanted=n)
        chunk = self._data[self._pos : self._pos + n].tobytes()
        self._pos += n
        return chunk

    def u8(self):
        return self._take(1)[0]

    def peek_u8(self):
        if not self.remaining:
            raise DecodeError("length overrun", offset=self._pos, wanted=1)
        return self._data[self._pos]

    def u32(self):
        return struct.unpack(">I", self._take(4))[0]

    def u64(self):
        return struct.unpack(">Q", self._take(8))[0]

    def i64(self):
        return struct.unpack(">q", self._take(8))[0]

    def fixed(self, size):
        return self._take(size)

    def blob(self):
        return self._take(self.u32())

    def text(self):
        raw = self.blob()
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError("invalid UTF-8") from exc

    def str_map(self):
        count = self.u32()
        out = {}
        last = None
        for _ in range(count):
            k = self.blob()
            v = self.blob()
            if last is not None and k <= last:
                raise DecodeError("map keys unsorted or duplicated")
            last = k
            try:
                out[k.decode("utf-8")] = v.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise DecodeError("invalid UTF-8 in map") from exc
        return out

    def expect_tag(self, tag):
        got = self.u8()
        if got != tag:
            raise DecodeError("bad tag", expected=tag, got=got)

    def finish(self):
        if self.remaining:
            raise DecodeError("trailing bytes", count=self.remaining)
