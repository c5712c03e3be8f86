"""Versioned binary container used for checkpoints and task-distribution caches.

Layout, all big-endian:

    magic(4s) version(H) checksum(H) payload_len(I) payload

The checksum covers the payload only. Payload fields are written with
`BlobWriter` and read back in the same order with `BlobReader`.
"""
import struct

import numpy as np

from checksum import compute_checksum, verify_checksum
from constants import CONTAINER_HEADER, CONTAINER_HEADER_SIZE
from errors import ConsistencyError, FormatError, LengthError


class Container:
    def __init__(self, magic, version, payload):
        self.magic = magic
        self.version = version
        self.payload = payload
        self.checksum = compute_checksum(payload)

    def serialize(self):
        header = struct.pack(CONTAINER_HEADER, self.magic, self.version, self.checksum, len(self.payload))
        return header + self.payload

    @staticmethod
    def deserialize(raw, magic, version):
        if len(raw) < CONTAINER_HEADER_SIZE:
            raise LengthError(f"container header truncated: {len(raw)} bytes")

        got_magic, got_version, checksum, length = struct.unpack(CONTAINER_HEADER, raw[:CONTAINER_HEADER_SIZE])
        if got_magic != magic:
            raise FormatError(f"bad magic {got_magic!r}, expected {magic!r}")
        if got_version != version:
            raise FormatError(f"unsupported version {got_version}, expected {version}")

        payload = raw[CONTAINER_HEADER_SIZE:]
        if len(payload) != length:
            raise LengthError(f"payload is {len(payload)} bytes, header says {length}")
        if not verify_checksum(payload, checksum):
            raise ConsistencyError("payload checksum mismatch")

        return Container(magic, version, payload)


class BlobWriter:
    def __init__(self):
        self.parts = []

    def u8(self, value):
        self.parts.append(struct.pack('!B', value))

    def u32(self, value):
        self.parts.append(struct.pack('!I', value))

    def f64(self, value):
        self.parts.append(struct.pack('!d', value))

    def text(self, value):
        raw = value.encode('utf-8')
        self.u32(len(raw))
        self.parts.append(raw)

    def array(self, arr, dtype):
        """ndim, dims, then raw big-endian values."""
        arr = np.asarray(arr)
        self.u8(arr.ndim)
        for dim in arr.shape:
            self.u32(dim)
        self.parts.append(arr.astype(np.dtype(dtype).newbyteorder('>')).tobytes())

    def getvalue(self):
        return b''.join(self.parts)


class BlobReader:
    def __init__(self, raw):
        self.raw = raw
        self.offset = 0

    def _take(self, n):
        if self.offset + n > len(self.raw):
            raise LengthError(f"need {n} bytes at offset {self.offset}, only {len(self.raw) - self.offset} left")
        chunk = self.raw[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def u8(self):
        return struct.unpack('!B', self._take(1))[0]

    def u32(self):
        return struct.unpack('!I', self._take(4))[0]

    def f64(self):
        return struct.unpack('!d', self._take(8))[0]

    def text(self):
        return self._take(self.u32()).decode('utf-8')

    def array(self, dtype):
        ndim = self.u8()
        shape = tuple(self.u32() for _ in range(ndim))
        be = np.dtype(dtype).newbyteorder('>')
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(self._take(count * be.itemsize), dtype=be)
        return data.astype(np.dtype(dtype)).reshape(shape)

    def done(self):
        if self.offset != len(self.raw):
            raise ConsistencyError(f"{len(self.raw) - self.offset} trailing bytes in payload")


def write_container(path, magic, version, payload):
    with open(path, 'wb') as f:
        f.write(Container(magic, version, payload).serialize())


def read_container(path, magic, version):
    with open(path, 'rb') as f:
        raw = f.read()
    return Container.deserialize(raw, magic, version).payload
