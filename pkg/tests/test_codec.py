import sys
import os
import struct
import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from codec import BlobReader, BlobWriter, Container, read_container, write_container
from constants import CONTAINER_HEADER, CONTAINER_HEADER_SIZE
from errors import ConsistencyError, FormatError, LengthError

MAGIC = b'TEST'


def test_container_header_layout():
    """magic, version, checksum, payload length, then the payload."""
    raw = Container(MAGIC, 3, b'abc').serialize()
    magic, version, _, length = struct.unpack(CONTAINER_HEADER, raw[:CONTAINER_HEADER_SIZE])
    assert (magic, version, length) == (MAGIC, 3, 3)
    assert raw[CONTAINER_HEADER_SIZE:] == b'abc'


def test_container_empty_payload():
    raw = Container(MAGIC, 1, b'').serialize()
    assert Container.deserialize(raw, MAGIC, 1).payload == b''


def test_container_wrong_magic():
    raw = Container(MAGIC, 1, b'data').serialize()
    with pytest.raises(FormatError):
        Container.deserialize(raw, b'NOPE', 1)


def test_container_wrong_version():
    raw = Container(MAGIC, 2, b'data').serialize()
    with pytest.raises(FormatError):
        Container.deserialize(raw, MAGIC, 1)


def test_container_truncated():
    raw = Container(MAGIC, 1, b'some payload').serialize()
    with pytest.raises(LengthError):
        Container.deserialize(raw[:-1], MAGIC, 1)
    with pytest.raises(LengthError):
        Container.deserialize(raw[:5], MAGIC, 1)


def test_container_corrupted_payload():
    """Corrupted payload should fail the checksum."""
    raw = bytearray(Container(MAGIC, 1, b'original').serialize())
    raw[-1] ^= 0xff
    with pytest.raises(ConsistencyError):
        Container.deserialize(bytes(raw), MAGIC, 1)


def test_blob_fields_read_back_in_order():
    blob = BlobWriter()
    blob.u8(7)
    blob.u32(123456)
    blob.f64(-0.1)
    blob.text('cln0.weight')
    blob.array(np.arange(6, dtype=np.float64).reshape(2, 3) / 7, 'f8')
    blob.array(np.array([], dtype=np.int64), 'i8')
    reader = BlobReader(blob.getvalue())
    assert reader.u8() == 7
    assert reader.u32() == 123456
    assert reader.f64() == -0.1
    assert reader.text() == 'cln0.weight'
    arr = reader.array('f8')
    assert arr.shape == (2, 3)
    assert np.array_equal(arr, np.arange(6).reshape(2, 3) / 7)
    assert reader.array('i8').shape == (0,)
    reader.done()


def test_blob_reader_overrun_and_trailing_bytes():
    blob = BlobWriter()
    blob.u32(1)
    with pytest.raises(LengthError):
        BlobReader(blob.getvalue()).f64()
    reader = BlobReader(blob.getvalue() + b'\x00')
    reader.u32()
    with pytest.raises(ConsistencyError):
        reader.done()


def test_container_file_round_trip(tmp_path):
    path = tmp_path / 'blob.bin'
    write_container(path, MAGIC, 1, b'\x00\x01\x02')
    assert read_container(path, MAGIC, 1) == b'\x00\x01\x02'
