import numpy as np


def compute_checksum(data):
    """16-bit ones'-complement sum of big-endian words; odd tail is zero-padded."""
    if len(data) == 0:
        return 0
    if len(data) % 2:
        data = bytes(data) + b'\x00'
    total = int(np.frombuffer(data, dtype='>u2').sum(dtype=np.uint64))
    while total >> 16:
        total = (total & 0xffff) + (total >> 16)
    return (~total) & 0xffff


def verify_checksum(data, checksum):
    return compute_checksum(data) == checksum
