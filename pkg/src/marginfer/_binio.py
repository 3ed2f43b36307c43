"""JSON-header + little-endian float64 block files.

All on-disk artifacts (datasets, network checkpoints, chains) share this
layout: one UTF-8 JSON line terminated by ``\\n`` followed by a raw block of
``<f8`` values.
"""

import json
from pathlib import Path

import numpy as np

from .errors import FormatError

_F8 = np.dtype("<f8")


def write_block(path, header, values):
    values = np.ascontiguousarray(values, dtype=_F8)
    line = json.dumps(header, sort_keys=True).encode("utf-8")
    if b"\n" in line:
        raise ValueError("header must serialize to a single line")
    with open(path, "wb") as fh:
        fh.write(line + b"\n")
        fh.write(values.tobytes(order="C"))


def read_block(path, required_keys=()):
    """Return ``(header, flat float64 array, header byte length)``."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError("missing header terminator", offset=len(raw))
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        pos = getattr(exc, "pos", getattr(exc, "start", 0))
        raise FormatError(f"malformed JSON header: {exc}", offset=pos) from None
    if not isinstance(header, dict):
        raise FormatError("header is not a JSON object", offset=0)
    missing = [k for k in required_keys if k not in header]
    if missing:
        raise FormatError(f"header missing keys {missing}", offset=0)
    body = raw[nl + 1:]
    if len(body) % _F8.itemsize:
        raise FormatError(
            f"payload length {len(body)} is not a multiple of 8",
            offset=nl + 1 + len(body) - len(body) % _F8.itemsize,
        )
    return header, np.frombuffer(body, dtype=_F8).astype(np.float64), nl + 1


def expect_count(flat, expected, body_offset, what):
    if flat.size != expected:
        # offset where the payload diverges from what the header promised
        offset = body_offset + min(flat.size, expected) * _F8.itemsize
        raise FormatError(
            f"{what}: header promises {expected} float64 values, found {flat.size}",
            offset=offset,
        )
