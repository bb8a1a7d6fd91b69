"""Wire format, traffic ledger and compression-rate accounting.

Layout of every payload::

    "FCP1" | codec id (u8) | d (u32 LE) | body

Bodies are documented per variant in :func:`encode`.  Bit-packed sections
are LSB-first within each octet, records are laid out contiguously with
their first field in the low bits, and each section is zero-padded to an
octet boundary.
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .codec import Bmucsc, Codebook, Dense, Dgc, Mucsc, Qsgd, Sign, Stc
from .errors import EmptyLedger, InvalidParams, MalformedPayload

MAGIC = b"FCP1"
HEADER_SIZE = 9
CODEC_IDS = {"none": 0, "mucsc": 1, "bmucsc": 2, "signsgd": 3, "qsgd": 4, "stc": 5, "dgc": 6}
_KIND_BY_ID = {v: k for k, v in CODEC_IDS.items()}


def ceil_log2(n) -> int:
    """Bits needed to address ``n`` distinct values (0 for n == 1)."""
    if n < 1:
        raise InvalidParams(f"ceil_log2 needs n >= 1, got {n}")
    if float(n).is_integer():
        return (int(n) - 1).bit_length()
    return math.ceil(math.log2(n))


# ---------------------------------------------------------------------------
# bit packing


def pack_records(fields) -> bytes:
    """Pack ``[(values, width), ...]`` as contiguous fixed-width records."""
    widths = [w for _, w in fields]
    total = sum(widths)
    if total == 0:
        return b""
    if total > 64:
        raise InvalidParams(f"record width {total} exceeds 64 bits")
    n = len(fields[0][0])
    rec = np.zeros(n, dtype=np.uint64)
    shift = 0
    for values, width in fields:
        v = np.asarray(values, dtype=np.uint64)
        if width < 64 and v.size and int(v.max()) >> width:
            raise InvalidParams(f"value does not fit in {width} bits")
        rec |= v << np.uint64(shift)
        shift += width
    bits = np.unpackbits(rec.astype("<u8").view(np.uint8).reshape(n, 8), axis=1, bitorder="little")
    return np.packbits(bits[:, :total].ravel(), bitorder="little").tobytes()


def packed_size(n: int, width: int) -> int:
    return (n * width + 7) // 8


def unpack_records(buf: bytes, n: int, widths):
    """Inverse of :func:`pack_records`; returns one uint64 array per field."""
    total = sum(widths)
    if total == 0:
        return [np.zeros(n, dtype=np.uint64) for _ in widths]
    nbytes = packed_size(n, total)
    if len(buf) < nbytes:
        raise MalformedPayload("payload truncated inside a packed section")
    bits = np.unpackbits(np.frombuffer(buf[:nbytes], dtype=np.uint8), bitorder="little")
    if bits[n * total:].any():
        raise MalformedPayload("nonzero padding bits")
    grid = np.zeros((n, 64), dtype=np.uint8)
    grid[:, :total] = bits[: n * total].reshape(n, total)
    rec = np.packbits(grid, axis=1, bitorder="little").view("<u8").reshape(n).astype(np.uint64)
    out = []
    shift = 0
    for width in widths:
        mask = np.uint64((1 << width) - 1) if width < 64 else np.uint64(0xFFFFFFFFFFFFFFFF)
        out.append((rec >> np.uint64(shift)) & mask)
        shift += width
    return out


# ---------------------------------------------------------------------------
# encode / decode


def _f32(values) -> bytes:
    return np.asarray(values, dtype="<f4").tobytes()


def encode(c) -> bytes:
    """Serialize a compressed update.

    Bodies after the 9-octet header:

    * mucsc: Z (u16), Z x f32 centroids, d ids at ceil(log2 Z) bits
    * bmucsc: d0 (u32), Z (u16), Z x f32 centroids, rest mean (f32),
      d0 records of (index at ceil(log2 d) bits, id at ceil(log2 Z) bits)
    * signsgd: scale (f32), d sign bits
    * qsgd: bit width (u8), norm (f32), d records of (sign bit, level)
    * stc: d0 (u32), mu (f32), d0 records of (index, sign bit)
    * dgc: d0 (u32), d0 packed indices, d0 x f32 values
    * none: d x f32
    """
    c.validate()
    d = c.d
    parts = [MAGIC, struct.pack("<BI", CODEC_IDS[c.kind], d)]
    if isinstance(c, Mucsc):
        z = c.codebook.z
        parts += [struct.pack("<H", z), _f32(c.codebook.centroids)]
        parts.append(pack_records([(c.ids, ceil_log2(z))]))
    elif isinstance(c, Bmucsc):
        z = c.codebook.z
        parts += [
            struct.pack("<IH", c.indices.size, z),
            _f32(c.codebook.centroids),
            _f32([c.rest_mean]),
            pack_records([(c.indices, ceil_log2(d)), (c.cluster_ids, ceil_log2(z))]),
        ]
    elif isinstance(c, Sign):
        parts += [_f32([c.scale]), pack_records([(c.negative, 1)])]
    elif isinstance(c, Qsgd):
        parts += [
            struct.pack("<B", c.bit_width),
            _f32([c.norm]),
            pack_records([(c.negative, 1), (c.levels, c.bit_width)]),
        ]
    elif isinstance(c, Stc):
        parts += [
            struct.pack("<I", c.indices.size),
            _f32([c.mu]),
            pack_records([(c.indices, ceil_log2(d)), (c.negative, 1)]),
        ]
    elif isinstance(c, Dgc):
        parts += [
            struct.pack("<I", c.indices.size),
            pack_records([(c.indices, ceil_log2(d))]),
            _f32(c.values),
        ]
    elif isinstance(c, Dense):
        parts.append(_f32(c.values))
    else:
        raise InvalidParams(f"cannot encode {type(c).__name__}")
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise MalformedPayload("payload truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float64)

    def records(self, n: int, widths):
        return unpack_records(self.take(packed_size(n, sum(widths))), n, widths)


def decode(w: bytes):
    """Parse a payload produced by :func:`encode`."""
    w = bytes(w)
    if w[:4] != MAGIC:
        raise MalformedPayload("bad magic")
    r = _Reader(w)
    r.take(4)
    codec_id, d = r.unpack("<BI")
    kind = _KIND_BY_ID.get(codec_id)
    if kind is None:
        raise MalformedPayload(f"unknown codec id {codec_id}")
    if d < 1:
        raise MalformedPayload("d = 0")

    if kind == "mucsc":
        (z,) = r.unpack("<H")
        if z < 1:
            raise MalformedPayload("Z = 0")
        cb = Codebook(r.floats(z))
        (ids,) = r.records(d, [ceil_log2(z)])
        c = Mucsc(cb, ids.astype(np.int64))
    elif kind == "bmucsc":
        d0, z = r.unpack("<IH")
        if z < 1 or d0 > d:
            raise MalformedPayload("bmucsc header inconsistent")
        cb = Codebook(r.floats(z))
        rest = float(r.floats(1)[0])
        idx, ids = r.records(d0, [ceil_log2(d), ceil_log2(z)])
        c = Bmucsc(d, idx.astype(np.int64), ids.astype(np.int64), cb, rest)
    elif kind == "signsgd":
        scale = float(r.floats(1)[0])
        (neg,) = r.records(d, [1])
        c = Sign(neg.astype(bool), scale)
    elif kind == "qsgd":
        (bits,) = r.unpack("<B")
        if not 1 <= bits <= 31:
            raise MalformedPayload(f"qsgd bit width {bits} unsupported")
        norm = float(r.floats(1)[0])
        neg, levels = r.records(d, [1, bits])
        c = Qsgd(norm, levels.astype(np.int64), neg.astype(bool), bits)
    elif kind == "stc":
        (d0,) = r.unpack("<I")
        if d0 > d:
            raise MalformedPayload("stc d0 exceeds d")
        mu = float(r.floats(1)[0])
        idx, neg = r.records(d0, [ceil_log2(d), 1])
        c = Stc(d, idx.astype(np.int64), neg.astype(bool), mu)
    elif kind == "dgc":
        (d0,) = r.unpack("<I")
        if d0 > d:
            raise MalformedPayload("dgc d0 exceeds d")
        (idx,) = r.records(d0, [ceil_log2(d)])
        c = Dgc(d, idx.astype(np.int64), r.floats(d0))
    else:
        c = Dense(r.floats(d))

    if r.pos != len(w):
        raise MalformedPayload(f"{len(w) - r.pos} trailing octets")
    c.validate()
    return c


# ---------------------------------------------------------------------------
# closed-form compression rates


def _check_rate_args(d, z_u, z_d, k, n, h):
    if z_u < 2 or z_d < 2:
        raise InvalidParams("z_u and z_d must be >= 2")
    if not 1 <= k <= n:
        raise InvalidParams("need 1 <= k <= n")
    if h <= 0 or d < 1:
        raise InvalidParams("need h > 0 and d >= 1")


def rate_mucsc(d, z_u, z_d, k, n, h=4) -> float:
    """Per-client uncompressed/compressed traffic ratio for soft-cluster coding both ways."""
    _check_rate_args(d, z_u, z_d, k, n, h)
    up = (ceil_log2(z_u) / 8 * d + h * z_u) * k / n
    down = h * z_d + ceil_log2(z_d) / 8 * d
    return 2 * h * d / (up + down)


def rate_mucsc_limit(z_u, z_d, k, n, h=4) -> float:
    """Large-d limit of :func:`rate_mucsc`."""
    return 16 * h / (ceil_log2(z_u) * k / n + ceil_log2(z_d))


def rate_bmucsc(d, d0, z_u, z_d, k, n, h=4) -> float:
    """Rate of the boosted variant: d0 addressed coordinates plus one rest mean per direction."""
    _check_rate_args(d, z_u, z_d, k, n, h)
    if not 1 <= d0 <= d:
        raise InvalidParams("need 1 <= d0 <= d")
    idx_bits = ceil_log2(d)
    omega_u = ((ceil_log2(z_u) + idx_bits) / 8 * d0 + h * z_u + h) * k / n
    omega_d = (ceil_log2(z_d) + idx_bits) / 8 * d0 + h * (z_d + 1)
    return 2 * h * d / (omega_u + omega_d)


def rate_bmucsc_limit(d, d0, z_u, z_d, k, n, h=4) -> float:
    idx_bits = ceil_log2(d)
    return 16 * h * d / (
        (ceil_log2(z_u) + idx_bits) * d0 * k / n + (ceil_log2(z_d) + idx_bits) * d0
    )


# ---------------------------------------------------------------------------
# traffic ledger

UPLINK = "up"
DOWNLINK = "down"


@dataclass
class TrafficLedger:
    """Every transmission of a run: one row per (round, client, direction)."""

    n_clients: int
    participants: int
    rows: list = field(default_factory=list)

    def record(self, round_index: int, client_id: int, direction: str, nbytes: int):
        if direction not in (UPLINK, DOWNLINK):
            raise InvalidParams(f"direction must be 'up' or 'down', got {direction!r}")
        if nbytes < 0:
            raise InvalidParams("byte counts are nonnegative")
        self.rows.append((int(round_index), int(client_id), direction, int(nbytes)))

    def __len__(self):
        return len(self.rows)

    def rounds(self) -> list[int]:
        return sorted({r for r, _, _, _ in self.rows})

    def round_bytes(self, round_index: int) -> tuple[int, int]:
        up = sum(b for r, _, dr, b in self.rows if r == round_index and dr == UPLINK)
        down = sum(b for r, _, dr, b in self.rows if r == round_index and dr == DOWNLINK)
        return up, down

    def per_round(self) -> dict[int, dict]:
        """Per-round byte totals and counts, one pass over the rows."""
        out: dict[int, dict] = {}
        for r, _, dr, b in self.rows:
            slot = out.setdefault(r, {"up": 0, "down": 0, "n_up": 0, "n_down": 0})
            slot[dr] += b
            slot["n_" + dr] += 1
        return dict(sorted(out.items()))

    def cumulative(self) -> list[tuple[int, int, int]]:
        """``(round, cumulative uplink, cumulative downlink)`` per round."""
        up = down = 0
        out = []
        for r, slot in self.per_round().items():
            up += slot["up"]
            down += slot["down"]
            out.append((r, up, down))
        return out

    def totals(self) -> tuple[int, int]:
        up = sum(b for _, _, dr, b in self.rows if dr == UPLINK)
        return up, sum(b for _, _, _, b in self.rows) - up

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["round", "client_id", "direction", "bytes"])
            w.writerows(self.rows)


def dense_exchange_bytes(d: int, h: int = 4) -> int:
    """Uncompressed per-client bytes in one round: hd up plus hd down."""
    return 2 * h * d


def dense_round_bytes(d: int, uploads: int, downloads: int) -> int:
    """Total bytes of one round in which every transmission is a dense payload."""
    return (uploads + downloads) * (HEADER_SIZE + 4 * d)


def measured_rate(ledger: TrafficLedger, baseline_bytes_per_round, accounting: str = "expected") -> float:
    """Uncompressed over measured traffic.

    ``accounting="expected"``: per round, the mean uplink payload is weighted
    by K/N and added to the mean downlink payload, giving the expected bytes
    one client moves; ``baseline_bytes_per_round`` is the matching
    uncompressed per-client figure (e.g. :func:`dense_exchange_bytes`).

    ``accounting="actual"``: all bytes the ledger saw in a round, against a
    ``baseline_bytes_per_round`` that is the uncompressed total for a round.
    """
    rounds = ledger.per_round()
    if not rounds:
        raise EmptyLedger("ledger has no transmissions")
    if accounting == "expected":
        frac = ledger.participants / ledger.n_clients
        spent = 0.0
        for slot in rounds.values():
            if slot["n_up"]:
                spent += slot["up"] / slot["n_up"] * frac
            if slot["n_down"]:
                spent += slot["down"] / slot["n_down"]
    elif accounting == "actual":
        spent = float(sum(s["up"] + s["down"] for s in rounds.values()))
    else:
        raise InvalidParams(f"unknown accounting {accounting!r}")
    if spent == 0:
        return math.inf
    return baseline_bytes_per_round * len(rounds) / spent
