"""Binary embedding-stream format and cache snapshot files.

Stream layout (all integers little-endian uint32, vectors little-endian
float32):

    magic "MCPE" | version=1 | d | C
    C x (name_len | name utf-8 bytes)
    C x (P_c | P_c x d prompt vectors)
    records until EOF, each:
        label (0xFFFFFFFF = unlabeled) | N | N x d view vectors

Vectors are stored unit-normalized; the reader enforces unit norm within
1e-4 of float32 slack. Records are streamed, never materialized in bulk.

Snapshot layout ("MCPS", version 1) serializes a CacheBank exactly (float64
features) so a restored bank replays bit-identically.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterator

import numpy as np

from .caches import CACHE_KINDS, CacheBank, CacheSlot
from .core import HyperParams
from .errors import InvalidArgumentError, StreamFormatError

MAGIC = b"MCPE"
SNAP_MAGIC = b"MCPS"
VERSION = 1
UNLABELED = 0xFFFFFFFF
UNIT_SLACK = 1e-4  # float32 quantization allowance


@dataclass
class StreamHeader:
    dim: int
    num_classes: int
    class_names: list[str]
    prompts: list[np.ndarray]  # per class, P_c x d float64

    def __post_init__(self):
        if self.dim < 1 or self.num_classes < 1:
            raise InvalidArgumentError("need dim >= 1 and num_classes >= 1")
        if len(self.class_names) != self.num_classes:
            raise InvalidArgumentError("one name per class required")
        if len(self.prompts) != self.num_classes:
            raise InvalidArgumentError("one prompt block per class required")


@dataclass
class SampleRecord:
    label: int | None          # None when unlabeled
    views: np.ndarray          # N x d float64 unit rows, row 0 = original

    @property
    def num_views(self) -> int:
        return self.views.shape[0]


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    pos = fh.tell()
    buf = fh.read(n)
    if len(buf) != n:
        raise StreamFormatError(f"truncated while reading {what}", offset=pos)
    return buf


def _read_u32(fh: BinaryIO, what: str) -> int:
    return struct.unpack("<I", _read_exact(fh, 4, what))[0]


def _write_u32(fh: BinaryIO, value: int) -> None:
    fh.write(struct.pack("<I", value))


def _check_unit_rows(rows: np.ndarray, what: str, offset: int) -> None:
    norms = np.linalg.norm(rows, axis=-1)
    bad = np.abs(norms - 1.0) > UNIT_SLACK
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise StreamFormatError(
            f"{what} row {i} has norm {norms[i]:.6f}, expected 1", offset=offset
        )


def write_stream(
    path: str, header: StreamHeader, records: Iterator[SampleRecord]
) -> int:
    """Write header and records; returns the number of records written."""
    count = 0
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        _write_u32(fh, VERSION)
        _write_u32(fh, header.dim)
        _write_u32(fh, header.num_classes)
        for name in header.class_names:
            raw = name.encode("utf-8")
            _write_u32(fh, len(raw))
            fh.write(raw)
        for c, prompts in enumerate(header.prompts):
            prompts = np.asarray(prompts, dtype=np.float64)
            if prompts.ndim != 2 or prompts.shape[1] != header.dim:
                raise InvalidArgumentError(f"class {c} prompts have wrong shape")
            if prompts.shape[0] < 1:
                raise InvalidArgumentError(f"class {c} has no prompts")
            _write_u32(fh, prompts.shape[0])
            fh.write(prompts.astype("<f4").tobytes())
        for rec in records:
            views = np.asarray(rec.views, dtype=np.float64)
            if views.ndim != 2 or views.shape[1] != header.dim:
                raise InvalidArgumentError("record views have wrong shape")
            if views.shape[0] < 1:
                raise InvalidArgumentError("record needs at least one view")
            label = UNLABELED if rec.label is None else int(rec.label)
            if label != UNLABELED and not 0 <= label < header.num_classes:
                raise InvalidArgumentError(f"label {label} out of range")
            _write_u32(fh, label)
            _write_u32(fh, views.shape[0])
            fh.write(views.astype("<f4").tobytes())
            count += 1
    return count


def read_header(fh: BinaryIO) -> StreamHeader:
    magic = _read_exact(fh, 4, "magic")
    if magic != MAGIC:
        raise StreamFormatError(f"bad magic {magic!r}", offset=0)
    version = _read_u32(fh, "version")
    if version != VERSION:
        raise StreamFormatError(f"unsupported version {version}", offset=4)
    dim = _read_u32(fh, "dimension")
    num_classes = _read_u32(fh, "class count")
    if dim < 1 or num_classes < 1:
        raise StreamFormatError("dimension and class count must be >= 1", offset=8)
    names = []
    for c in range(num_classes):
        n = _read_u32(fh, f"class {c} name length")
        names.append(_read_exact(fh, n, f"class {c} name").decode("utf-8"))
    prompts = []
    for c in range(num_classes):
        p_c = _read_u32(fh, f"class {c} prompt count")
        if p_c < 1:
            raise StreamFormatError(f"class {c} has no prompts", offset=fh.tell() - 4)
        pos = fh.tell()
        raw = _read_exact(fh, p_c * dim * 4, f"class {c} prompt vectors")
        block = np.frombuffer(raw, dtype="<f4").reshape(p_c, dim).astype(np.float64)
        _check_unit_rows(block, f"class {c} prompts", pos)
        prompts.append(block)
    return StreamHeader(dim, num_classes, names, prompts)


def iter_records(fh: BinaryIO, header: StreamHeader) -> Iterator[SampleRecord]:
    while True:
        pos = fh.tell()
        head = fh.read(4)
        if not head:
            return
        if len(head) != 4:
            raise StreamFormatError("truncated record label", offset=pos)
        label = struct.unpack("<I", head)[0]
        n = _read_u32(fh, "view count")
        if n < 1:
            raise StreamFormatError("record needs at least one view", offset=pos + 4)
        if label != UNLABELED and label >= header.num_classes:
            raise StreamFormatError(f"label {label} out of range", offset=pos)
        vec_pos = fh.tell()
        raw = _read_exact(fh, n * header.dim * 4, "view vectors")
        views = (
            np.frombuffer(raw, dtype="<f4").reshape(n, header.dim).astype(np.float64)
        )
        _check_unit_rows(views, "views", vec_pos)
        yield SampleRecord(None if label == UNLABELED else label, views)


def read_stream(path: str) -> tuple[StreamHeader, Iterator[SampleRecord]]:
    """Open a stream file; the record iterator owns the file handle."""
    fh = open(path, "rb")
    try:
        header = read_header(fh)
    except Exception:
        fh.close()
        raise

    def gen():
        with fh:
            yield from iter_records(fh, header)

    return header, gen()


# ---------------------------------------------------------------------------
# cache snapshots


def _write_f64(fh: BinaryIO, arr: np.ndarray) -> None:
    fh.write(np.asarray(arr, dtype="<f8").tobytes())


def save_bank(path: str, bank: CacheBank) -> None:
    """Serialize a bank so that restoring reproduces it exactly."""
    with open(path, "wb") as fh:
        fh.write(SNAP_MAGIC)
        _write_u32(fh, VERSION)
        _write_u32(fh, bank.num_classes)
        _write_u32(fh, bank.dim)
        _write_u32(fh, bank.next_seq)
        for kind in CACHE_KINDS:
            _write_u32(fh, 1 if bank.enabled[kind] else 0)
            for c in range(bank.num_classes):
                cache = bank.caches[kind][c]
                _write_u32(fh, cache.capacity)
                _write_u32(fh, len(cache.slots))
                for s in cache.slots:
                    _write_u32(fh, s.pseudo_label)
                    _write_u32(fh, s.seq)
                    has_d = s.dist_to_center is not None
                    _write_u32(fh, 1 if has_d else 0)
                    _write_f64(fh, np.array([s.entropy, s.dist_to_center if has_d else 0.0]))
                    _write_f64(fh, s.feature)
                    _write_f64(fh, s.probs)


def load_bank(path: str, hp: HyperParams | None = None) -> CacheBank:
    hp = hp or HyperParams()
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "snapshot magic")
        if magic != SNAP_MAGIC:
            raise StreamFormatError(f"bad snapshot magic {magic!r}", offset=0)
        version = _read_u32(fh, "snapshot version")
        if version != VERSION:
            raise StreamFormatError(f"unsupported snapshot version {version}", offset=4)
        num_classes = _read_u32(fh, "class count")
        dim = _read_u32(fh, "dimension")
        next_seq = _read_u32(fh, "sequence counter")
        bank = CacheBank(num_classes, dim, hp)
        bank.next_seq = next_seq
        for kind in CACHE_KINDS:
            bank.enabled[kind] = bool(_read_u32(fh, "enable flag"))
            for c in range(num_classes):
                capacity = _read_u32(fh, "capacity")
                count = _read_u32(fh, "slot count")
                if count > capacity:
                    raise StreamFormatError(
                        f"{kind} cache of class {c} overflows its capacity",
                        offset=fh.tell() - 4,
                    )
                cache = bank.caches[kind][c]
                cache.capacity = capacity
                for _ in range(count):
                    label = _read_u32(fh, "slot label")
                    seq = _read_u32(fh, "slot sequence")
                    has_d = bool(_read_u32(fh, "slot distance flag"))
                    scalars = np.frombuffer(
                        _read_exact(fh, 16, "slot scalars"), dtype="<f8"
                    )
                    feature = np.frombuffer(
                        _read_exact(fh, dim * 8, "slot feature"), dtype="<f8"
                    ).copy()
                    probs = np.frombuffer(
                        _read_exact(fh, num_classes * 8, "slot probabilities"),
                        dtype="<f8",
                    ).copy()
                    cache.slots.append(
                        CacheSlot(
                            feature=feature,
                            entropy=float(scalars[0]),
                            pseudo_label=label,
                            probs=probs,
                            seq=seq,
                            dist_to_center=float(scalars[1]) if has_d else None,
                        )
                    )
    return bank
