"""Binary matrix container, descriptor stores, protocol CSVs and PNM images.

Container record layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"TMPL"
    4       2     format version (u16)
    6       2     role tag (u16, see ``Role``)
    8       8     rows (u64)
    16      8     cols (u64)
    24      8*rows*cols   payload, row-major float64 LE
    ...     4     CRC32 of the payload (u32)

A file is one or more records back to back. ``Role.INDEX`` records carry
UTF-8 text (newline separated ids, NUL padded to a multiple of 8 bytes)
instead of floats; the byte-length rule is the same.
"""

from __future__ import annotations

import csv
import enum
import io
import os
import struct
import tempfile
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConsistencyError, CorruptPayload, DimMismatch, FormatError, ParseError

MAGIC = b"TMPL"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHHQQ")
_CRC = struct.Struct("<I")


class Role(enum.IntEnum):
    WEIGHTS = 1
    EMBEDDING = 2
    SCORER = 3
    CASCADE = 4
    DESCRIPTORS = 5
    INDEX = 6


@dataclass(frozen=True)
class Record:
    role: Role
    data: np.ndarray | bytes


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# -- container codec ---------------------------------------------------------


def encode_matrix(role: Role, matrix) -> bytes:
    m = np.asarray(matrix, dtype="<f8")
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise DimMismatch(f"container holds 2-D matrices, got {m.ndim}-D")
    payload = np.ascontiguousarray(m).tobytes()
    return _pack(role, m.shape[0], m.shape[1], payload)


def encode_text(lines) -> bytes:
    raw = "\n".join(lines).encode("utf-8")
    pad = (-len(raw)) % 8
    raw += b"\0" * pad
    return _pack(Role.INDEX, 1, len(raw) // 8, raw)


def _pack(role, rows, cols, payload: bytes) -> bytes:
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, int(role), rows, cols)
    return header + payload + _CRC.pack(zlib.crc32(payload) & 0xFFFFFFFF)


def decode_records(blob: bytes) -> list[Record]:
    """Decode every record in ``blob``; any defect raises FormatError."""
    records = []
    pos = 0
    n = len(blob)
    if n == 0:
        raise FormatError("empty container file")
    while pos < n:
        if n - pos < _HEADER.size:
            raise FormatError(f"truncated header at byte {pos}")
        magic, version, role, rows, cols = _HEADER.unpack_from(blob, pos)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r} at byte {pos}, expected {MAGIC!r}")
        if version != FORMAT_VERSION:
            raise FormatError(f"format version mismatch: expected {FORMAT_VERSION}, found {version}")
        try:
            role = Role(role)
        except ValueError:
            raise FormatError(f"unknown role tag {role}") from None
        pos += _HEADER.size
        nbytes = rows * cols * 8
        if nbytes > n - pos - _CRC.size:
            raise FormatError(
                f"dims {rows}x{cols} need {nbytes} payload bytes, only {max(n - pos - _CRC.size, 0)} present"
            )
        payload = blob[pos : pos + nbytes]
        pos += nbytes
        (crc,) = _CRC.unpack_from(blob, pos)
        pos += _CRC.size
        if zlib.crc32(payload) & 0xFFFFFFFF != crc:
            raise CorruptPayload(f"CRC32 mismatch in {role.name.lower()} record")
        if role is Role.INDEX:
            records.append(Record(role, bytes(payload)))
        else:
            data = np.frombuffer(payload, dtype="<f8").reshape(rows, cols).astype(np.float64)
            records.append(Record(role, data))
    return records


def write_records(path, records) -> None:
    chunks = []
    for rec in records:
        if rec.role is Role.INDEX:
            chunks.append(_pack(Role.INDEX, 1, len(rec.data) // 8, rec.data))
        else:
            chunks.append(encode_matrix(rec.role, rec.data))
    atomic_write_bytes(path, b"".join(chunks))


def read_records(path, role: Role | None = None) -> list[Record]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    records = decode_records(blob)
    if role is not None:
        for rec in records:
            if rec.role is not role and rec.role is not Role.INDEX:
                raise FormatError(f"expected {role.name.lower()} records, found {rec.role.name.lower()}")
    return records


def save_matrix(path, matrix, role: Role) -> None:
    atomic_write_bytes(path, encode_matrix(role, matrix))


def load_matrix(path, role: Role) -> np.ndarray:
    records = read_records(path, role)
    if len(records) != 1:
        raise FormatError(f"expected a single {role.name.lower()} record, found {len(records)}")
    return records[0].data


def _decode_index(raw: bytes) -> list[str]:
    try:
        text = raw.rstrip(b"\0").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"index record is not UTF-8: {exc}") from None
    return text.split("\n") if text else []


# -- descriptor store --------------------------------------------------------


@dataclass
class DescriptorStore:
    """Ordered map media_id -> vector with a shared dimension."""

    dim: int
    vectors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    def add(self, media_id: str, vec) -> None:
        vec = np.asarray(vec, dtype=np.float64).ravel()
        if vec.shape[0] != self.dim:
            raise DimMismatch(f"{media_id}: dim {vec.shape[0]} != store dim {self.dim}")
        if "\n" in media_id:
            raise FormatError("media ids may not contain newlines")
        self.vectors[media_id] = vec

    def __contains__(self, media_id) -> bool:
        return media_id in self.vectors

    def __getitem__(self, media_id) -> np.ndarray:
        return self.vectors[media_id]

    def __len__(self) -> int:
        return len(self.vectors)

    def get(self, media_id, default=None):
        return self.vectors.get(media_id, default)

    @property
    def count(self) -> int:
        return len(self.vectors)

    def ids(self) -> list[str]:
        return list(self.vectors)

    def matrix(self) -> np.ndarray:
        if not self.vectors:
            return np.zeros((0, self.dim))
        return np.stack(list(self.vectors.values()))


def store_write(store: DescriptorStore, path) -> None:
    # A zero-count store still records its dim through a 1xdim header row
    # that is flagged by an empty index.
    mat = store.matrix()
    ids = store.ids()
    if mat.shape[0] == 0:
        mat = np.zeros((1, store.dim))
    blob = encode_text(ids) + encode_matrix(Role.DESCRIPTORS, mat)
    atomic_write_bytes(path, blob)


def store_read(path) -> DescriptorStore:
    records = read_records(path)
    if len(records) != 2 or records[0].role is not Role.INDEX or records[1].role is not Role.DESCRIPTORS:
        raise FormatError("descriptor store must be an index record followed by a descriptors record")
    ids = _decode_index(records[0].data)
    mat = records[1].data
    store = DescriptorStore(dim=mat.shape[1])
    if not ids:
        return store
    if len(ids) != mat.shape[0]:
        raise FormatError(f"index lists {len(ids)} ids but payload has {mat.shape[0]} rows")
    if len(set(ids)) != len(ids):
        raise FormatError("duplicate media ids in store index")
    for mid, row in zip(ids, mat):
        store.vectors[mid] = row
    return store


# -- protocol CSV ------------------------------------------------------------

PROTOCOL_HEADER = ["template_id", "subject_id", "media_path"]
LANDMARK_COLUMNS = ["lx0", "ly0", "lx1", "ly1", "lx2", "ly2"]


@dataclass(frozen=True)
class ProtocolRow:
    template_id: str
    subject_id: str
    media_path: str
    landmarks: tuple | None = None  # ((x0, y0), (x1, y1), (x2, y2))


@dataclass
class ProtocolTable:
    rows: list
    split_id: str = ""

    def templates(self) -> "OrderedDict[str, list[ProtocolRow]]":
        out: OrderedDict = OrderedDict()
        for row in self.rows:
            out.setdefault(row.template_id, []).append(row)
        return out

    def subject_of(self) -> dict:
        return {r.template_id: r.subject_id for r in self.rows}

    @property
    def has_landmarks(self) -> bool:
        return any(r.landmarks is not None for r in self.rows)


def parse_protocol_text(text: str, split_id: str = "") -> ProtocolTable:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty protocol file", line=1) from None
    except csv.Error as exc:
        raise ParseError(str(exc), line=1) from None
    header = [h.strip() for h in header]
    if header == PROTOCOL_HEADER:
        with_lm = False
    elif header == PROTOCOL_HEADER + LANDMARK_COLUMNS:
        with_lm = True
    else:
        raise ParseError(f"unexpected header {header}", line=1)
    width = len(header)
    rows = []
    seen = set()
    subjects: dict = {}
    lineno = 1
    try:
        for lineno, fields in enumerate(reader, start=2):
            if not fields or all(not f.strip() for f in fields):
                continue
            if len(fields) != width:
                raise ParseError(f"expected {width} fields, got {len(fields)}", line=lineno)
            tid, sid, media = (f.strip() for f in fields[:3])
            if not tid or not sid or not media:
                raise ParseError("empty template_id, subject_id or media_path", line=lineno)
            landmarks = None
            if with_lm:
                raw = [f.strip() for f in fields[3:]]
                if all(not v for v in raw):
                    landmarks = None
                elif any(not v for v in raw):
                    raise ParseError("partial landmark columns", line=lineno)
                else:
                    try:
                        vals = [float(v) for v in raw]
                    except ValueError:
                        raise ParseError("non-numeric landmark value", line=lineno) from None
                    if not all(np.isfinite(vals)):
                        raise ParseError("non-finite landmark value", line=lineno)
                    landmarks = ((vals[0], vals[1]), (vals[2], vals[3]), (vals[4], vals[5]))
            key = (tid, media)
            if key in seen:
                raise ParseError(f"duplicate (template_id, media_path) {key}", line=lineno)
            seen.add(key)
            prev = subjects.setdefault(tid, sid)
            if prev != sid:
                raise ConsistencyError(
                    f"template {tid!r} maps to subjects {prev!r} and {sid!r} (line {lineno})", template_id=tid
                )
            rows.append(ProtocolRow(tid, sid, media, landmarks))
    except csv.Error as exc:
        raise ParseError(str(exc), line=lineno) from None
    return ProtocolTable(rows=rows, split_id=split_id)


def parse_protocol(path, split_id: str | None = None) -> ProtocolTable:
    path = Path(path)
    try:
        text = path.read_bytes().decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"not UTF-8: {exc}") from None
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from None
    return parse_protocol_text(text, split_id=split_id if split_id is not None else path.parent.name)


def format_protocol(table: ProtocolTable) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    with_lm = table.has_landmarks
    writer.writerow(PROTOCOL_HEADER + (LANDMARK_COLUMNS if with_lm else []))
    for r in table.rows:
        fields = [r.template_id, r.subject_id, r.media_path]
        if with_lm:
            if r.landmarks is None:
                fields += [""] * 6
            else:
                fields += [repr(float(c)) for pt in r.landmarks for c in pt]
        writer.writerow(fields)
    return buf.getvalue()


def write_protocol(table: ProtocolTable, path) -> None:
    atomic_write_text(path, format_protocol(table))


# -- PNM images --------------------------------------------------------------


def _pnm_tokens(data: bytes, count: int, pos: int):
    tokens = []
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PNM header")
        tokens.append(data[start:pos])
    return tokens, pos


def read_pnm(path) -> np.ndarray:
    """Read a PGM/PPM (P2, P3, P5, P6) into an HxWxC float array in [0, 1]."""
    data = Path(path).read_bytes()
    (magic,), pos = _pnm_tokens(data, 1, 0)
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise FormatError(f"unsupported PNM magic {magic!r}")
    (w, h, maxval), pos = _pnm_tokens(data, 3, pos)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise FormatError("non-integer PNM header field") from None
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise FormatError("invalid PNM dimensions")
    channels = 3 if magic in (b"P3", b"P6") else 1
    n = w * h * channels
    if magic in (b"P5", b"P6"):
        pos += 1  # single whitespace after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        raw = data[pos : pos + n * dtype.itemsize]
        if len(raw) != n * dtype.itemsize:
            raise FormatError("truncated PNM payload")
        arr = np.frombuffer(raw, dtype=dtype).astype(np.float64)
    else:
        vals, _ = _pnm_tokens(data, n, pos)
        arr = np.array([int(v) for v in vals], dtype=np.float64)
    return (arr / maxval).reshape(h, w, channels)


def write_pnm(path, image) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    if c not in (1, 3):
        raise DimMismatch(f"PNM needs 1 or 3 channels, got {c}")
    magic = b"P5" if c == 1 else b"P6"
    payload = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8).tobytes()
    atomic_write_bytes(path, magic + f"\n{w} {h}\n255\n".encode() + payload)


def parse_pairs(path) -> list:
    """Verification pair list: CSV with header ``template_id_1,template_id_2``."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ParseError(f"cannot read {path}: {exc}") from None
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["template_id_1", "template_id_2"]:
        raise ParseError("expected header template_id_1,template_id_2", line=1)
    pairs = []
    for lineno, fields in enumerate(reader, start=2):
        if not fields or all(not f.strip() for f in fields):
            continue
        if len(fields) != 2 or not all(f.strip() for f in fields):
            raise ParseError("expected two template ids", line=lineno)
        pairs.append((fields[0].strip(), fields[1].strip()))
    return pairs
