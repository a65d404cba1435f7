"""Frozen embedding sources: a seeded tabular surrogate encoder and the TREB video-embedding bank.

TREB layout (little-endian)::

    b"TREB1\\0"            6 bytes
    u32 embedding_width
    u32 study_count
    per study:
        u16 id_length, id bytes (UTF-8)
        u16 L
        L x u8 view tag (0=AP2, 1=AP4, 2=PLAX, 255=unknown)
        L * width x f32
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"TREB1\x00"
HEADER = struct.Struct("<6sII")
VIEW_CODES = {"AP2": 0, "AP4": 1, "PLAX": 2, "unknown": 255}
VIEW_NAMES = {v: k for k, v in VIEW_CODES.items()}


class BankFormatError(ValueError):
    pass


class BadMagicError(BankFormatError):
    pass


class TruncatedBankError(BankFormatError):
    pass


class WidthMismatchError(BankFormatError):
    pass


class DuplicateStudyError(BankFormatError):
    pass


class StudyNotFoundError(KeyError):
    pass


class TabularSurrogateEncoder:
    """``tanh(x @ W + b)`` with W, b drawn once from a seed and never trained.

    Parameters are rounded to float32 at construction so a checkpoint stores
    them losslessly.
    """

    nonlinearity = "tanh"

    def __init__(self, in_width: int, out_width: int = 192, seed: int = 0):
        rng = np.random.default_rng(seed)
        w = rng.normal(0.0, 1.0 / np.sqrt(in_width), size=(in_width, out_width))
        b = rng.normal(0.0, 0.1, size=out_width)
        self.weight = w.astype(np.float32).astype(np.float64)
        self.bias = b.astype(np.float32).astype(np.float64)
        self.seed = seed
        self.weight.setflags(write=False)
        self.bias.setflags(write=False)

    @classmethod
    def from_arrays(cls, weight: np.ndarray, bias: np.ndarray, seed: int = -1) -> "TabularSurrogateEncoder":
        enc = cls.__new__(cls)
        enc.weight = np.array(weight, dtype=np.float64)
        enc.bias = np.array(bias, dtype=np.float64)
        enc.seed = seed
        enc.weight.setflags(write=False)
        enc.bias.setflags(write=False)
        return enc

    @property
    def in_width(self) -> int:
        return self.weight.shape[0]

    @property
    def out_width(self) -> int:
        return self.weight.shape[1]

    def lipschitz_bound(self) -> float:
        """Induced inf-norm of the linear map; tanh is 1-Lipschitz."""
        return float(np.abs(self.weight).sum(axis=0).max())

    def encode(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_width:
            raise ValueError(f"encoder expects width {self.in_width}, got {x.shape[-1]}")
        return np.tanh(x @ self.weight + self.bias)


def encode_tabular(enc: TabularSurrogateEncoder, x: np.ndarray) -> np.ndarray:
    return enc.encode(x)


@dataclass
class EmbeddingBank:
    width: int
    studies: dict[str, np.ndarray] = field(default_factory=dict)
    views: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def add(self, study_id: str, embeddings: np.ndarray, views=None) -> None:
        emb = np.asarray(embeddings, dtype=np.float32)
        if emb.ndim != 2 or emb.shape[0] < 1 or emb.shape[1] != self.width:
            raise WidthMismatchError(
                f"study {study_id!r}: expected shape (L>=1, {self.width}), got {emb.shape}")
        if not np.all(np.isfinite(emb)):
            raise ValueError(f"study {study_id!r}: non-finite embedding values")
        if study_id in self.studies:
            raise DuplicateStudyError(f"duplicate study_id {study_id!r}")
        views = tuple(views) if views is not None else ("unknown",) * emb.shape[0]
        if len(views) != emb.shape[0]:
            raise ValueError(f"study {study_id!r}: {len(views)} view tags for {emb.shape[0]} videos")
        for v in views:
            if v not in VIEW_CODES:
                raise ValueError(f"study {study_id!r}: unknown view tag {v!r}")
        self.studies[study_id] = emb
        self.views[study_id] = views

    def __len__(self) -> int:
        return len(self.studies)

    def __contains__(self, study_id) -> bool:
        return study_id in self.studies

    def view_counts(self) -> dict[str, int]:
        counts = {k: 0 for k in VIEW_CODES}
        for tags in self.views.values():
            for t in tags:
                counts[t] += 1
        return counts


def get_study(bank: EmbeddingBank, study_id: str) -> tuple[np.ndarray, tuple[str, ...]]:
    try:
        return bank.studies[study_id], bank.views[study_id]
    except KeyError:
        raise StudyNotFoundError(f"study {study_id!r} not in bank") from None


def bank_to_bytes(bank: EmbeddingBank) -> bytes:
    parts = [HEADER.pack(MAGIC, bank.width, len(bank.studies))]
    for sid, emb in bank.studies.items():
        raw = sid.encode("utf-8")
        if len(raw) > 0xFFFF or emb.shape[0] > 0xFFFF:
            raise BankFormatError(f"study {sid!r}: id or video count exceeds u16")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<H", emb.shape[0]))
        parts.append(bytes(VIEW_CODES[v] for v in bank.views[sid]))
        parts.append(np.ascontiguousarray(emb, dtype="<f4").tobytes())
    return b"".join(parts)


def bank_from_bytes(buf: bytes, expected_width: int | None = None) -> EmbeddingBank:
    if len(buf) < len(MAGIC) or buf[: len(MAGIC)] != MAGIC:
        raise BadMagicError("bad magic")
    if len(buf) < HEADER.size:
        raise TruncatedBankError("truncated payload: header")
    _, width, count = HEADER.unpack_from(buf, 0)
    if expected_width is not None and width != expected_width:
        raise WidthMismatchError(f"width mismatch: bank has {width}, expected {expected_width}")
    bank = EmbeddingBank(width)
    off = HEADER.size

    def need(n: int, what: str) -> None:
        if off + n > len(buf):
            raise TruncatedBankError(f"truncated payload: {what} at offset {off}")

    for _ in range(count):
        need(2, "id length")
        (id_len,) = struct.unpack_from("<H", buf, off)
        off += 2
        need(id_len, "id")
        sid = buf[off: off + id_len].decode("utf-8")
        off += id_len
        need(2, "video count")
        (n_vid,) = struct.unpack_from("<H", buf, off)
        off += 2
        need(n_vid, "view tags")
        try:
            tags = tuple(VIEW_NAMES[c] for c in buf[off: off + n_vid])
        except KeyError as e:
            raise BankFormatError(f"study {sid!r}: unknown view code {e.args[0]}") from None
        off += n_vid
        nbytes = 4 * n_vid * width
        need(nbytes, "embeddings")
        emb = np.frombuffer(buf, dtype="<f4", count=n_vid * width, offset=off).reshape(n_vid, width)
        off += nbytes
        if sid in bank.studies:
            raise DuplicateStudyError(f"duplicate study_id {sid!r}")
        bank.add(sid, emb.astype(np.float32), tags)
    if off != len(buf):
        raise BankFormatError(f"{len(buf) - off} trailing bytes after last study")
    return bank


def save_bank(bank: EmbeddingBank, path: str | Path) -> None:
    Path(path).write_bytes(bank_to_bytes(bank))


def load_bank(path: str | Path, expected_width: int | None = None) -> EmbeddingBank:
    return bank_from_bytes(Path(path).read_bytes(), expected_width)
