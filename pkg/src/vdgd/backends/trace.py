"""Replayable logit-trace files: recorded per-position distributions standing
in for a live model.

The binary layout is versioned and documented in docs/formats.md; it is the
interchange surface between this toolkit and external exporters, so changes
must bump the version byte.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..dist import Distribution
from .base import Backend, BackendCapabilities, BackendError, TraceMissError

__all__ = [
    "TraceRecord",
    "TraceSession",
    "TraceBackend",
    "load_trace",
    "write_trace",
    "TRACE_MAGIC",
    "TRACE_VERSION",
    "DEFAULT_TOP_M",
]

TRACE_MAGIC = b"VDGDTRCE"
TRACE_VERSION = 1
DEFAULT_TOP_M = 256

_FLAG_SPARSE = 0x01


@dataclass(frozen=True)
class TraceRecord:
    """One recorded position: the token occupying it and the next-token
    distribution given everything before it.

    Sparse records keep the top-m entries plus the leftover mass, spread
    uniformly over the absent tokens when densified.
    """

    position: int
    context_token: int
    dense: np.ndarray | None = None
    sparse_ids: np.ndarray | None = None
    sparse_probs: np.ndarray | None = None
    residual_mass: float = 0.0

    @property
    def is_sparse(self) -> bool:
        return self.dense is None

    def densify(self, vocab_size: int) -> Distribution:
        if self.dense is not None:
            return Distribution(np.array(self.dense, dtype=np.float64))
        probs = np.zeros(vocab_size, dtype=np.float64)
        probs[self.sparse_ids] = self.sparse_probs
        absent = vocab_size - self.sparse_ids.size
        if absent > 0 and self.residual_mass > 0:
            share = self.residual_mass / absent
            mask = np.ones(vocab_size, dtype=bool)
            mask[self.sparse_ids] = False
            probs[mask] = share
        return Distribution(probs)


def _sparsify(probs: np.ndarray, top_m: int) -> tuple[np.ndarray, np.ndarray, float]:
    """Top-m entries (prob descending, ties by ascending id) and residual mass."""
    v = probs.size
    m = min(top_m, v)
    order = np.argsort(-probs, kind="stable")[:m]
    if m < v:
        order = order[probs[order] > 0]
    kept = probs[order]
    residual = max(0.0, 1.0 - float(kept.sum()))
    return order.astype(np.int64), kept.astype(np.float64), residual


@dataclass(frozen=True)
class TraceSession:
    """An in-memory recorded session: vocabulary size, tokenizer identity and
    the per-position records."""

    vocab_size: int
    tokenizer_id: str
    records: tuple[TraceRecord, ...]

    @property
    def tokens(self) -> tuple[int, ...]:
        return tuple(r.context_token for r in self.records)

    def distributions(self) -> list[Distribution]:
        return [r.densify(self.vocab_size) for r in self.records]

    @classmethod
    def from_distributions(
        cls,
        tokens: Sequence[int],
        distributions: Sequence[Distribution],
        vocab_size: int,
        tokenizer_id: str = "",
    ) -> "TraceSession":
        if len(tokens) != len(distributions):
            raise BackendError("tokens and distributions must align one-to-one")
        records = tuple(
            TraceRecord(position=i + 1, context_token=int(t), dense=np.asarray(d.probs, dtype=np.float64))
            for i, (t, d) in enumerate(zip(tokens, distributions))
        )
        return cls(vocab_size=vocab_size, tokenizer_id=tokenizer_id, records=records)


def write_trace(session: TraceSession, path: str | Path, top_m: int | None = DEFAULT_TOP_M) -> None:
    """Serialize a session. ``top_m`` of None writes dense records; otherwise
    each record keeps its top-m probabilities plus the residual mass."""
    sparse = top_m is not None
    with open(path, "wb") as fh:
        tok_bytes = session.tokenizer_id.encode("utf-8")
        fh.write(TRACE_MAGIC)
        fh.write(struct.pack("<HIB", TRACE_VERSION, session.vocab_size, _FLAG_SPARSE if sparse else 0))
        fh.write(struct.pack("<H", len(tok_bytes)))
        fh.write(tok_bytes)
        fh.write(struct.pack("<I", len(session.records)))
        for rec in session.records:
            if sparse:
                if rec.is_sparse and rec.sparse_ids.size <= top_m:
                    ids, probs, residual = rec.sparse_ids, rec.sparse_probs, rec.residual_mass
                else:
                    ids, probs, residual = _sparsify(
                        rec.dense if rec.dense is not None else rec.densify(session.vocab_size).probs,
                        top_m,
                    )
                payload = struct.pack("<III", rec.position, rec.context_token, ids.size)
                payload += ids.astype("<u4").tobytes()
                payload += probs.astype("<f8").tobytes()
                payload += struct.pack("<d", residual)
            else:
                dense = rec.dense if rec.dense is not None else rec.densify(session.vocab_size).probs
                payload = struct.pack("<II", rec.position, rec.context_token)
                payload += np.asarray(dense, dtype="<f8").tobytes()
            fh.write(struct.pack("<I", len(payload)))
            fh.write(payload)


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise BackendError(f"truncated trace file: expected {n} bytes for {what}, got {len(buf)}")
    return buf


def read_trace(path: str | Path) -> TraceSession:
    """Parse a trace file into a session, validating the header and every
    record length."""
    with open(path, "rb") as fh:
        magic = fh.read(len(TRACE_MAGIC))
        if magic != TRACE_MAGIC:
            raise BackendError(f"{path}: not a trace file (bad magic {magic!r})")
        version, vocab_size, flags = struct.unpack("<HIB", _read_exact(fh, 7, "header"))
        if version != TRACE_VERSION:
            raise BackendError(f"{path}: unsupported trace version {version} (expected {TRACE_VERSION})")
        sparse = bool(flags & _FLAG_SPARSE)
        (tok_len,) = struct.unpack("<H", _read_exact(fh, 2, "tokenizer id length"))
        tokenizer_id = _read_exact(fh, tok_len, "tokenizer id").decode("utf-8")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "record count"))
        records = []
        for i in range(count):
            (length,) = struct.unpack("<I", _read_exact(fh, 4, f"record {i} length"))
            payload = _read_exact(fh, length, f"record {i}")
            if sparse:
                position, context_token, m = struct.unpack_from("<III", payload, 0)
                off = 12
                ids = np.frombuffer(payload, dtype="<u4", count=m, offset=off).astype(np.int64)
                off += 4 * m
                probs = np.frombuffer(payload, dtype="<f8", count=m, offset=off).copy()
                off += 8 * m
                (residual,) = struct.unpack_from("<d", payload, off)
                records.append(
                    TraceRecord(
                        position=position,
                        context_token=context_token,
                        sparse_ids=ids,
                        sparse_probs=probs,
                        residual_mass=residual,
                    )
                )
            else:
                position, context_token = struct.unpack_from("<II", payload, 0)
                dense = np.frombuffer(payload, dtype="<f8", count=vocab_size, offset=8).copy()
                records.append(TraceRecord(position=position, context_token=context_token, dense=dense))
        if fh.read(1):
            raise BackendError(f"{path}: trailing bytes after the last record")
    return TraceSession(vocab_size=vocab_size, tokenizer_id=tokenizer_id, records=tuple(records))


class TraceBackend(Backend):
    """Replay of a recorded session. Contexts must match the recording token
    for token; anything else is a trace miss."""

    def __init__(self, session: TraceSession):
        self.session = session
        self._tokens = session.tokens
        self._caps = BackendCapabilities(
            vocab_size=session.vocab_size,
            supports_images=False,
            supports_teacher_forcing=True,
        )

    def capabilities(self) -> BackendCapabilities:
        return self._caps

    def _matched_prefix(self, context: Sequence[int]) -> int:
        matched = 0
        for got, recorded in zip(context, self._tokens):
            if int(got) != recorded:
                break
            matched += 1
        return matched

    def next_distribution(self, context: Sequence[int], image: object | None = None) -> Distribution:
        k = len(context)
        matched = self._matched_prefix(context)
        if matched < k or k >= len(self._tokens):
            raise TraceMissError(
                f"trace miss: context of length {k} diverges from the recording "
                f"after {matched} matching tokens ({len(self._tokens)} recorded)",
                matched_prefix_len=matched,
            )
        return self.session.records[k].densify(self.session.vocab_size)

    def forward(self, tokens: Sequence[int], image: object | None = None) -> list[Distribution]:
        matched = self._matched_prefix(tokens)
        if matched < len(tokens):
            raise TraceMissError(
                f"trace miss: teacher-forced tokens diverge from the recording "
                f"after {matched} matching tokens",
                matched_prefix_len=matched,
            )
        return [self.session.records[j].densify(self.session.vocab_size) for j in range(len(tokens))]


def load_trace(path: str | Path) -> TraceBackend:
    return TraceBackend(read_trace(path))
